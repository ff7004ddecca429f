"""Render sweep and ablation result tables as PNG charts."""
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import argparse
import logging

from PIL import Image, ImageDraw, ImageFont
from PIL.Image import Image as PILImage

import utils

RGBColor = Tuple[int, int, int]
logger = logging.getLogger(__name__)

METRIC_TITLES = {"auroc": "AUROC", "ap": "AP", "f1": "F1"}
DAYS_PER_MONTH = 30


def load_font(size: int) -> ImageFont.ImageFont:
    try:
        return ImageFont.truetype("arial.ttf", size)
    except Exception:
        try:
            return ImageFont.truetype("/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf", size)
        except Exception:
            return ImageFont.load_default()


class ResultPlotter:
    """Draws metric-vs-lead panels and ablation bar charts with CI whiskers."""

    PALETTE: List[RGBColor] = [
        (70, 130, 180), (220, 20, 60), (50, 205, 50), (255, 140, 0),
        (138, 43, 226), (0, 139, 139),
    ]
    AXIS: RGBColor = (60, 60, 60)
    GRID: RGBColor = (225, 225, 225)

    def __init__(self, panel_width: int = 360, panel_height: int = 300, margin: int = 50, font_size: int = 14):
        self.panel_width = panel_width
        self.panel_height = panel_height
        self.margin = margin
        self.font_size = font_size
        self.font = load_font(font_size)

    @staticmethod
    def value_range(lows: Sequence[float], highs: Sequence[float]) -> Tuple[float, float]:
        """Padded y-range covering every interval, clipped to [0, 1]."""
        lo, hi = min(lows), max(highs)
        pad = max(0.02, 0.1 * (hi - lo))
        return max(0.0, lo - pad), min(1.0, hi + pad)

    def _y(self, value: float, y_range: Tuple[float, float], top: int, height: int) -> float:
        lo, hi = y_range
        span = hi - lo if hi > lo else 1.0
        return top + height - (value - lo) / span * height

    def _y_axis(self, draw: ImageDraw.ImageDraw, left: int, top: int, width: int, height: int,
                y_range: Tuple[float, float]) -> None:
        lo, hi = y_range
        for i in range(5):
            value = lo + (hi - lo) * i / 4
            y = self._y(value, y_range, top, height)
            draw.line([(left, y), (left + width, y)], fill=self.GRID, width=1)
            draw.text((left - 44, y - self.font_size // 2), f"{value:.2f}", fill=self.AXIS, font=self.font)
        draw.line([(left, top), (left, top + height), (left + width, top + height)], fill=self.AXIS, width=2)

    def draw_sweep(self, rows: Sequence[Dict[str, Union[str, float]]]) -> PILImage:
        """One panel per metric: a curve per configuration, mean and CI whiskers against the lead time in months."""
        metrics = [m for m in METRIC_TITLES if any(r["metric"] == m for r in rows)]
        configurations = list(dict.fromkeys(str(r.get("configuration", "")) for r in rows))
        leads = sorted({int(r["lead_days"]) for r in rows})
        line_height = self.font_size + 6
        width = self.margin * 2 + len(metrics) * (self.panel_width + self.margin)
        height = self.panel_height + self.margin * 3 + line_height * len(configurations)
        image = Image.new("RGB", (width, height), (255, 255, 255))
        draw = ImageDraw.Draw(image)
        step = self.panel_width / max(1, len(leads))

        for p, metric in enumerate(metrics):
            metric_rows = [r for r in rows if r["metric"] == metric]
            left = self.margin * 2 + p * (self.panel_width + self.margin)
            top = self.margin
            y_range = self.value_range([r["ci_lo"] for r in metric_rows], [r["ci_hi"] for r in metric_rows])
            self._y_axis(draw, left, top, self.panel_width, self.panel_height, y_range)
            draw.text((left + self.panel_width // 2 - 20, top - self.margin // 2 - 5), METRIC_TITLES[metric],
                      fill=(0, 0, 0), font=self.font)
            for i, lead in enumerate(leads):
                x = left + step * (i + 0.5)
                draw.text((x - 10, top + self.panel_height + 8), f"{lead / DAYS_PER_MONTH:g}m",
                          fill=self.AXIS, font=self.font)

            for c, configuration in enumerate(configurations):
                by_lead = {int(r["lead_days"]): r for r in metric_rows
                           if str(r.get("configuration", "")) == configuration}
                color = self.PALETTE[c % len(self.PALETTE)]
                shift = (c - (len(configurations) - 1) / 2) * 6
                points = []
                for i, lead in enumerate(leads):
                    if lead not in by_lead:
                        continue
                    x = left + step * (i + 0.5) + shift
                    row = by_lead[lead]
                    y_lo = self._y(row["ci_lo"], y_range, top, self.panel_height)
                    y_hi = self._y(row["ci_hi"], y_range, top, self.panel_height)
                    draw.line([(x, y_lo), (x, y_hi)], fill=color, width=2)
                    draw.line([(x - 4, y_lo), (x + 4, y_lo)], fill=color, width=2)
                    draw.line([(x - 4, y_hi), (x + 4, y_hi)], fill=color, width=2)
                    points.append((x, self._y(row["mean"], y_range, top, self.panel_height)))
                if len(points) > 1:
                    draw.line(points, fill=color, width=2)
                for x, y in points:
                    draw.ellipse((x - 4, y - 4, x + 4, y + 4), fill=color, outline=(0, 0, 0), width=1)

        legend_top = self.panel_height + self.margin * 2 + 10
        draw.text((width // 2 - 60, legend_top - 12), "prediction interval", fill=(0, 0, 0), font=self.font)
        for c, configuration in enumerate(configurations):
            y = legend_top + self.font_size + c * line_height
            color = self.PALETTE[c % len(self.PALETTE)]
            draw.rectangle((self.margin * 2, y, self.margin * 2 + 12, y + 12), fill=color, outline=(0, 0, 0))
            draw.text((self.margin * 2 + 20, y - 2), configuration or "model", fill=(0, 0, 0), font=self.font)
        return image

    def draw_ablation(self, rows: Sequence[Dict[str, Union[str, float]]], metric: str = "auroc") -> PILImage:
        """Horizontal bars per configuration, in table order, with CI whiskers."""
        label_width = 120
        bar_height = max(18, self.font_size + 6)
        plot_width = self.panel_width * 2
        height = self.margin * 2 + len(rows) * bar_height * 2
        width = label_width + plot_width + self.margin * 2
        image = Image.new("RGB", (width, height), (255, 255, 255))
        draw = ImageDraw.Draw(image)

        lows = [float(r[f"{metric}_ci_lo"]) for r in rows]
        highs = [float(r[f"{metric}_ci_hi"]) for r in rows]
        lo, hi = self.value_range(lows, highs)
        left = self.margin + label_width

        def x_of(value: float) -> float:
            return left + (value - lo) / (hi - lo if hi > lo else 1.0) * plot_width

        draw.text((left, self.margin // 3), f"{METRIC_TITLES.get(metric, metric)} by configuration",
                  fill=(0, 0, 0), font=self.font)
        for i, row in enumerate(rows):
            y = self.margin + i * bar_height * 2
            color = self.PALETTE[i % len(self.PALETTE)]
            draw.text((self.margin, y + 2), str(row["configuration"]), fill=(0, 0, 0), font=self.font)
            draw.rectangle((left, y, x_of(float(row[f"{metric}_mean"])), y + bar_height),
                           fill=color, outline=(0, 0, 0), width=1)
            mid = y + bar_height / 2
            draw.line([(x_of(lows[i]), mid), (x_of(highs[i]), mid)], fill=(0, 0, 0), width=2)
            for edge in (lows[i], highs[i]):
                draw.line([(x_of(edge), mid - 5), (x_of(edge), mid + 5)], fill=(0, 0, 0), width=2)
            draw.text((x_of(highs[i]) + 8, y + 2), f"{float(row[f'{metric}_mean']):.3f}",
                      fill=self.AXIS, font=self.font)
        draw.line([(left, self.margin - 5), (left, height - self.margin)], fill=self.AXIS, width=2)
        draw.text((left - 10, height - self.margin + 5), f"{lo:.2f}", fill=self.AXIS, font=self.font)
        draw.text((left + plot_width - 20, height - self.margin + 5), f"{hi:.2f}", fill=self.AXIS, font=self.font)
        return image


def _numeric(rows: List[Dict[str, str]]) -> List[Dict[str, Union[str, float]]]:
    converted = []
    for row in rows:
        out: Dict[str, Union[str, float]] = {}
        for key, value in row.items():
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
        converted.append(out)
    return converted


def render_sweep_csv(csv_path: Union[str, Path], output_path: Optional[Union[str, Path]] = None) -> Path:
    csv_path = Path(csv_path)
    output_path = Path(output_path) if output_path else csv_path.with_suffix(".png")
    ResultPlotter().draw_sweep(_numeric(utils.read_csv(csv_path))).save(output_path)
    logger.info(f"Wrote sweep chart {output_path}")
    return output_path


def render_ablation_csv(csv_path: Union[str, Path], output_path: Optional[Union[str, Path]] = None,
                        metric: str = "auroc") -> Path:
    csv_path = Path(csv_path)
    output_path = Path(output_path) if output_path else csv_path.with_suffix(".png")
    ResultPlotter().draw_ablation(_numeric(utils.read_csv(csv_path)), metric).save(output_path)
    logger.info(f"Wrote ablation chart {output_path}")
    return output_path


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Render a sweep.csv or ablation.csv as a PNG chart")
    parser.add_argument("csv", help="sweep.csv or ablation.csv written by start.py")
    parser.add_argument("--kind", choices=("sweep", "ablation"), required=True)
    parser.add_argument("--metric", default="auroc", choices=tuple(METRIC_TITLES))
    parser.add_argument("--output", default=None)
    args = parser.parse_args()
    if args.kind == "sweep":
        render_sweep_csv(args.csv, args.output)
    else:
        render_ablation_csv(args.csv, args.output, args.metric)

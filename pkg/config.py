# config.py
"""Run configuration: defaults, documented hyperparameter grids and the flat
``key = value`` file format.

A config file holds one ``key = value`` per line; ``#`` starts a comment and
blank lines are ignored. Unknown keys are rejected. Command-line overrides are
applied on top of the file, so a flag always wins.
"""
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple, Union
import hashlib
import logging

from gradibd.errors import ConfigError, ParseError
from gradibd.model import Ablation, ModelConfig
from gradibd.train_eval import ExperimentSettings, TrainConfig

logger = logging.getLogger(__name__)

BASE_DIR = Path.cwd()
LOG_FILE_NAME = "gradibd.log"
MANIFEST_NAME = "manifest.json"

# Searched ranges reported for the original model. Documented, not orchestrated.
TAU_GRID = (1, 3, 7, 14, 30)
DIM_GRID = (16, 32, 64, 128, 256, 512)
DEPTH_GRID = (1, 2, 3, 4)
LAMBDA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)
LR_GRID = (1e-1, 1e-2, 1e-3, 1e-4)
BATCH_GRID = (1, 4, 8, 16, 32, 64)

SWEEP_LEADS = (30, 60, 90, 120, 150, 180)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_scope(text: str) -> str:
    scope = text.strip()
    if scope not in ("train", "all"):
        raise ValueError(f"expected 'train' or 'all', got {text!r}")
    return scope


# key -> (parser, default)
CONFIG_KEYS: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    "d_node": (int, 64),
    "d_graph": (int, 256),
    "depth": (int, 3),
    "lambda": (float, 0.3),
    "d_hidden": (int, 128),
    "cs": (_parse_bool, True),
    "cf": (_parse_bool, True),
    "td": (_parse_bool, True),
    "sim_floor": (float, 1e-6),
    "tau": (int, 7),
    "seed": (int, 0),
    "lr": (float, 1e-3),
    "batch_size": (int, 8),
    "folds": (int, 10),
    "max_epochs": (int, 100),
    "patience_lr": (int, 3),
    "patience_stop": (int, 10),
    "window_days": (int, 1095),
    "lead_days": (int, 30),
    "test_fraction": (float, 0.1),
    "vocab_scope": (_parse_scope, "train"),
    "lr_decay_factor": (float, 10.0),
    "min_delta": (float, 1e-5),
}


def default_values() -> Dict[str, Any]:
    return {key: default for key, (_, default) in CONFIG_KEYS.items()}


def _parse_value(key: str, raw: str, line_no: Optional[int] = None) -> Any:
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}" + (f" on line {line_no}" if line_no else ""))
    parser, _ = CONFIG_KEYS[key]
    try:
        return parser(raw.strip())
    except ValueError as e:
        raise ParseError(f"bad value for {key}: {e}", line_no=line_no) from None


def parse_config_text(text: str) -> Dict[str, Any]:
    """Parse flat ``key = value`` text into typed values (only the keys present)."""
    values: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ParseError(f"expected 'key = value', got {content!r}", line_no=line_no)
        key, raw = (part.strip() for part in content.split("=", 1))
        values[key] = _parse_value(key, raw, line_no)
    return values


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    values = parse_config_text(path.read_text(encoding="utf-8"))
    logger.info(f"Loaded {len(values)} config values from {path}")
    return values


def parse_overrides(assignments: Iterable[str]) -> Dict[str, Any]:
    """Parse ``--set key=value`` assignments."""
    values = {}
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"override must look like key=value, got {assignment!r}")
        key, raw = (part.strip() for part in assignment.split("=", 1))
        values[key] = _parse_value(key, raw)
    return values


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on besides its input files."""
    model: ModelConfig
    train: TrainConfig
    experiment: ExperimentSettings

    @classmethod
    def from_values(cls, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        v = default_values()
        v.update(overrides or {})
        model = ModelConfig(
            d_node=v["d_node"], d_graph=v["d_graph"], depth=v["depth"], lam=v["lambda"],
            d_hidden=v["d_hidden"], ablation=Ablation(v["cs"], v["cf"], v["td"]), sim_floor=v["sim_floor"])
        train = TrainConfig(
            folds=v["folds"], lr=v["lr"], lr_decay_factor=v["lr_decay_factor"], patience_lr=v["patience_lr"],
            patience_stop=v["patience_stop"], max_epochs=v["max_epochs"], batch_size=v["batch_size"],
            seed=v["seed"], min_delta=v["min_delta"])
        experiment = ExperimentSettings(
            tau=v["tau"], window_days=v["window_days"], lead_days=v["lead_days"],
            test_fraction=v["test_fraction"], vocab_scope=v["vocab_scope"], seed=v["seed"])
        return cls(model.validate(), train.validate(), experiment.validate())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_values(parse_config_text(text))

    def values(self) -> Dict[str, Any]:
        m, t, e = self.model, self.train, self.experiment
        values = {
            "d_node": m.d_node, "d_graph": m.d_graph, "depth": m.depth, "lambda": m.lam,
            "d_hidden": m.d_hidden, "cs": m.ablation.cs, "cf": m.ablation.cf, "td": m.ablation.td,
            "sim_floor": m.sim_floor, "tau": e.tau, "seed": t.seed, "lr": t.lr,
            "batch_size": t.batch_size, "folds": t.folds, "max_epochs": t.max_epochs,
            "patience_lr": t.patience_lr, "patience_stop": t.patience_stop,
            "window_days": e.window_days, "lead_days": e.lead_days, "test_fraction": e.test_fraction,
            "vocab_scope": e.vocab_scope, "lr_decay_factor": t.lr_decay_factor, "min_delta": t.min_delta,
        }
        return {key: values[key] for key in CONFIG_KEYS}

    def to_text(self) -> str:
        """Canonical rendering: every key, in declaration order."""
        return "".join(f"{key} = {_format_value(value)}\n" for key, value in self.values().items())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        return {"model": asdict(self.model), "train": asdict(self.train), "experiment": asdict(self.experiment)}


def resolve_run_config(config_path: Optional[Union[str, Path]] = None,
                       overrides: Optional[Iterable[str]] = None,
                       flags: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults, then the file, then ``--set`` overrides, then dedicated flags."""
    values: Dict[str, Any] = {}
    if config_path is not None:
        values.update(load_config_file(config_path))
    values.update(parse_overrides(overrides or ()))
    values.update({key: value for key, value in (flags or {}).items() if value is not None})
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig.from_values(values)

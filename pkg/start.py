# start.py
"""Command-line entry point. Run with: python start.py <subcommand> [options]

Subcommands: gen-cohort, encode, train, eval, ablate, sweep, flops, selftest.
Exit status is 0 on success, 1 on a validation error and 2 on a runtime
failure; errors go to stderr as ``ERROR <code>: <message>``.
"""
from dataclasses import asdict, dataclass, field
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import argparse
import logging
import os
import sys

import config
import utils
from gradibd import CHECKPOINT_FORMAT_VERSION, COHORT_FORMAT_VERSION, GRAPH_FORMAT_VERSION, __version__
from gradibd.checkpoints import Checkpoint, CheckpointManager, read_checkpoint, write_scores, write_trace
from gradibd.cohort import SynthConfig, apply_prediction_interval, generate_synthetic, load_cohort, save_cohort
from gradibd.dataset import (GraphStore, build_cohort_vocab, cohort_fingerprint, encode_cohort, encode_matrices,
                             write_matrix_dir, write_stats_csv)
from gradibd.errors import CheckpointFormatError, GradIbdError, MissingFlag, UnknownCommand, ValidationError
from gradibd.icd_codec import CodeVocab
from gradibd.icd_graph import graph_stats
from gradibd.model import (FLOP_CONVENTION, PUBLISHED_FLOPS_M, PUBLISHED_PARAMS_M, Ablation, ablation_grid,
                           count_flops, count_params, describe, flop_breakdown, mean_graph_stats)
from gradibd.selftest import run_selftest
from gradibd.train_eval import (EpochRecord, cross_validate, cv_report, evaluate_ensemble, experiment_notes,
                                prepare_split, report_from_score_files, run_ablation, sensitivity_sweep)
import postprocessing_draw_results

logger = logging.getLogger(__name__)

COMMANDS = ("gen-cohort", "encode", "train", "eval", "ablate", "sweep", "flops", "selftest")
FORMATS = {"checkpoint": CHECKPOINT_FORMAT_VERSION, "graph": GRAPH_FORMAT_VERSION, "cohort": COHORT_FORMAT_VERSION}
VERSION_TEXT = (f"gradibd {__version__} (checkpoint format {CHECKPOINT_FORMAT_VERSION}, "
                f"graph format {GRAPH_FORMAT_VERSION}, cohort format {COHORT_FORMAT_VERSION})")


class CliParser(argparse.ArgumentParser):
    """Turns argparse failures into gradibd validation errors instead of exiting."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        if "invalid choice" in message:
            raise UnknownCommand(message)
        raise MissingFlag(message)


@dataclass
class CommandResult:
    """What a subcommand produced, for the run manifest."""
    out_dir: Optional[Path] = None
    outputs: List[str] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, Optional[str]] = field(default_factory=dict)
    seed: Optional[int] = None
    exit_code: int = 0


def setup_logging(log_dir: Optional[Path] = None, level: str = "INFO") -> None:
    """Line-oriented logs on stderr, plus a rotating file when there is an output directory."""
    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(logging.Formatter("[%(levelname)s] %(name)s: %(message)s"))
    root_logger.addHandler(stream)

    if log_dir is not None:
        log_dir.mkdir(exist_ok=True, parents=True)
        handler = RotatingFileHandler(log_dir / config.LOG_FILE_NAME, maxBytes=1024 * 1024, backupCount=5,
                                      encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))
        root_logger.addHandler(handler)
    root_logger.setLevel(getattr(logging, level.upper(), logging.INFO))


# === Subcommands ===

def _run_config(args: argparse.Namespace) -> config.RunConfig:
    flags = {"seed": getattr(args, "seed", None), "lead_days": getattr(args, "lead_days", None),
             "vocab_scope": getattr(args, "vocab_scope", None)}
    return config.resolve_run_config(getattr(args, "config", None), getattr(args, "set", None), flags)


def _given_vocab(args: argparse.Namespace) -> Optional[CodeVocab]:
    path = getattr(args, "vocab", None)
    return CodeVocab.load(path) if path else None


def cmd_gen_cohort(args: argparse.Namespace) -> CommandResult:
    out = Path(args.out)
    synth = SynthConfig(
        n_patients=args.n_patients, case_fraction=args.case_fraction,
        motif_ramp=0.0 if args.null_signal else args.motif_ramp,
        motif_intensity=0.0 if args.null_signal else args.motif_intensity,
        motif_in_controls=not args.cases_only_motifs,
        seed=args.seed if args.seed is not None else SynthConfig.seed)
    path = utils.resolve_inside(out, "cohort.jsonl")
    save_cohort(generate_synthetic(synth), path)
    print(f"Wrote {synth.n_patients} patients to {path}")
    return CommandResult(out, [path.name], asdict(synth), seed=synth.seed)


def cmd_encode(args: argparse.Namespace) -> CommandResult:
    out = Path(args.out)
    run = _run_config(args)
    settings = run.experiment
    originals = load_cohort(args.cohort)
    records = [apply_prediction_interval(r, settings.lead_days) for r in originals]
    vocab = _given_vocab(args) or build_cohort_vocab(records)

    patients = encode_cohort(records, vocab, settings.tau, settings.window_days)
    outputs = ["vocab.txt", "graphs.jsonl", "graph_stats.csv"]
    vocab.save(utils.resolve_inside(out, outputs[0]))
    GraphStore(utils.resolve_inside(out, outputs[1])).save(patients)
    write_stats_csv(utils.resolve_inside(out, outputs[2]), patients)
    if args.dump_matrix:
        paths = write_matrix_dir(args.dump_matrix, [r.patient_id for r in records],
                                 encode_matrices(records, vocab, settings.tau, settings.window_days))
        outputs += [str(p) for p in paths]
    print(f"Encoded {len(patients)} patients over {vocab.n} codes into {out}")
    return CommandResult(out, outputs, run.values(), {"cohort": args.cohort, "vocab": args.vocab},
                         seed=run.train.seed)


def cmd_train(args: argparse.Namespace) -> CommandResult:
    out = Path(args.out)
    run = _run_config(args)
    originals = load_cohort(args.cohort)
    train, test, vocab = prepare_split(originals, run.experiment, _given_vocab(args))
    patients = encode_cohort(train, vocab, run.experiment.tau, run.experiment.window_days)
    results = cross_validate(patients, vocab.n, run.model, run.train, args.jobs)

    manager = CheckpointManager(utils.resolve_inside(out, "."))
    run_text = run.to_text()
    manager.save_config_text(run_text)
    vocab.save(manager.vocab_path)
    outputs = ["config.txt", "vocab.txt"]
    for result in results:
        manager.save_fold(result.fold, Checkpoint(result.arrays, result.adam, run_text, meta={
            "fold": result.fold, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
            "n_codes": vocab.n, "vocab": list(vocab.codes), "run_fingerprint": run.fingerprint()}))
        write_trace(manager.trace_path(result.fold), EpochRecord._fields, result.trace)
        write_scores(manager.scores_path(result.fold), result.val_scores)
        fold_name = manager.fold_dir(result.fold).name
        outputs += [f"{fold_name}/params.ckpt", f"{fold_name}/trace.csv", f"{fold_name}/scores.csv"]

    test_ids = {r.patient_id for r in test}
    save_cohort([r for r in originals if r.patient_id in test_ids], utils.resolve_inside(out, "test.jsonl"))
    report = cv_report(results, run_fingerprint=run.fingerprint(), cohort_fingerprint=cohort_fingerprint(originals),
                       notes=experiment_notes(run.train, run.experiment))
    utils.resolve_inside(out, "cv_report.json").write_text(report.to_json(), encoding="utf-8")
    outputs += ["test.jsonl", "cv_report.json"]
    print(f"Trained {len(results)} fold models ({describe(run.model, vocab.n)}); "
          f"out-of-fold AUROC {report.aggregate['auroc'].mean:.4f}")
    return CommandResult(out, outputs, run.values(), {"cohort": args.cohort, "vocab": args.vocab},
                         seed=run.train.seed)


def _load_fold_models(args: argparse.Namespace) -> Tuple[config.RunConfig, CodeVocab, List[Tuple[int, Checkpoint]]]:
    """Run config, vocabulary and (fold, checkpoint) pairs from a training directory or single files.

    Single checkpoint files carry their own config and vocabulary; given
    together they must come from the same run configuration.
    """
    if args.checkpoints:
        manager = CheckpointManager(args.checkpoints)
        run = config.RunConfig.from_text(manager.load_config_text())
        return run, CodeVocab.load(manager.vocab_path), [(f, manager.load_fold(f)) for f in manager.folds()]

    models = [(i, read_checkpoint(path)) for i, path in enumerate(args.checkpoint)]
    texts = {ckpt.config_text for _, ckpt in models}
    if len(texts) != 1 or not models[0][1].config_text:
        raise CheckpointFormatError("checkpoint files must all carry the same run configuration")
    vocabs = {tuple((ckpt.meta or {}).get("vocab", ())) for _, ckpt in models}
    if len(vocabs) != 1 or not next(iter(vocabs)):
        raise CheckpointFormatError("checkpoint files must all carry the same vocabulary")
    return config.RunConfig.from_text(texts.pop()), CodeVocab(vocabs.pop()), models


def cmd_eval(args: argparse.Namespace) -> CommandResult:
    report_path = Path(args.out)
    out = report_path.parent
    run, vocab, models = _load_fold_models(args)
    folds = [f for f, _ in models]
    originals = load_cohort(args.test)
    extra = {"run_fingerprint": run.fingerprint(), "cohort_fingerprint": cohort_fingerprint(originals),
             "notes": experiment_notes(run.train, run.experiment)}
    score_paths = [utils.resolve_inside(out, f"scores/fold_{f:02d}.csv") for f in folds]

    if args.from_scores:
        missing = [str(p) for p in score_paths if not p.exists()]
        if missing or not folds:
            raise CheckpointFormatError(f"no persisted scores to recompute from: {missing or args.checkpoints}")
        report = report_from_score_files([str(p) for p in score_paths], **extra)
        outputs = [report_path.name]
    else:
        records = [apply_prediction_interval(r, run.experiment.lead_days) for r in originals]
        test = encode_cohort(records, vocab, run.experiment.tau, run.experiment.window_days)
        report, fold_rows = evaluate_ensemble([ckpt.params for _, ckpt in models], test, run.model,
                                              vocab.n, **extra)
        for path, rows in zip(score_paths, fold_rows):
            write_scores(path, rows)
        outputs = [report_path.name] + [f"scores/{p.name}" for p in score_paths]
    utils.resolve_inside(out, report_path.name).write_text(report.to_json(), encoding="utf-8")
    for metric, summary in report.aggregate.items():
        print(f"{metric}: {summary.mean:.4f} (95% CI {summary.ci_lo:.4f}-{summary.ci_hi:.4f})")
    sources = {"checkpoints": args.checkpoints} if args.checkpoints else {
        f"checkpoint_{i}": path for i, path in enumerate(args.checkpoint)}
    return CommandResult(out, outputs, run.values(), {**sources, "test": args.test}, seed=run.train.seed)


ABLATION_FIELDS = ["configuration", "cs", "cf", "td"] + [
    f"{m}_{s}" for m in ("auroc", "ap", "f1") for s in ("mean", "ci_lo", "ci_hi")]


def cmd_ablate(args: argparse.Namespace) -> CommandResult:
    csv_path = Path(args.out)
    out = csv_path.parent
    run = _run_config(args)
    grid = ablation_grid(args.grid.split(","))
    rows = run_ablation(load_cohort(args.cohort), run.model, run.train, run.experiment, grid, args.jobs,
                        vocab=_given_vocab(args))
    table = [[row.configuration, int(row.ablation.cs), int(row.ablation.cf), int(row.ablation.td)]
             + [v for m in ("auroc", "ap", "f1") for v in row.report.aggregate[m]] for row in rows]
    utils.write_csv(utils.resolve_inside(out, csv_path.name), ABLATION_FIELDS, table)
    chart = postprocessing_draw_results.render_ablation_csv(utils.resolve_inside(out, csv_path.name))
    for line in table:
        print(f"{line[0]:<10} AUROC {line[4]:.4f}  AP {line[7]:.4f}  F1 {line[10]:.4f}")
    return CommandResult(out, [csv_path.name, chart.name], {**run.values(), "grid": args.grid},
                         {"cohort": args.cohort, "vocab": args.vocab}, seed=run.train.seed)


def sweep_configurations(text: Optional[str], configured: Ablation) -> List[Ablation]:
    """Ablations named by ``--grid`` (labels such as ``cs+cf+td,uniform``).

    Without a grid the configured model is compared against Uniform aggregation.
    """
    if text is None:
        uniform = Ablation(False, False, False)
        return [configured] if configured == uniform else [configured, uniform]
    labels = [label for label in text.split(",") if label.strip()]
    if not labels:
        raise MissingFlag("--grid needs at least one configuration label")
    return [Ablation.from_label(label) for label in labels]


SWEEP_FIELDS = ["configuration", "lead_days", "metric", "mean", "ci_lo", "ci_hi"]


def cmd_sweep(args: argparse.Namespace) -> CommandResult:
    out = Path(args.out)
    run = _run_config(args)
    try:
        leads = [int(x) for x in args.leads.split(",") if x.strip()]
    except ValueError:
        raise MissingFlag(f"--leads must be comma-separated day counts, got {args.leads!r}") from None
    grid = sweep_configurations(args.grid, run.model.ablation)
    rows, reports = sensitivity_sweep(load_cohort(args.cohort), leads, run.model, run.train, run.experiment,
                                      args.jobs, ablations=grid, vocab=_given_vocab(args))
    csv_path = utils.resolve_inside(out, "sweep.csv")
    utils.write_csv(csv_path, SWEEP_FIELDS, rows)
    outputs = ["sweep.csv"]
    slugs = {a.label: a.slug for a in grid}
    for (label, lead), report in reports.items():
        name = f"reports/{slugs[label]}/lead_{lead:03d}.json"
        path = utils.resolve_inside(out, name)
        path.parent.mkdir(exist_ok=True, parents=True)
        path.write_text(report.to_json(), encoding="utf-8")
        outputs.append(name)
    outputs.append(postprocessing_draw_results.render_sweep_csv(csv_path).name)
    for row in rows:
        print(f"{row.configuration:<10} lead {row.lead_days:>4}d {row.metric:<5} {row.mean:.4f} "
              f"[{row.ci_lo:.4f}, {row.ci_hi:.4f}]")
    return CommandResult(out, outputs, {**run.values(), "leads": leads, "grid": [a.label for a in grid]},
                         {"cohort": args.cohort, "vocab": args.vocab}, seed=run.train.seed)


def cmd_flops(args: argparse.Namespace) -> CommandResult:
    run = _run_config(args)
    settings = run.experiment
    records = [apply_prediction_interval(r, settings.lead_days) for r in load_cohort(args.cohort)]
    vocab = _given_vocab(args) or build_cohort_vocab(records)
    stats = mean_graph_stats([graph_stats(p.graph) for p in
                              encode_cohort(records, vocab, settings.tau, settings.window_days)])
    n_params = count_params(run.model, vocab.n)
    n_flops = count_flops(run.model, stats)
    print(f"model: {describe(run.model)}")
    print(f"vocabulary: {vocab.n} codes (incl. UNK)")
    print(f"reference graph (cohort mean): {stats.n_nodes} nodes, {stats.n_edges} edges, {stats.n_buckets} buckets")
    print(f"params: {n_params} ({n_params / 1e6:.3f} M); published figure {PUBLISHED_PARAMS_M} M, for comparison only")
    print(f"FLOPs: {n_flops} ({n_flops / 1e6:.3f} M); published figure {PUBLISHED_FLOPS_M} M, for comparison only")
    for term in flop_breakdown(run.model, stats):
        print(f"  {term.name:<20} {term.flops}")
    print(f"convention: {FLOP_CONVENTION}")
    out = Path(args.out) if args.out else None
    outputs = []
    if out is not None:
        utils.write_csv(utils.resolve_inside(out, "flops.csv"), ["term", "flops"],
                        [*flop_breakdown(run.model, stats), ("total", n_flops), ("params", n_params)])
        outputs.append("flops.csv")
    return CommandResult(out, outputs, run.values(), {"cohort": args.cohort}, seed=run.train.seed)


def cmd_selftest(args: argparse.Namespace) -> CommandResult:
    results = run_selftest(seed=args.seed or 0, scale=0.1 if args.quick else 1.0)
    for result in results:
        print(result.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return CommandResult(exit_code=2 if failed else 0)


HANDLERS: Dict[str, Callable[[argparse.Namespace], CommandResult]] = {
    "gen-cohort": cmd_gen_cohort,
    "encode": cmd_encode,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "flops": cmd_flops,
    "selftest": cmd_selftest,
}


def build_parser() -> CliParser:
    parser = CliParser(prog="start.py", description="Graph-based disease risk detection from diagnosis codes",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=VERSION_TEXT)
    parser.add_argument("--log-level", default="INFO", help="Root log level")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--seed", type=int, default=None, help="Seed (overrides the config file)")
        return p

    def add_run_options(p: argparse.ArgumentParser, jobs: bool = True) -> None:
        p.add_argument("--vocab", default=None, help="Existing vocabulary file (default: built from the cohort)")
        p.add_argument("--config", default=None, help="Flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override one config key")
        p.add_argument("--lead-days", type=int, default=None, help="Prediction interval in days")
        p.add_argument("--vocab-scope", choices=("train", "all"), default=None)
        if jobs:
            p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="Parallel fold workers")

    p = add("gen-cohort", "Generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n", "--n-patients", dest="n_patients", type=int, default=SynthConfig.n_patients)
    p.add_argument("--case-frac", "--case-fraction", dest="case_fraction", type=float,
                   default=SynthConfig.case_fraction)
    p.add_argument("--motif-ramp", type=float, default=SynthConfig.motif_ramp)
    p.add_argument("--motif-intensity", type=float, default=SynthConfig.motif_intensity)
    p.add_argument("--null-signal", action="store_true", help="Cases carry no signal")
    p.add_argument("--cases-only-motifs", action="store_true",
                   help="Controls never draw motif codes (by default they do, at the base intensity)")

    p = add("encode", "Encode a cohort into vocabulary, bucket matrices and graphs")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-matrix", default=None, metavar="DIR",
                   help="Also write one bucket-matrix CSV per patient into DIR")
    add_run_options(p, jobs=False)

    p = add("train", "Cross-validated training on the training split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    add_run_options(p)

    p = add("eval", "Fold-ensemble evaluation on a test cohort")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoints", default=None, help="Training output directory")
    source.add_argument("--checkpoint", action="append", default=None, metavar="PATH",
                        help="One fold checkpoint file; repeat for an ensemble")
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="Report JSON path")
    p.add_argument("--from-scores", action="store_true", help="Recompute from the persisted score files")

    p = add("ablate", "Cross-validate the ablation configurations")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="Ablation CSV path")
    p.add_argument("--grid", default="cs,cf,td", help="Axes to ablate")
    add_run_options(p)

    p = add("sweep", "Prediction-interval sensitivity sweep")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--leads", default=",".join(str(d) for d in config.SWEEP_LEADS))
    p.add_argument("--grid", default=None,
                   help="Labels to compare, e.g. cs+cf+td,uniform (default: configured model and Uniform)")
    add_run_options(p)

    p = add("flops", "Parameter and FLOP accounting")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", default=None)
    add_run_options(p, jobs=False)

    p = add("selftest", "Run the built-in invariant suite")
    p.add_argument("--quick", action="store_true", help="Fewer random cases")
    return parser


def dispatch(argv: Sequence[str]) -> int:
    """Run one subcommand and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except ValidationError as e:
        print(f"ERROR {e.code}: {e}", file=sys.stderr)
        return e.exit_status

    out = getattr(args, "out", None)
    log_dir = None
    if out is not None:
        out_dir = Path(out).parent if args.command in ("eval", "ablate") else Path(out)
        log_dir = out_dir / "logs"
    setup_logging(log_dir, args.log_level)

    manifest = utils.RunManifest(command=["start.py", *argv], subcommand=args.command, config={}, inputs={},
                                 seed=None, tool_version=__version__, formats=FORMATS,
                                 started_at=utils.RunManifest.now())
    try:
        result = HANDLERS[args.command](args)
    except GradIbdError as e:
        if isinstance(e, ValidationError):
            logger.error(f"{args.command} failed: {e}")
        else:
            logger.exception(f"{args.command} failed")
        print(f"ERROR {e.code}: {e}", file=sys.stderr)
        return e.exit_status
    except Exception as e:
        logger.exception(f"{args.command} failed")
        print(f"ERROR RUNTIME: {e}", file=sys.stderr)
        return 2

    if result.out_dir is not None:
        manifest.config = result.config
        manifest.seed = result.seed
        manifest.outputs = result.outputs
        manifest.hash_inputs(result.inputs)
        manifest.finished_at = utils.RunManifest.now()
        utils.write_manifest(result.out_dir, manifest, config.MANIFEST_NAME)
    return result.exit_code


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

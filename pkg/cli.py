"""
DualNoise command line.

    python cli.py synth  --c-total 10 --known 8 --noise sym --rate 0.4 --out data/lond
    python cli.py train  --dataset data/lond --epochs 60 --warmup 10 --k 20 --name desk
    python cli.py eval   --checkpoint runs/desk/checkpoint_last.pt
    python cli.py report runs/desk

Every subcommand accepts --config (flat `key = value` file) and --preset; explicit
flags override both. Exit codes: 0 success, 2 configuration error, 3 training abort.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from config import CONFIG_PRESETS, LOG_LEVEL_ENV, ExperimentConfig, HyperParams, build_config, collect_values  # noqa: E402
from errors import EXIT_OK, ConfigurationError, DualNoiseError, exit_code_for  # noqa: E402
from evaluate import MetricsReport, evaluate_model, write_summary  # noqa: E402
from nets import load_checkpoint  # noqa: E402
from noisegen import save_dataset  # noqa: E402
from trainer import METRICS_FILE, SUMMARY_FILE, make_dataset, run  # noqa: E402

logger = logging.getLogger(__name__)

EVAL_SUMMARY_FILE = "eval_summary.json"
REPORT_FILE = "summary.md"


def _hyper_default(name: str) -> Any:
    return HyperParams.model_fields[name].default


def _experiment_default(name: str) -> Any:
    return ExperimentConfig.model_fields[name].default


# flag dest -> config key
FLAG_KEYS = {
    "c_total": "c_total", "known": "known_classes", "dim": "dim", "per_class": "per_class",
    "separation": "separation", "test_fraction": "test_fraction", "noise": "noise_type", "rate": "noise_rate",
    "mode": "task_mode", "open_train": "open_train_count", "seed": "seed", "device": "device",
    "dataset": "dataset_path", "epochs": "total_epochs", "warmup": "warmup_epochs", "k": "k_neighbors",
    "top_k": "k_top", "alpha_id": "alpha_id", "alpha_ood": "alpha_ood", "tau": "tau", "sharpen_t": "sharpen_t",
    "lambda_con": "lambda_con", "lambda_bcl": "lambda_bcl", "lambda_proto": "lambda_proto",
    "mixup_alpha": "mixup_alpha", "lr": "lr", "batch_size": "batch_size", "method": "method",
    "save_every": "save_every", "source": "source_path",
}


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="flat `key = value` config file")
    parser.add_argument("--preset", choices=sorted(CONFIG_PRESETS), help="start from a named preset")
    parser.add_argument("--seed", type=int, help="random seed (default: 0)")
    parser.add_argument("--device", help="torch device (default: $DUALNOISE_DEVICE or cpu)")


def _add_task(parser: argparse.ArgumentParser):
    parser.add_argument("--c-total", dest="c_total", type=int,
                        help=f"classes in the clean source (default: {_experiment_default('c_total')})")
    parser.add_argument("--known", type=int,
                        help=f"known classes C (default: {_experiment_default('known_classes')})")
    parser.add_argument("--dim", type=int, help=f"feature dimension (default: {_experiment_default('dim')})")
    parser.add_argument("--per-class", dest="per_class", type=int,
                        help=f"samples per class (default: {_experiment_default('per_class')})")
    parser.add_argument("--separation", type=float,
                        help=f"distance between class means (default: {_experiment_default('separation')})")
    parser.add_argument("--test-fraction", dest="test_fraction", type=float,
                        help=f"test split fraction (default: {_experiment_default('test_fraction')})")
    parser.add_argument("--noise", choices=["sym", "asym", "symmetric", "asymmetric"],
                        help="closed-set noise type (default: symmetric)")
    parser.add_argument("--rate", type=float,
                        help=f"closed-set noise rate (default: {_experiment_default('noise_rate')})")
    parser.add_argument("--mode", choices=["lond", "lcnd", "lrnd"], help="task setting (default: lond)")
    parser.add_argument("--open-train", dest="open_train", type=int,
                        help="open-set training samples (default: whole open train pool)")
    parser.add_argument("--source", help="clean source .npz with features, labels, split (default: Gaussian synthesis)")


def _add_training(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", help="dataset directory written by `synth` (default: synthesize inline)")
    parser.add_argument("--epochs", type=int, help=f"total epochs (default: {_hyper_default('total_epochs')})")
    parser.add_argument("--warmup", type=int, help=f"warm-up epochs (default: {_hyper_default('warmup_epochs')})")
    parser.add_argument("--k", type=int, help=f"neighbors k (default: {_hyper_default('k_neighbors')})")
    parser.add_argument("--top-k", dest="top_k", type=int,
                        help="top-K in the neighbor margin (default: 3 for symmetric, 1 for asymmetric noise)")
    parser.add_argument("--alpha-id", dest="alpha_id", type=float,
                        help=f"clean selection ratio (default: {_hyper_default('alpha_id')})")
    parser.add_argument("--alpha-ood", dest="alpha_ood", type=float,
                        help=f"open-set filtering ratio (default: {_hyper_default('alpha_ood')})")
    parser.add_argument("--tau", type=float, help=f"temperature (default: {_hyper_default('tau')})")
    parser.add_argument("--sharpen-t", dest="sharpen_t", type=float,
                        help=f"sharpening temperature (default: {_hyper_default('sharpen_t')})")
    parser.add_argument("--lambda-con", dest="lambda_con", type=float,
                        help=f"consistency weight (default: {_hyper_default('lambda_con')})")
    parser.add_argument("--lambda-bcl", dest="lambda_bcl", type=float,
                        help=f"contrastive weight (default: {_hyper_default('lambda_bcl')})")
    parser.add_argument("--lambda-proto", dest="lambda_proto", type=float,
                        help=f"prototype loss weight (default: {_hyper_default('lambda_proto')})")
    parser.add_argument("--mixup-alpha", dest="mixup_alpha", type=float,
                        help=f"mixup Beta parameter (default: {_hyper_default('mixup_alpha')})")
    parser.add_argument("--lr", type=float, help=f"initial learning rate (default: {_hyper_default('lr')})")
    parser.add_argument("--batch-size", dest="batch_size", type=int,
                        help=f"batch size (default: {_hyper_default('batch_size')})")
    parser.add_argument("--method", choices=["dual", "ce"], help="dual method or cross-entropy baseline")
    parser.add_argument("--save-every", dest="save_every", type=int, help="checkpoint period in epochs")
    parser.add_argument("--no-pu", dest="enable_pu", action="store_false", default=None,
                        help="drop the pseudo-label loss on close-set samples")
    parser.add_argument("--no-con", dest="enable_con", action="store_false", default=None,
                        help="drop the OVA consistency loss")
    parser.add_argument("--no-bcl", dest="enable_bcl", action="store_false", default=None,
                        help="drop the bi-level contrastive loss")
    parser.add_argument("--quiet", dest="progress", action="store_false", default=None, help="hide the epoch bar")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DualNoise: joint learning under open- and closed-set label noise")
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth = subparsers.add_parser("synth", help="Synthesize a noisy task and write it to disk")
    _add_common(synth)
    _add_task(synth)
    synth.add_argument("--out", type=Path, help="dataset directory (default: $DUALNOISE_OUTPUT_ROOT/dataset)")

    train = subparsers.add_parser("train", help="Train on a dataset and log metrics every epoch")
    _add_common(train)
    _add_task(train)
    _add_training(train)
    train.add_argument("--name", default="run", help="run name under $DUALNOISE_OUTPUT_ROOT")
    train.add_argument("--output-dir", dest="output_dir", help="explicit run directory")
    train.add_argument("--resume", type=Path, help="checkpoint to resume from")

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint on the test split")
    eval_parser.add_argument("--checkpoint", type=Path, required=True)
    eval_parser.add_argument("--dataset", help="dataset directory (default: the one recorded in the checkpoint)")
    eval_parser.add_argument("--out", type=Path, help="summary JSON path (default: next to the checkpoint)")

    report = subparsers.add_parser("report", help="Draw metric curves and a markdown summary for a run")
    report.add_argument("run_dir", type=Path)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if hasattr(args, dest)}
    for switch in ("enable_pu", "enable_con", "enable_bcl", "progress", "output_dir"):
        if hasattr(args, switch):
            values[switch] = getattr(args, switch)
    return {k: v for k, v in values.items() if v is not None}


def _as_int(value: Any) -> Optional[int]:
    try:
        return int(value)
    except (TypeError, ValueError):
        return None


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """Resolve preset, config file and flags; a request without open classes becomes LCND"""
    values = collect_values(args.config, overrides=_overrides(args), preset=args.preset)
    known = _as_int(values.get("known_classes", _experiment_default("known_classes")))
    c_total = _as_int(values.get("c_total", _experiment_default("c_total")))
    inline = values.get("dataset_path") is None and values.get("source_path") is None
    if inline and known is not None and known == c_total and values.get("task_mode", "lond") != "lcnd":
        print("⚠️  known classes equal c_total: no open classes, switching to LCND (AUROC/FPR95 will be null)")
        values["task_mode"] = "lcnd"
    return build_config(values)


def cmd_synth(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    out = args.out or config.resolve_output_dir("dataset")
    origin = config.source_path or f"Gaussian source, C_total={config.c_total}"
    print(f"🧪 Synthesizing {config.task_mode.upper()} task from {origin}: C={config.known_classes}, "
          f"{config.noise_type} noise {config.noise_rate:.0%}")
    dataset = make_dataset(config)
    save_dataset(dataset, out)
    config.write_echo(out)
    counts = dataset.counts()
    print(f"✅ Wrote {counts['total']} samples to {out}")
    print(f"   train={counts['train']} test={counts['test']} clean={counts['clean']} "
          f"closed={counts['closed']} open={counts['open']}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    hp = config.hyper
    print(f"🚀 Training {config.method} for {hp.total_epochs} epochs ({hp.warmup_epochs} warm-up), k={hp.k_neighbors}")
    result = run(config, resume=args.resume, run_name=args.name)
    final = result.summary["final"]
    print(f"✅ Finished: {result.output_dir}")
    for key in ("accuracy", "auroc", "fpr95", "clean_precision"):
        print(f"   {key:<16} {final.get(key)}")
    return EXIT_OK


def evaluate_checkpoint(checkpoint: Path, dataset_path: Optional[str] = None) -> Dict[str, Any]:
    """Rebuild the run's config from the checkpoint and evaluate on the test split"""
    model, state = load_checkpoint(checkpoint)
    values = dict(state["hyper"])
    if dataset_path is not None:
        values["dataset_path"] = dataset_path
    config = build_config(values)
    dataset = make_dataset(config)
    metrics = evaluate_model(model, dataset.test(), batch_size=config.eval_batch_size, method=config.method)
    report = MetricsReport(epoch=int(state["epoch"]), phase="eval", lr=0.0, **metrics)
    return {
        "checkpoint": str(checkpoint),
        "dataset": config.dataset_path,
        "method": config.method,
        "metrics": report.to_record(),
    }


def cmd_eval(args: argparse.Namespace) -> int:
    print(f"🔍 Evaluating {args.checkpoint}")
    summary = evaluate_checkpoint(args.checkpoint, args.dataset)
    out = args.out or args.checkpoint.parent / EVAL_SUMMARY_FILE
    write_summary(out, summary)
    metrics = summary["metrics"]
    print(f"✅ accuracy={metrics['accuracy']} auroc={metrics['auroc']} fpr95={metrics['fpr95']}")
    print(f"   Summary: {out}")
    return EXIT_OK


def load_metrics(run_dir: Path) -> pd.DataFrame:
    """
    Load a run's metrics.jsonl as one row per epoch, loss components flattened.

    Raises:
        ConfigurationError: metrics file missing
    """
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise ConfigurationError(f"Metrics file not found: {path}")
    frame = pd.read_json(path, lines=True)
    if "losses" in frame:
        losses = pd.DataFrame(frame.pop("losses").tolist(), index=frame.index).add_prefix("loss_")
        frame = frame.join(losses)
    return frame


def _plot(frame: pd.DataFrame, columns: List[str], title: str, path: Path, warmup: Optional[int] = None) -> bool:
    series = {c: pd.to_numeric(frame[c], errors="coerce") for c in columns if c in frame}
    series = {c: s for c, s in series.items() if s.notna().any()}
    if not series:
        return False
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, values in series.items():
        ax.plot(frame["epoch"], values, label=name, marker=".")
    if warmup:
        ax.axvline(warmup, color="g", linestyle="--", linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_title(title)
    ax.grid(True)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def _markdown_table(rows: Dict[str, Any]) -> str:
    lines = ["| metric | value |", "| --- | --- |"]
    lines += [f"| {key} | {'null' if value is None else value} |" for key, value in rows.items()]
    return "\n".join(lines)


def write_report(run_dir: Path) -> Dict[str, Path]:
    """Write metrics/selection/loss charts and summary.md into the run directory"""
    run_dir = Path(run_dir)
    frame = load_metrics(run_dir)
    summary_path = run_dir / SUMMARY_FILE
    if summary_path.exists():
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        final = summary.get("final", {})
    else:
        summary = {}
        final = json.loads(frame.iloc[-1].to_json()) if len(frame) else {}
    warmup_rows = frame[frame["phase"] == "warmup"] if "phase" in frame else frame.iloc[0:0]
    warmup = int(warmup_rows["epoch"].max()) if len(warmup_rows) else None

    written: Dict[str, Path] = {}
    charts = {
        "metrics": (["accuracy", "auroc", "fpr95"], "Test accuracy / AUROC / FPR95"),
        "selection": (["clean_precision", "close_precision", "open_precision", "clean_recall"],
                      "Selection precision vs hidden tags"),
        "losses": ([c for c in frame.columns if c.startswith("loss_")], "Mean loss components"),
    }
    for name, (columns, title) in charts.items():
        path = run_dir / f"{name}.png"
        if _plot(frame, columns, title, path, warmup):
            written[name] = path

    scalars = {k: v for k, v in final.items() if not isinstance(v, dict)}
    body = [f"# Run summary: {run_dir.name}", "", f"Epochs: {summary.get('epochs', len(frame))}  ",
            f"Method: {summary.get('method', 'unknown')}", "", "## Final epoch", "", _markdown_table(scalars)]
    if isinstance(final.get("losses"), dict):
        body += ["", "## Final losses", "", _markdown_table(final["losses"])]
    if written:
        body += ["", "## Charts", ""] + [f"![{name}]({path.name})" for name, path in written.items()]
    report_path = run_dir / REPORT_FILE
    report_path.write_text("\n".join(body) + "\n", encoding="utf-8")
    written["summary"] = report_path
    return written


def cmd_report(args: argparse.Namespace) -> int:
    print(f"📊 Building report for {args.run_dir}")
    written = write_report(args.run_dir)
    for name, path in written.items():
        print(f"   ✅ {name}: {path}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.getenv(LOG_LEVEL_ENV, "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DualNoiseError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())

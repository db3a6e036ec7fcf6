"""Command-line runner: train, evaluate, sensitivity-map, cost-report.

Exit codes: 0 success, 2 configuration error, 3 training aborted,
4 I/O or data error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError
from .evaluate import evaluate_sweep, rank_costs
from .linalg import RNG_ALGORITHM, Rng, ShapeError
from .network import Mlp, load_checkpoint, save_checkpoint
from .sensitivity import sensitivity_map
from .trainer import REGIMES, TrainingDiverged, train_act, train_pas

log = logging.getLogger("resilient_mlp")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, cfg: ExperimentConfig, header: list[str], rows: list[list]) -> None:
    """Metadata comment line, header row, data rows; LF line endings."""
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.config_hash} seed={cfg.seed} tool=resilient-mlp {__version__}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if args.out else Path("runs") / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_metadata(path: Path, cfg: ExperimentConfig, extra: dict) -> None:
    split_policy = "predefined train/test files" if cfg.data.format == "idx" else f"seeded {cfg.data.train_fraction:g} train split"
    items = {
        "tool": f"resilient-mlp {__version__}",
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "rng": RNG_ALGORITHM,
        "regime": cfg.regime,
        "topology": ",".join(map(str, cfg.topology)),
        "split": split_policy,
        "normalize": cfg.data.normalize or "none",
        **extra,
    }
    path.write_text("".join(f"{k} = {_cell(v)}\n" for k, v in items.items()), encoding="utf-8")


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train, test = cfg.load_splits()
    net = Mlp.init(cfg.topology, Rng(cfg.seed), hidden=cfg.hidden, output=cfg.output)
    if cfg.regime == "combined":
        net, records = train_act(net, train, cfg.train, test)
        save_checkpoint(net, out / "checkpoint_act.txt", seed=cfg.seed)
        if cfg.train.epochs_pas:
            net, records = train_pas(net, train, cfg.train, test, records=records, start_epoch=len(records))
    else:
        net, records = REGIMES[cfg.regime](net, train, cfg.train, test)
    save_checkpoint(net, out / "checkpoint.txt", seed=cfg.seed)

    header = ["phase", "epoch", "train_loss", "train_accuracy", "test_accuracy", "test_accuracy_noisy", "sensitivity", "gamma"]
    write_csv(out / "epochs.csv", cfg, header, [[r.as_row()[h] for h in header] for r in records])
    last = records[-1] if records else None
    _write_metadata(
        out / "metadata.txt",
        cfg,
        {
            "train_rows": len(train),
            "test_rows": len(test),
            "epochs_run": len(records),
            "final_train_accuracy": last.train_accuracy if last else None,
            "final_test_accuracy": last.test_accuracy if last else None,
            "final_sensitivity": last.sensitivity if last else None,
        },
    )
    log.info("wrote %s", out)
    return EXIT_OK


def _parse_checkpoints(specs: list[str]) -> list[tuple[str, Path]]:
    out = []
    for spec in specs:
        label, sep, path = spec.partition("=")
        if not sep:
            path = spec
            meta = Path(spec).parent / "metadata.txt"
            label = Path(spec).stem
            if label == "checkpoint_act":
                # act-phase snapshot written next to a combined run
                label = "act"
            elif meta.exists():
                for line in meta.read_text(encoding="utf-8").splitlines():
                    key, _, value = line.partition(" = ")
                    if key == "regime":
                        label = value
        out.append((label, Path(path)))
    return out


def _load_net(path: Path, cfg: ExperimentConfig) -> Mlp:
    net = load_checkpoint(path)
    if net.topology != cfg.topology:
        raise ConfigError(
            f"checkpoint {path} has topology {','.join(map(str, net.topology))}, "
            f"config model.topology is {','.join(map(str, cfg.topology))}"
        )
    return net


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("evaluate needs at least one --checkpoint")
    out = _out_dir(args, cfg)
    _, test = cfg.load_splits()
    runs = args.runs if args.runs is not None else cfg.runs
    header = [
        "regime", "hw", "multiplier", "storage", "k", "flip_prob", "runs",
        "mean_accuracy", "std_accuracy", "mean_loss", "std_loss", "baseline_loss", "normalized_error",
    ]
    rows = []
    for label, path in _parse_checkpoints(args.checkpoint):
        net = _load_net(path, cfg)
        for r in evaluate_sweep(net, test, cfg.sweep, runs, cfg.seed, label):
            hw = r.hw
            rows.append([
                label, hw.label, hw.multiplier_label, hw.storage_label,
                hw.multiplier.k if hw.multiplier else None,
                hw.storage.flip_prob if hw.storage else 0.0,
                r.runs, r.mean_accuracy, r.std_accuracy, r.mean_loss, r.std_loss, r.baseline_loss, r.normalized_error,
            ])
    report = Path(args.report) if args.report else out / "report.csv"
    write_csv(report, cfg, header, rows)
    log.info("wrote %s", report)
    return EXIT_OK


def cmd_sensitivity_map(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("sensitivity-map needs at least one --checkpoint")
    out = _out_dir(args, cfg)
    train, _ = cfg.load_splits()
    rows = train.features[: cfg.train.monitor_samples]
    for label, path in _parse_checkpoints(args.checkpoint):
        net = _load_net(path, cfg)
        for l, grid in enumerate(sensitivity_map(net, rows)):
            header = [f"in_{j}" for j in range(grid.shape[1])]
            write_csv(out / f"sensitivity_{label}_layer{l}.csv", cfg, header, grid.tolist())
    log.info("wrote sensitivity maps to %s", out)
    return EXIT_OK


def cmd_cost_report(args) -> int:
    cfg = _config(args)
    if not args.report:
        raise ConfigError("cost-report needs --report")
    out = _out_dir(args, cfg)
    rows = read_csv(Path(args.report))
    try:
        ranked = rank_costs(rows, cfg.costs, cfg.max_degradation, cfg.min_accuracy)
    except (KeyError, ValueError) as err:
        raise ConfigError(f"costs: {err}") from None
    header = ["regime", "hw", "mean_accuracy", "admissible", "relative_cost", "cheapest"]
    body = [[r.regime, r.hw_label, r.mean_accuracy, r.admissible, r.relative_cost, r.cheapest] for r in ranked]
    write_csv(out / "cost_report.csv", cfg, header, body)
    log.info("wrote %s", out / "cost_report.csv")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sensitivity-map": cmd_sensitivity_map,
    "cost-report": cmd_cost_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resilient-mlp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--out", help="output directory (default runs/<name>)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("evaluate", "sensitivity-map"):
            p.add_argument("--checkpoint", action="append", default=[], help="[label=]path; repeatable")
        if name == "evaluate":
            p.add_argument("--runs", type=int, help="Monte-Carlo runs per noisy model")
            p.add_argument("--report", help="report path (default <out>/report.csv)")
        if name == "cost-report":
            p.add_argument("--report", help="report.csv written by evaluate")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, DataError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

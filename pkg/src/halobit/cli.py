"""Experiment front door: config validation, run execution, metrics emission.

`halobit run` executes one experiment and writes metrics.csv plus
summary.json into the output directory. `halobit compare` aligns two or more
summaries into a table. Exit codes: 0 ok, 2 config error, 3 runtime error.

metrics.csv replays byte-identically for identical config + seed; the
wall_ms column is therefore kept at 0 and real timing lives in summary.json.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .codec import QuantConfig, VALID_BITS
from .datasets import DatasetError, SbmSpec, generate_sbm, load_dataset
from .graph import STRATEGIES, GraphConfigError, build_partition, mean_adjacency, \
    normalize_adjacency, partition_nodes
from .trainer import MODELS, ModelConfig, TrainMode, TrainingError, train

SCHEMA_VERSION = 1
CSV_HEADER = ("epoch,mode,train_loss,train_acc,val_acc,test_acc,"
              "main_bytes,meta_bytes,header_bytes,allreduce_bytes,messages,wall_ms")

_PARTITION_ALIASES = {"bfs": "bfs_blocks", "contiguous": "contiguous",
                      "bfs_blocks": "bfs_blocks", "hash": "hash"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    synthetic: str | None = None
    parts: int = 1
    partition: str = "contiguous"
    model: str = "gcn"
    layers: int = 2
    hidden: int = 32
    bits: int = 1
    mode: str = "sync"
    staleness: int = 0
    epochs: int = 100
    lr: float = 0.01
    dropout: float = 0.0
    seed: int = 0
    warmup: int = 10
    degree_with_self_loops: bool = True
    out: str = "run_out"

    def validate(self) -> list:
        """Total validation: every invalid field reported, no partial runs."""
        errs = []
        if (self.dataset is None) == (self.synthetic is None):
            errs.append("exactly one of --dataset / --synthetic is required")
        if self.parts < 1:
            errs.append(f"--parts must be >= 1, got {self.parts}")
        if _PARTITION_ALIASES.get(self.partition) is None:
            errs.append(f"--partition must be one of contiguous|bfs|hash, got {self.partition!r}")
        if self.model not in MODELS:
            errs.append(f"--model must be one of {'|'.join(MODELS)}, got {self.model!r}")
        if self.layers < 1:
            errs.append(f"--layers must be >= 1, got {self.layers}")
        if self.hidden < 1:
            errs.append(f"--hidden must be >= 1, got {self.hidden}")
        if self.bits not in VALID_BITS:
            errs.append(f"--bits must be in 1..8, 16 or 32, got {self.bits}")
        if self.mode not in ("sync", "async"):
            errs.append(f"--mode must be sync|async, got {self.mode!r}")
        if self.staleness < 0:
            errs.append(f"--staleness must be >= 0, got {self.staleness}")
        if self.staleness > 0 and self.mode != "async":
            errs.append("--staleness is only meaningful with --mode async")
        if self.epochs < 0:
            errs.append(f"--epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            errs.append(f"--lr must be positive, got {self.lr}")
        if not (0.0 <= self.dropout < 1.0):
            errs.append(f"--dropout must be in [0, 1), got {self.dropout}")
        if self.warmup < 0:
            errs.append(f"--warmup must be >= 0, got {self.warmup}")
        if self.synthetic is not None:
            try:
                parse_synthetic(self.synthetic, self.seed)
            except (ConfigError, DatasetError) as e:
                errs.append(str(e))
        return errs


def parse_synthetic(spec: str, seed: int) -> SbmSpec:
    """Parse 'sbm:k=4,n=125,pin=0.15,pout=0.01,d=32,noise=1.0'."""
    if ":" in spec:
        kind, _, rest = spec.partition(":")
    else:
        kind, rest = spec, ""
    if kind != "sbm":
        raise ConfigError(f"unknown synthetic family {kind!r} (only 'sbm')")
    kwargs = {"seed": seed}
    keymap = {"k": ("communities", int), "n": ("nodes_per_community", int),
              "pin": ("p_in", float), "p_in": ("p_in", float),
              "pout": ("p_out", float), "p_out": ("p_out", float),
              "d": ("feature_dim", int), "noise": ("feature_noise", float),
              "seed": ("seed", int)}
    for item in filter(None, rest.split(",")):
        key, _, value = item.partition("=")
        if key not in keymap:
            raise ConfigError(f"unknown synthetic key {key!r}")
        name, cast = keymap[key]
        try:
            kwargs[name] = cast(value)
        except ValueError:
            raise ConfigError(f"bad value for synthetic key {key!r}: {value!r}") from None
    return SbmSpec(**kwargs)


def _build_graph(cfg: ExperimentConfig):
    if cfg.dataset is not None:
        return load_dataset(cfg.dataset)
    return generate_sbm(parse_synthetic(cfg.synthetic, cfg.seed))


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute one experiment; writes metrics.csv and summary.json to cfg.out."""
    errs = cfg.validate()
    if errs:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errs))

    t0 = time.perf_counter()
    graph = _build_graph(cfg)
    if cfg.parts > graph.num_nodes:
        raise ConfigError(f"--parts {cfg.parts} exceeds node count {graph.num_nodes}")
    a_hat = normalize_adjacency(graph, cfg.degree_with_self_loops)
    mean_hat = mean_adjacency(graph) if cfg.model == "sage" else None
    plan = partition_nodes(graph, cfg.parts, _PARTITION_ALIASES[cfg.partition], cfg.seed)
    partitions = [build_partition(graph, a_hat, plan, n, mean_hat)
                  for n in range(cfg.parts)]

    widths = (graph.feature_dim,) + (cfg.hidden,) * (cfg.layers - 1) + (graph.num_classes,)
    model_cfg = ModelConfig(widths=widths, model=cfg.model, dropout=cfg.dropout)
    mode = TrainMode(variant=cfg.mode, staleness=cfg.staleness)
    result = train(graph, partitions, model_cfg, mode, QuantConfig(cfg.bits),
                   cfg.epochs, cfg.seed, lr=cfg.lr)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics_csv(out / "metrics.csv", result.metrics)
    summary = _summarize(cfg, result, (time.perf_counter() - t0) * 1000.0)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _write_metrics_csv(path: Path, metrics: list):
    lines = [CSV_HEADER]
    for r in metrics:
        lines.append(",".join([
            str(r.epoch), r.mode_this_epoch, repr(r.train_loss),
            repr(r.train_acc), repr(r.val_acc), repr(r.test_acc),
            str(r.main_bytes), str(r.meta_bytes), str(r.header_bytes),
            str(r.allreduce_bytes), str(r.messages), str(r.wall_ms)]))
    path.write_text("\n".join(lines) + "\n")


def _summarize(cfg: ExperimentConfig, result, wall_ms: float) -> dict:
    metrics = result.metrics
    totals = {"main_bytes": sum(r.main_bytes for r in metrics),
              "meta_bytes": sum(r.meta_bytes for r in metrics),
              "header_bytes": sum(r.header_bytes for r in metrics),
              "allreduce_bytes": sum(r.allreduce_bytes for r in metrics),
              "messages": sum(r.messages for r in metrics)}
    summary = {
        "schema_version": SCHEMA_VERSION,
        "halobit_version": __version__,
        "config": asdict(cfg),
        "epochs_run": len(metrics),
        "totals": totals,
        "total_wall_ms": round(wall_ms, 3),
    }
    if metrics:
        best = max(metrics, key=lambda r: (r.val_acc, -r.epoch))
        post = [r for r in metrics if r.epoch > cfg.warmup] or metrics
        summary.update({
            "final_train_loss": metrics[-1].train_loss,
            "final_test_acc": metrics[-1].test_acc,
            "best_val_epoch": best.epoch,
            "best_val_acc": best.val_acc,
            "test_acc_at_best_val": best.test_acc,
            "avg_main_bytes_per_epoch_post_warmup":
                sum(r.main_bytes for r in post) / len(post),
        })
    return summary


def compare_runs(paths: list, csv: bool = False, file=None) -> list:
    """Align >= 2 summary.json files into a table on stdout."""
    file = file or sys.stdout
    if len(paths) < 2:
        raise ConfigError("compare needs at least two summary.json paths")
    rows = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            path = path / "summary.json"
        data = json.loads(path.read_text())
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema version {data.get('schema_version')} "
                              f"!= {SCHEMA_VERSION}")
        rows.append({
            "run": str(p),
            "test_acc_at_best_val": data.get("test_acc_at_best_val", 0.0),
            "final_test_acc": data.get("final_test_acc", 0.0),
            "best_val_epoch": data.get("best_val_epoch", 0),
            "main_bytes": data["totals"]["main_bytes"],
            "meta_bytes": data["totals"]["meta_bytes"],
        })
    cols = ["run", "test_acc_at_best_val", "final_test_acc", "best_val_epoch",
            "main_bytes", "meta_bytes"]
    if csv:
        print(",".join(cols), file=file)
        for r in rows:
            print(",".join(str(r[c]) for c in cols), file=file)
    else:
        widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
        print("  ".join(c.ljust(widths[c]) for c in cols), file=file)
        for r in rows:
            print("  ".join(str(r[c]).ljust(widths[c]) for c in cols), file=file)
    return rows


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="halobit",
                                     description="Distributed GNN training simulator "
                                                 "with low-bit halo communication")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--dataset", help="dataset directory")
    src.add_argument("--synthetic", help="synthetic spec, e.g. sbm:k=4,n=125")
    run.add_argument("--parts", type=int, default=1)
    run.add_argument("--partition", default="contiguous",
                     choices=sorted(set(_PARTITION_ALIASES)))
    run.add_argument("--model", default="gcn", choices=MODELS)
    run.add_argument("--layers", type=int, default=2)
    run.add_argument("--hidden", type=int, default=32)
    run.add_argument("--bits", type=int, default=1)
    run.add_argument("--mode", default="sync", choices=["sync", "async"])
    run.add_argument("--staleness", type=int, default=0)
    run.add_argument("--epochs", type=int, default=100)
    run.add_argument("--lr", type=float, default=0.01)
    run.add_argument("--dropout", type=float, default=0.0)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--warmup", type=int, default=10)
    run.add_argument("--degree-with-self-loops", action=argparse.BooleanOptionalAction,
                     default=True)
    run.add_argument("--out", default="run_out")

    cmp_ = sub.add_parser("compare", help="compare summary.json files")
    cmp_.add_argument("paths", nargs="+")
    cmp_.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = ExperimentConfig(
                dataset=args.dataset, synthetic=args.synthetic, parts=args.parts,
                partition=args.partition, model=args.model, layers=args.layers,
                hidden=args.hidden, bits=args.bits, mode=args.mode,
                staleness=args.staleness, epochs=args.epochs, lr=args.lr,
                dropout=args.dropout, seed=args.seed, warmup=args.warmup,
                degree_with_self_loops=args.degree_with_self_loops, out=args.out)
            summary = run_experiment(cfg)
            print(json.dumps({k: summary[k] for k in
                              ("epochs_run", "totals") if k in summary}))
        else:
            compare_runs(args.paths, csv=args.csv)
        return 0
    except (ConfigError, DatasetError, GraphConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

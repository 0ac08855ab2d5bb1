"""Command-line front-end: synth / train / evaluate / explain.

Configuration is layered: built-in defaults (optionally a named dataset
preset), then a TOML config file, then explicit CLI flags. Every resolved
value is written back into the run manifest, so re-running with only
`--config manifest.toml` reproduces the run bit-for-bit.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tomllib
from pathlib import Path

import numpy as np

from kgrec import attention
from kgrec.embedding import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from kgrec.evaluation import evaluate
from kgrec.kg import KGLoadError, load_interactions, load_kg
from kgrec.propagation import Propagator
from kgrec.synthetic import SyntheticSpec, generate, write_dataset
from kgrec.training import NumericError, TrainConfig, build_layout_for, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

PRESETS = {
    "amazon-book": dict(learning_rate=1e-4, l2=1e-5, tau=0.25, d_max=32, d_min=4, c=5000),
    "last-fm": dict(learning_rate=1e-4, l2=1e-5, tau=0.5, d_max=64, d_min=16, c=5000),
    "alibaba-ifashion": dict(learning_rate=1e-4, l2=1e-5, tau=0.1, d_max=64, d_min=4, c=5000),
}

DATA_KEYS = ("kg", "train", "test", "entities", "relations", "items")
TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]


class UsageError(ValueError):
    pass


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_manifest(path, data: dict, train_cfg: dict) -> None:
    lines = ["[data]"]
    for k in DATA_KEYS:
        if data.get(k) is not None:
            lines.append(f"{k} = {_toml_value(data[k])}")
    lines.append("")
    lines.append("[train]")
    for k in TRAIN_KEYS:
        lines.append(f"{k} = {_toml_value(train_cfg[k])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def resolve_config(args) -> tuple[dict, TrainConfig]:
    """Merge defaults <- preset <- config file <- CLI flags."""
    file_cfg = read_config(args.config) if getattr(args, "config", None) else {}
    data = dict(file_cfg.get("data", {}))
    for k in DATA_KEYS:
        v = getattr(args, k if k not in ("train", "test") else f"{k}_file", None)
        if v is not None:
            data[k] = v
    if getattr(args, "data", None):
        d = Path(args.data)
        meta = json.loads((d / "meta.json").read_text())
        data.setdefault("kg", str(d / "kg_final.txt"))
        data.setdefault("train", str(d / "train.txt"))
        data.setdefault("test", str(d / "test.txt"))
        data.setdefault("entities", meta["n_entities"])
        data.setdefault("relations", meta["n_canonical_relations"])
        data.setdefault("items", meta["n_items"])

    merged = {}
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}")
        merged.update(PRESETS[preset])
    merged.update(file_cfg.get("train", {}))
    for k in TRAIN_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    cfg = TrainConfig(**{k: v for k, v in merged.items() if k in TRAIN_KEYS})
    return data, cfg


def load_data(data: dict):
    missing = [k for k in DATA_KEYS if data.get(k) is None]
    if missing:
        raise UsageError(f"missing data settings: {', '.join(missing)}")
    graph = load_kg(data["kg"], int(data["entities"]), int(data["relations"]))
    inter = load_interactions(data["train"], data["test"], int(data["items"]))
    if inter.n_items > graph.n_entities:
        raise KGLoadError(
            f"item count {inter.n_items} exceeds entity count {graph.n_entities}"
        )
    return graph, inter


class OutputDir:
    """Run output directory with a crude single-writer lockfile."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = self.path / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise UsageError(
                f"output directory {self.path} is locked by another run "
                f"(remove {self.lock} if stale)"
            )
        return self.path

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config / manifest file")
    p.add_argument("--data", help="dataset directory with meta.json")
    p.add_argument("--kg", help="kg_final.txt path")
    p.add_argument("--train-file", dest="train_file", help="train.txt path")
    p.add_argument("--test-file", dest="test_file", help="test.txt path")
    p.add_argument("--entities", type=int, help="entity count")
    p.add_argument("--relations", type=int, help="canonical relation count")
    p.add_argument("--items", type=int, help="item count")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="named hyperparameter set")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--layers", dest="n_layers", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--node-dropout", dest="node_dropout", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--ablation",
        choices=["mean", "sum", "noatt"],
        help="mean/sum: elementwise combination, gate off; noatt: concat, gate off",
    )
    p.add_argument("--d-min", dest="d_min", type=int)
    p.add_argument("--d-max", dest="d_max", type=int)
    p.add_argument("--c", type=int)


def _apply_ablation(args) -> None:
    if getattr(args, "ablation", None) is None:
        return
    if args.ablation == "noatt":
        args.combine, args.attention = "concat", False
    else:
        args.combine, args.attention = args.ablation, False


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_users=args.users,
        n_items=args.items_count,
        n_relations=args.relations_count,
        entities_per_relation=args.entities_per_relation,
        preference_sparsity=args.sparsity,
        interactions_per_user=args.interactions,
        seed=args.seed if args.seed is not None else 0,
        second_hop=args.second_hop,
    )
    world = generate(spec)
    paths = write_dataset(world, args.out)
    print(f"wrote synthetic dataset to {args.out}")
    for k, p in paths.items():
        print(f"  {k}: {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    _apply_ablation(args)
    data, cfg = resolve_config(args)
    graph, inter = load_data(data)
    with OutputDir(args.out) as out:
        write_manifest(out / "manifest.toml", data, dataclasses.asdict(cfg))
        epochs_path = out / "epochs.tsv"
        with open(epochs_path, "w", encoding="utf-8") as fh:
            fh.write("epoch\tloss\trecall\tndcg\tseconds\n")

            def on_epoch(stats):
                fh.write(
                    f"{stats.epoch}\t{stats.loss:.10g}\t{stats.recall:.10g}"
                    f"\t{stats.ndcg:.10g}\t{stats.seconds:.3f}\n"
                )
                fh.flush()
                print(
                    f"epoch {stats.epoch}: loss {stats.loss:.6f} "
                    f"recall@{cfg.eval_k} {stats.recall:.4f} "
                    f"ndcg@{cfg.eval_k} {stats.ndcg:.4f} ({stats.seconds:.2f}s)"
                )

            result = train(cfg, graph, inter, on_epoch=on_epoch)
        save_checkpoint(out / "checkpoint.bin", result.params)
        best = result.history[result.best_epoch]
        with open(out / "metrics.tsv", "w", encoding="utf-8") as fh:
            fh.write("metric\tk\tvalue\tusers\n")
            fh.write(f"recall\t{cfg.eval_k}\t{best.recall:.10g}\t{len(inter.test_users())}\n")
            fh.write(f"ndcg\t{cfg.eval_k}\t{best.ndcg:.10g}\t{len(inter.test_users())}\n")
        print(
            f"best epoch {result.best_epoch}: recall@{cfg.eval_k} {best.recall:.4f} "
            f"ndcg@{cfg.eval_k} {best.ndcg:.4f}"
        )
    return EXIT_OK


def _load_model(args, data, cfg):
    graph, inter = load_data(data)
    params = load_checkpoint(args.checkpoint)
    expected = build_layout_for(cfg, graph)
    if not np.array_equal(params.layout.dims, expected.dims):
        raise CheckpointError(
            "checkpoint layout does not match the dataset/config:\n"
            f"  checkpoint dims: {params.layout.dims.tolist()}\n"
            f"  expected dims:   {expected.dims.tolist()}"
        )
    return graph, inter, params


def cmd_evaluate(args) -> int:
    _apply_ablation(args)
    data, cfg = resolve_config(args)
    graph, inter, params = _load_model(args, data, cfg)
    k = args.k if args.k is not None else cfg.eval_k
    prop = Propagator(graph, params.layout, cfg.n_layers, cfg.combine)
    result = evaluate(params, prop, inter, cfg, k=k)
    lines = [
        "metric\tk\tvalue\tusers",
        f"recall\t{k}\t{result.recall:.10g}\t{result.n_users}",
        f"ndcg\t{k}\t{result.ndcg:.10g}\t{result.n_users}",
    ]
    report = "\n".join(lines) + "\n"
    print(report, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.tsv").write_text(report, encoding="utf-8")
    return EXIT_OK


def _relation_names(path, n_relations: int) -> list[str]:
    names = [f"r{m}" for m in range(n_relations)]
    if path:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rid, name = line.split("\t", 1)
            rid = int(rid)
            if 0 <= rid < n_relations:
                names[rid] = name.strip()
    return names


def cmd_explain(args) -> int:
    _apply_ablation(args)
    data, cfg = resolve_config(args)
    if not cfg.attention:
        raise UsageError("explain requires an attention-mode model")
    graph, inter, params = _load_model(args, data, cfg)
    prop = Propagator(graph, params.layout, cfg.n_layers, cfg.combine)
    e_star = prop.entity_reps(params)
    item_reps = e_star[: inter.n_items]
    means = attention.item_block_means(item_reps)
    names = _relation_names(args.names, graph.n_relations)
    records = []
    status = EXIT_OK
    for u in args.users:
        if not (0 <= u < inter.n_users):
            print(f"error: unknown user id {u}", file=sys.stderr)
            continue
        items = inter.train[u]
        cold = len(items) == 0
        if cold:
            h = np.zeros(params.user.shape[1])
        else:
            h = item_reps[items].mean(axis=0)
        profile = attention.interest_profile(
            params.user[u], h, means, params.layout, cfg.tau
        )
        scored = sorted(
            (
                {"relation": m, "name": names[m], "score": round(float(s), 4)}
                for m, s in enumerate(profile.scores)
            ),
            key=lambda r: (-r["score"], r["relation"]),
        )
        records.append({"user": int(u), "cold": cold, "scores": scored})
        head = ", ".join(f"{r['name']}={r['score']:.4f}" for r in scored[:5])
        print(f"user {u}{' (cold)' if cold else ''}: {head}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "explain.jsonl", "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgrec", description="knowledge-graph recommender harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-preference dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", dest="items_count", type=int, default=300)
    p.add_argument("--relations", dest="relations_count", type=int, default=8)
    p.add_argument("--entities-per-relation", type=int, default=10)
    p.add_argument("--sparsity", type=float, default=0.125)
    p.add_argument("--interactions", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--second-hop", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="dump per-user interest scores")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--names", help="relation_id<TAB>name file")
    p.add_argument("--out")
    p.add_argument("users", nargs="+", type=int)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KGLoadError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

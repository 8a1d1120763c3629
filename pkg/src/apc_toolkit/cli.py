"""Command-line entry point: ``apc-toolkit <subcommand> [options]``.

All subcommands share one workspace directory (``--out``); earlier stages are
built on demand and cached, so ``apc-toolkit eval`` on a fresh directory runs
the whole pipeline.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .apc import apc_purify
from .config import ConfigError, dump_config, load_config
from .datasets import load_pairs, read_cloud, write_cloud
from .defenses import apply_defense
from .evaluation import (APCDefense, BaselineDefense, EvalReport, IdentityDefense, eval_cross_model, eval_defense,
                         in_out_attack_study, measure_efficiency, run_ablation)
from .experiment import Workspace
from .report import find_triptychs, render_report, table_markdown
from .victims import predict

log = logging.getLogger("apc_toolkit")

ABLATIONS = ("hybrid_count", "loss_terms", "distance_metric", "clean_inclusion", "in_out")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _workspace(args) -> Workspace:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    ws = Workspace(args.out, cfg)
    ws.root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, ws.root / "config.resolved.yaml")
    return ws


def _defenses(ws: Workspace, victim_name: str, names) -> list:
    out = []
    for name in names:
        if name == "none":
            out.append(IdentityDefense())
        elif name in ("srs", "sor"):
            out.append(BaselineDefense(replace(ws.config.defenses, name=name)))
        elif name == "apc":
            model, _ = ws.apc(victim_name)
            out.append(APCDefense(model))
        else:
            raise ValueError(f"unknown defense {name!r}")
    return out


def _report_to_json(r: EvalReport) -> dict:
    return asdict(r)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_datagen(args, ws):
    splits = ws.splits()
    for name, split in splits.items():
        print(f"{name}: {len(split)} examples, {split.num_classes} classes -> {ws.root / 'data' / name}")


def cmd_train_victim(args, ws):
    for name in args.victim:
        ws.victim(name)
        tlog = ws.victim_log(name)
        print(f"{name}: test accuracy {100 * tlog.get('test_accuracy', float('nan')):.1f}% "
              f"({tlog.get('cpu_seconds', 0.0):.0f} CPU-s) -> {ws.victim_dir(name)}")


def cmd_attack(args, ws):
    attacks = _csv_list(args.attacks) if args.attacks else None
    for name in args.victim:
        path = ws.store(name, args.split, attacks or (ws.config.eval.attacks if args.split == "test"
                                                        else ws.config.apc.attacks))
        stamp = json.loads((path / "stamp.json").read_text())
        for a, s in sorted(stamp.get("summary", {}).items()):
            print(f"{name}/{args.split}/{a}: {s['count']} pairs, success rate {100 * s['success_rate']:.1f}%")


def cmd_train_apc(args, ws):
    model, tlog = ws.apc(args.victim)
    last = tlog["epochs"][-1] if tlog["epochs"] else tlog["initial"]
    print(f"apc on {args.victim}: {tlog['n_pairs']} pairs {tlog['pair_counts']}, final loss {last['total']:.4f} "
          f"-> {ws.apc_dir(args.victim, ws.config.apc)}")


def _read_any(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    if path.suffix in (".txt", ".xyz", ".csv"):
        return np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, dtype=np.float32).reshape(-1, 3)
    return read_cloud(path)


def cmd_defend(args, ws):
    cloud = _read_any(Path(args.input))
    victim = ws.victim(args.victim)
    if args.defense == "apc":
        model, _ = ws.apc(args.victim)
        out = apc_purify(model, cloud).purified.numpy()
    else:
        out = apply_defense(replace(ws.config.defenses, name=args.defense), cloud).numpy()
    kinds = ws.config.data.kinds
    before, after = predict(victim, cloud), predict(victim, out)
    print(f"{len(cloud)} -> {len(out)} points; {args.victim} predicts {kinds[before]} before, {kinds[after]} after")
    if args.output:
        dst = Path(args.output)
        if dst.suffix == ".npy":
            np.save(dst, out.astype(np.float32))
        else:
            write_cloud(dst, out.astype(np.float32))


def cmd_eval(args, ws):
    victims = args.victim
    defenses = _csv_list(args.defenses) if args.defenses else list(ws.config.eval.defenses)
    reports = []
    for name in victims:
        victim = ws.victim(name)
        store = ws.test_store(name)
        for d in _defenses(ws, name, defenses):
            rep = eval_defense(victim, d, store, list(ws.config.eval.attacks), victim_name=name,
                               metadata={"seed": ws.config.seed, "config_digest": ws.config.digest()})
            reports.append(rep)
            print(f"{name:14s} {d.name:10s} avg {rep.average:5.1f}  clean {rep.clean_accuracy:5.1f}  "
                  + " ".join(f"{a}={v:.1f}" for a, v in rep.per_attack_accuracy.items()))
    _write_json(ws.root / "eval" / "reports.json", [_report_to_json(r) for r in reports])
    if args.efficiency:
        name = victims[0]
        splits = ws.splits()
        clouds = [e.cloud for e in splits["test"].examples[: ws.config.eval.efficiency_samples]]
        rows = measure_efficiency(_defenses(ws, name, defenses), clouds, repeats=ws.config.eval.efficiency_repeats)
        for row in rows:
            print(f"{row['defense']:10s} median {1000 * row['median_seconds']:.2f} ms, {row['params']} params")
        _write_json(ws.root / "eval" / "efficiency.json", rows)


def cmd_transfer(args, ws):
    source = args.source
    apc, _ = ws.apc(source)
    targets = {name: ws.victim(name) for name in args.targets}
    stores = {name: ws.test_store(name) for name in args.targets}
    tm = eval_cross_model(apc, source, targets, stores, list(ws.config.eval.attacks))
    for t in targets:
        print(f"APC[{source}] -> {t}: {tm.entries[t]:.1f} (no defense {tm.baseline[t]:.1f})")
    _write_json(ws.root / "eval" / f"transfer-{source}.json",
                {"source": source, "entries": tm.entries, "baseline": tm.baseline})


def cmd_ablate(args, ws):
    victim = ws.victim(args.victim)
    ws.train_store(args.victim)
    test = ws.test_store(args.victim)
    seeds = tuple(args.seeds) if args.seeds else ws.config.eval.ablation_seeds
    trainer = ws.trainer(args.victim)
    base = ws.config.apc
    tables = {}
    for kind in args.kind:
        if kind == "in_out":
            rows = in_out_attack_study(base, victim, None, test, seeds, trainer)
            rows = [{k: v for k, v in r.items() if k != "report"} for r in rows]
            columns = ["model", "seed", "in_attack", "out_attack", "clean"]
        else:
            table = run_ablation(kind, base, victim, None, test, seeds, trainer)
            rows, columns = table.rows, table.columns
        tables[kind] = table_markdown(columns, rows)
        print(f"## {kind}\n{tables[kind]}")
        _write_json(ws.root / "ablations" / f"{kind}.json", rows)
    (ws.root / "ablations").mkdir(parents=True, exist_ok=True)
    for kind, text in tables.items():
        (ws.root / "ablations" / f"{kind}.md").write_text(text)


def cmd_report(args, ws):
    src = ws.root / "eval" / "reports.json"
    if not src.exists():
        raise FileNotFoundError(f"{src} not found; run 'eval' first")
    reports = [EvalReport(**r) for r in json.loads(src.read_text())]
    triptychs = []
    formats = _csv_list(args.formats)
    if "plots" in formats:
        name = reports[0].victim_name
        victim = ws.victim(name)
        model, _ = ws.apc(name)
        triptychs = find_triptychs(victim, APCDefense(model), load_pairs(ws.test_store(name), victim=name))
    extra = {}
    for path in sorted((ws.root / "ablations").glob("*.md")):
        extra[f"Ablation: {path.stem}"] = path.read_text()
    manifest = render_report(reports, ws.root / "report", formats, triptychs, class_names=list(ws.config.data.kinds),
                             extra_tables=extra)
    for f in manifest["files"]:
        print(ws.root / "report" / f)


COMMANDS = {
    "datagen": cmd_datagen,
    "train-victim": cmd_train_victim,
    "attack": cmd_attack,
    "train-apc": cmd_train_apc,
    "defend": cmd_defend,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults, so a flag
    # given before the subcommand is not reset by the subparser
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="YAML config file (schema_version: 1)")
    p.add_argument("--seed", type=int, default=d(None), help="master seed propagated to every stage")
    p.add_argument("--out", default=d("runs/default"), help="workspace directory (default: runs/default)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_options(suppress=True)
    parser = argparse.ArgumentParser(prog="apc-toolkit", description="Point-cloud purification experiments.",
                                     parents=[_global_options(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)
    victims = ("pointnet_mini", "dgcnn_mini")

    sub.add_parser("datagen", parents=[common], help="generate the synthetic train/test splits")

    p = sub.add_parser("train-victim", parents=[common], help="train victim classifiers")
    p.add_argument("--victim", nargs="+", choices=victims, default=["pointnet_mini"])

    p = sub.add_parser("attack", parents=[common], help="generate adversarial pair stores")
    p.add_argument("--victim", nargs="+", choices=victims, default=["pointnet_mini"])
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--attacks", help="comma-separated attack names (default: from config)")

    p = sub.add_parser("train-apc", parents=[common], help="train the purifier against a frozen victim")
    p.add_argument("--victim", choices=victims, default="pointnet_mini")

    p = sub.add_parser("defend", parents=[common], help="purify one cloud file (.f32, .npy, .txt)")
    p.add_argument("input")
    p.add_argument("--defense", choices=("apc", "sor", "srs", "none"), default="apc")
    p.add_argument("--victim", choices=victims, default="pointnet_mini")
    p.add_argument("--output", help="write the defended cloud here (.f32 or .npy)")

    p = sub.add_parser("eval", parents=[common], help="robustness table on the test pair store")
    p.add_argument("--victim", nargs="+", choices=victims, default=["pointnet_mini"])
    p.add_argument("--defenses", help="comma-separated subset of none,srs,sor,apc")
    p.add_argument("--efficiency", action="store_true", help="also time single-example purification")

    p = sub.add_parser("transfer", parents=[common], help="apply a trained purifier to other victims")
    p.add_argument("--source", choices=victims, default="pointnet_mini")
    p.add_argument("--targets", nargs="+", choices=victims, default=["dgcnn_mini"])

    p = sub.add_parser("ablate", parents=[common], help="ablation studies")
    p.add_argument("--kind", nargs="+", choices=ABLATIONS, default=["loss_terms"])
    p.add_argument("--victim", choices=victims, default="pointnet_mini")
    p.add_argument("--seeds", nargs="+", type=int)

    p = sub.add_parser("report", parents=[common], help="render markdown/CSV tables and plots")
    p.add_argument("--formats", default="markdown,csv,plots")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        ws = _workspace(args)
        COMMANDS[args.command](args, ws)
    except (ConfigError, ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"apc-toolkit {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

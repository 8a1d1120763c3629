"""Train and evaluate one APC variant per override set.

    python3 scripts/sweep_apc.py --out runs/default alpha=1 alpha=100 "alpha=100 local_mode=pooled"

Each positional argument is a space-separated list of ``field=value``
overrides for the ``apc`` config section. Results print as one row per
variant; trained models land in the workspace cache.
"""

import argparse
import logging
from dataclasses import fields, replace

import yaml

from apc_toolkit.config import load_config
from apc_toolkit.evaluation import APCDefense, IdentityDefense, eval_defense
from apc_toolkit.experiment import Workspace


def parse_overrides(text: str) -> dict:
    known = {f.name for f in fields(load_config().apc)}
    out = {}
    for item in text.split():
        key, _, value = item.partition("=")
        if key not in known:
            raise SystemExit(f"unknown APC field {key!r}")
        out[key] = yaml.safe_load(value)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("variants", nargs="*", default=[""])
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--config")
    ap.add_argument("--victim", default="pointnet_mini")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ws = Workspace(args.out, load_config(args.config))
    victim = ws.victim(args.victim)
    store = ws.test_store(args.victim)
    base = eval_defense(victim, IdentityDefense(), store)
    print(f"{'No Defense':40s} avg {base.average:5.1f} clean {base.clean_accuracy:5.1f}")
    for text in args.variants:
        cfg = replace(ws.config.apc, **parse_overrides(text))
        model, tlog = ws.apc(args.victim, cfg)
        rep = eval_defense(victim, APCDefense(model), store)
        per = " ".join(f"{a}={v:.1f}" for a, v in rep.per_attack_accuracy.items())
        print(f"{text or 'defaults':40s} avg {rep.average:5.1f} clean {rep.clean_accuracy:5.1f} "
              f"train {tlog['cpu_seconds']:.0f} CPU-s  {per}")


if __name__ == "__main__":
    main()

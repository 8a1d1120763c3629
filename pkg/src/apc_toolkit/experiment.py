"""On-disk experiment workspace with content-addressed caching.

Layout under ``root``::

    data/{train,test}/            generated splits
    victims/<name>/               victim checkpoints (+ training log)
    pairs/<victim>/{train,test}/  clean/adversarial pair stores
    apc/<victim>-<digest>/        trained purifiers (+ training log)

Every cached artifact carries a ``stamp.json`` with the config that produced
it; a mismatching stamp triggers regeneration instead of silently reusing
stale files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .apc import APCConfig, load_apc, save_apc, train_apc
from .attacks import generate_attack_set
from .config import ExperimentConfig
from .datasets import PairStore, build_dataset, load_split, save_split
from .victims import build_victim, load_checkpoint, param_hash, save_checkpoint, train_victim

log = logging.getLogger(__name__)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()[:16]


def _read_stamp(directory: Path) -> dict | None:
    path = directory / "stamp.json"
    return json.loads(path.read_text()) if path.exists() else None


def _write_stamp(directory: Path, stamp: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "stamp.json").write_text(json.dumps(stamp, indent=2, sort_keys=True, default=list) + "\n")


class Workspace:
    def __init__(self, root, config: ExperimentConfig | None = None):
        self.root = Path(root)
        self.config = config or ExperimentConfig()
        self._splits = None
        self._victims = {}

    # ------------------------------------------------------------------ data

    def _data_stamp(self) -> dict:
        return {"data": asdict(self.config.data)}

    def splits(self):
        if self._splits is not None:
            return self._splits
        d = self.root / "data"
        if _read_stamp(d) == _plain(self._data_stamp()):
            self._splits = {s: load_split(d / s) for s in ("train", "test")}
            return self._splits
        log.info("generating dataset in %s", d)
        t0 = time.process_time()
        splits = build_dataset(self.config.data)
        for name, split in splits.items():
            save_split(split, d / name)
        (d / "gen_log.json").write_text(json.dumps({"cpu_seconds": time.process_time() - t0}) + "\n")
        _write_stamp(d, self._data_stamp())
        self._splits = splits
        return splits

    def data_cpu_seconds(self) -> float:
        self.splits()
        path = self.root / "data" / "gen_log.json"
        return float(json.loads(path.read_text())["cpu_seconds"]) if path.exists() else 0.0

    # --------------------------------------------------------------- victims

    def _victim_stamp(self, name: str) -> dict:
        return {**self._data_stamp(), "victim": name, "train": asdict(self.config.victims[name])}

    def victim_dir(self, name: str) -> Path:
        return self.root / "victims" / name

    def victim(self, name: str):
        if name in self._victims:
            return self._victims[name]
        if name not in self.config.victims:
            raise ValueError(f"unknown victim {name!r}")
        d = self.victim_dir(name)
        if _read_stamp(d) == _plain(self._victim_stamp(name)):
            model = load_checkpoint(d)
        else:
            splits = self.splits()
            tcfg = self.config.victims[name]
            model = build_victim(name, seed=tcfg.seed, num_classes=splits["train"].num_classes)
            model, tlog = train_victim(model, splits["train"], tcfg, splits["test"])
            log.info("%s: test accuracy %.3f in %.1f CPU-s", name, tlog["test_accuracy"], tlog["cpu_seconds"])
            save_checkpoint(model, d)
            (d / "train_log.json").write_text(json.dumps(tlog, indent=2) + "\n")
            _write_stamp(d, self._victim_stamp(name))
        self._victims[name] = model
        return model

    def victim_log(self, name: str) -> dict:
        self.victim(name)
        path = self.victim_dir(name) / "train_log.json"
        return json.loads(path.read_text()) if path.exists() else {}

    # ----------------------------------------------------------------- pairs

    def store_dir(self, victim_name: str, split: str) -> Path:
        return self.root / "pairs" / victim_name / split

    def _train_ids(self) -> list[str] | None:
        frac = self.config.eval.train_attack_fraction
        if frac >= 1.0:
            return None
        ids = sorted(e.example_id for e in self.splits()["train"].examples)
        rng = np.random.default_rng(self.config.seed)
        keep = max(1, int(round(frac * len(ids))))
        return sorted(ids[i] for i in rng.permutation(len(ids))[:keep])

    def store(self, victim_name: str, split: str, attacks) -> Path:
        """Pair store for ``victim_name`` on ``split`` holding at least ``attacks``."""
        d = self.store_dir(victim_name, split)
        stamp = _read_stamp(d) or {}
        base = _plain({**self._victim_stamp(victim_name), "split": split,
                       "fraction": self.config.eval.train_attack_fraction if split == "train" else 1.0})
        if stamp.get("base") != base:
            if d.exists():
                shutil.rmtree(d)
            stamp = {"base": base, "attacks": {}}
        missing = []
        for a in attacks:
            if a not in self.config.attacks:
                raise ValueError(f"unknown attack {a!r}")
            spec = self.config.attacks[a]
            if stamp["attacks"].get(a) != _plain(asdict(spec)):
                missing.append(spec)
        if missing:
            victim = self.victim(victim_name)
            ids = self._train_ids() if split == "train" else None
            for spec in missing:
                t0 = time.process_time()
                summary = generate_attack_set(victim, self.splits()[split], [spec], d, victim_name=victim_name,
                                              seed=self.config.seed, example_ids=ids)
                cpu = time.process_time() - t0
                log.info("attack %s on %s/%s: %.1f CPU-s", spec.name, victim_name, split, cpu)
                stamp["attacks"][spec.name] = _plain(asdict(spec))
                stamp.setdefault("summary", {})[spec.name] = {**summary[spec.name], "cpu_seconds": cpu}
                _write_stamp(d, stamp)
        return d

    def attack_cpu_seconds(self, victim_name: str, split: str, attacks) -> float:
        stamp = _read_stamp(self.store_dir(victim_name, split)) or {}
        return float(sum(stamp.get("summary", {}).get(a, {}).get("cpu_seconds", 0.0) for a in attacks))

    def test_store(self, victim_name: str, attacks=None) -> Path:
        return self.store(victim_name, "test", attacks or self.config.eval.attacks)

    def train_store(self, victim_name: str, attacks=None) -> Path:
        return self.store(victim_name, "train", attacks or self.config.apc.attacks)

    # ------------------------------------------------------------------- apc

    def apc_dir(self, victim_name: str, config: APCConfig) -> Path:
        cfg = _plain(asdict(config))
        # an unset clean fraction means "same as rho"; equal trainings share one cache entry
        if cfg["clean_rho"] is None:
            cfg["clean_rho"] = cfg["rho"]
        if not cfg["include_clean"]:
            cfg["clean_rho"] = None
        store = _read_stamp(self.store_dir(victim_name, "train")) or {}
        used = {a: store.get("attacks", {}).get(a) for a in config.attacks}
        key = _digest({"apc": cfg, "store": store.get("base"), "attacks": used})
        return self.root / "apc" / f"{victim_name}-{key}"

    def apc(self, victim_name: str, config: APCConfig | None = None):
        """Trained purifier (cached by config and training-store digest) and its log."""
        config = config or self.config.apc
        store = self.train_store(victim_name, config.attacks)
        d = self.apc_dir(victim_name, config)
        if (d / "train_log.json").exists():
            return load_apc(d), json.loads((d / "train_log.json").read_text())
        victim = self.victim(victim_name)
        model, tlog = train_apc(victim, store, config)
        save_apc(model, d)
        (d / "train_log.json").write_text(json.dumps(tlog, indent=2) + "\n")
        log.info("apc for %s: %d pairs, %.1f CPU-s", victim_name, tlog["n_pairs"], tlog["cpu_seconds"])
        return model, tlog

    def trainer(self, victim_name: str):
        """``config -> (model, log)`` callable for the ablation studies."""
        epochs = self.config.eval.ablation_epochs

        def train(config: APCConfig):
            if epochs is not None:
                config = replace(config, epochs=epochs)
            return self.apc(victim_name, config)

        return train

    def check_victim(self, name: str, expected_hash: str) -> None:
        if param_hash(self.victim(name)) != expected_hash:
            raise RuntimeError(f"victim {name} changed")


def _plain(obj):
    return json.loads(json.dumps(obj, sort_keys=True, default=list))

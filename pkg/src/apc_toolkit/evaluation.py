"""Robustness tables, cross-model transfer, ablations and efficiency measurements."""

from __future__ import annotations

import itertools
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .apc import APCConfig, APCModel, apc_param_count, apc_purify, train_apc
from .datasets import PairRecord, PairStore
from .defenses import DefenseSpec, apply_defense
from .geometry import as_tensor
from .victims import param_count, param_hash, predict_batch

log = logging.getLogger(__name__)

# column order of the robustness tables
ATTACK_ORDER = ("add", "cluster", "perturb", "knn", "ifgm", "pgd", "drop")
ATTACK_LABELS = {
    "add": "Add",
    "cluster": "Cluster",
    "perturb": "Perturb",
    "knn": "KNN",
    "ifgm": "IFGM",
    "pgd": "PGD",
    "drop": "Drop",
}


# --------------------------------------------------------------------------
# defenses as callables


class IdentityDefense:
    name = "No Defense"
    n_params = 0

    def __call__(self, cloud):
        return as_tensor(cloud)


class BaselineDefense:
    n_params = 0

    def __init__(self, spec: DefenseSpec):
        self.spec = spec
        self.name = spec.name.upper() if spec.name != "none" else "No Defense"

    def __call__(self, cloud):
        return apply_defense(self.spec, cloud)


class APCDefense:
    """SOR + one APC forward pass."""

    def __init__(self, model: APCModel, preprocess: bool = True, name: str = "APC"):
        self.model = model
        self.preprocess = preprocess
        self.name = name

    @property
    def n_params(self) -> int:
        return apc_param_count(self.model)

    def __call__(self, cloud):
        return apc_purify(self.model, cloud, self.preprocess).purified


def _records(source, attack=None, victim=None) -> list[PairRecord]:
    if isinstance(source, (str, Path)):
        return PairStore(source).load(attack=attack, victim=victim)
    out = list(source)
    if attack is not None:
        wanted = {attack} if isinstance(attack, str) else set(attack)
        out = [r for r in out if r.attack_name in wanted]
    if victim is not None:
        out = [r for r in out if r.victim_name == victim]
    return out


def ordered_attacks(names) -> list[str]:
    names = set(names)
    known = [a for a in ATTACK_ORDER if a in names]
    return known + sorted(names - set(known))


# --------------------------------------------------------------------------
# robustness tables


@dataclass
class EvalReport:
    per_attack_accuracy: dict[str, float]
    average: float
    clean_accuracy: float
    defense_name: str
    victim_name: str
    wall_time_per_example: float
    metadata: dict = field(default_factory=dict)


def _accuracy(victim, defense, clouds, labels) -> tuple[float, float]:
    t0 = time.perf_counter()
    defended = [defense(c) for c in clouds]
    elapsed = time.perf_counter() - t0
    preds = predict_batch(victim, defended)
    return 100.0 * float((preds == np.asarray(labels)).mean()), elapsed


def eval_defense(victim, defense, pairs, attack_filter=None, victim_name: str | None = None,
                 metadata: dict | None = None) -> EvalReport:
    """Top-1 accuracy (%) of ``victim`` on defended adversarial clouds, per attack.

    Clean accuracy runs the clean sides of the same records through the same
    defense. Degenerate ``"clean"`` records are never counted as an attack.
    """
    victim_name = victim_name or victim.name
    records = [r for r in _records(pairs, attack=attack_filter, victim=victim_name) if r.attack_name != "clean"]
    if not records:
        raise ValueError("no pairs match the attack filter")
    by_attack: dict[str, list[PairRecord]] = {}
    for r in records:
        by_attack.setdefault(r.attack_name, []).append(r)
    per_attack = {}
    total_time, n_calls = 0.0, 0
    for a in ordered_attacks(by_attack):
        recs = by_attack[a]
        acc, t = _accuracy(victim, defense, [r.adversarial for r in recs], [r.label for r in recs])
        per_attack[a] = acc
        total_time += t
        n_calls += len(recs)
    clean = {}
    for r in records:
        clean.setdefault(r.example_id, r)
    clean_acc, _ = _accuracy(victim, defense, [r.clean for r in clean.values()], [r.label for r in clean.values()])
    return EvalReport(
        per_attack_accuracy=per_attack,
        average=float(np.mean(list(per_attack.values()))),
        clean_accuracy=clean_acc,
        defense_name=defense.name,
        victim_name=victim_name,
        wall_time_per_example=total_time / n_calls,
        metadata=dict(metadata or {}),
    )


# --------------------------------------------------------------------------
# cross-model transfer


@dataclass
class TransferMatrix:
    source: str
    entries: dict[str, float]  # target victim -> average adversarial accuracy
    baseline: dict[str, float] = field(default_factory=dict)  # target -> No Defense average
    reports: dict[str, EvalReport] = field(default_factory=dict)

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {self.source: dict(self.entries)}


def eval_cross_model(apc: APCModel, source_name: str, targets: dict, stores: dict, attack_filter=None) -> TransferMatrix:
    """Frozen APC in front of each target victim on that victim's own adversarial examples."""
    missing = [t for t in targets if t not in stores]
    if missing:
        raise ValueError(f"no pair store for target(s) {missing}")
    apc_before = param_hash(apc)
    victim_before = {name: param_hash(v) for name, v in targets.items()}
    entries, baseline, reports = {}, {}, {}
    defense = APCDefense(apc)
    for name, victim in targets.items():
        rep = eval_defense(victim, defense, stores[name], attack_filter, victim_name=name)
        base = eval_defense(victim, IdentityDefense(), stores[name], attack_filter, victim_name=name)
        entries[name], baseline[name], reports[name] = rep.average, base.average, rep
    if param_hash(apc) != apc_before:
        raise RuntimeError("APC parameters changed during cross-model evaluation")
    for name, victim in targets.items():
        if param_hash(victim) != victim_before[name]:
            raise RuntimeError(f"victim {name} changed during cross-model evaluation")
    return TransferMatrix(source_name, entries, baseline, reports)


# --------------------------------------------------------------------------
# ablations


def default_trainer(victim, train_pairs):
    def train(config: APCConfig) -> tuple[APCModel, dict]:
        return train_apc(victim, train_pairs, config)

    return train


@dataclass
class AblationTable:
    kind: str
    columns: list[str]
    rows: list[dict]


def in_out_accuracy(report: EvalReport, train_attacks) -> tuple[float, float]:
    """Mean accuracy over the training attacks and over every other attack."""
    seen = [v for a, v in report.per_attack_accuracy.items() if a in train_attacks]
    unseen = [v for a, v in report.per_attack_accuracy.items() if a not in train_attacks]
    return (float(np.mean(seen)) if seen else float("nan"), float(np.mean(unseen)) if unseen else float("nan"))


def budget_rho(base_config: APCConfig, n_attacks: int) -> float:
    """Per-attack fraction that keeps the total adversarial pair count of ``base_config``."""
    return min(1.0, round(base_config.rho * len(base_config.attacks) / n_attacks, 12))


def run_ablation(kind: str, base_config: APCConfig, victim, train_pairs, test_pairs, seeds=(0,),
                 trainer=None) -> AblationTable:
    """Train APC variants and report clean / adversarial accuracy averaged over seeds.

    ``trainer(config) -> (model, log)`` may be supplied to share trained models
    between studies; it defaults to :func:`train_apc` on ``train_pairs``.
    """
    trainer = trainer or default_trainer(victim, train_pairs)
    test = list(_records(test_pairs))

    def evaluate(config):
        model, tlog = trainer(config)
        rep = eval_defense(victim, APCDefense(model), test)
        return rep, tlog

    rows = []
    if kind == "hybrid_count":
        attacks = base_config.attacks
        budget = None
        for n in range(1, len(attacks) + 1):
            clean_acc, adv_acc, per_combo = [], [], []
            for combo in itertools.combinations(attacks, n):
                for seed in seeds:
                    # fixed total adversarial pair budget across rows
                    cfg = replace(base_config, attacks=combo, rho=budget_rho(base_config, n),
                                  clean_rho=base_config.clean_rho or base_config.rho, seed=seed)
                    rep, tlog = evaluate(cfg)
                    n_adv = sum(v for k, v in tlog["pair_counts"].items() if k != "clean")
                    if budget is None:
                        budget = n_adv
                    elif abs(n_adv - budget) > len(attacks):
                        raise RuntimeError(f"pair budget drifted: {n_adv} vs {budget}")
                    clean_acc.append(rep.clean_accuracy)
                    adv_acc.append(rep.average)
                    per_combo.append({"attacks": "+".join(combo), "seed": seed, "adv": rep.average,
                                      "n_adv_pairs": n_adv})
            rows.append({"n_attacks": n, "clean": float(np.mean(clean_acc)), "adv": float(np.mean(adv_acc)),
                         "runs": per_combo})
        return AblationTable(kind, ["n_attacks", "clean", "adv"], rows)

    if kind == "loss_terms":
        variants = [(False, False, True), (True, False, True), (False, True, True), (True, True, False),
                    (True, True, True)]
        for geo, sem, clean in variants:
            cfg_base = replace(base_config, alpha=base_config.alpha if geo else 0.0,
                               beta=base_config.beta if sem else 0.0, include_clean=clean)
            rows.append(_seed_row(evaluate, cfg_base, seeds, {"geo": geo, "sem": sem, "clean_data": clean}))
        return AblationTable(kind, ["geo", "sem", "clean_data", "clean", "adv"], rows)

    if kind == "distance_metric":
        for dist in ("hausdorff", "chamfer"):
            rows.append(_seed_row(evaluate, replace(base_config, distance=dist), seeds, {"distance": dist}))
        return AblationTable(kind, ["distance", "clean", "adv"], rows)

    if kind == "clean_inclusion":
        for clean in (False, True):
            rows.append(_seed_row(evaluate, replace(base_config, include_clean=clean), seeds, {"clean_data": clean}))
        return AblationTable(kind, ["clean_data", "clean", "adv"], rows)

    raise ValueError(f"unknown ablation kind {kind!r}")


def _seed_row(evaluate, config, seeds, labels):
    clean_acc, adv_acc = [], []
    for seed in seeds:
        rep, _ = evaluate(replace(config, seed=seed))
        clean_acc.append(rep.clean_accuracy)
        adv_acc.append(rep.average)
    return {**labels, "clean": float(np.mean(clean_acc)), "adv": float(np.mean(adv_acc)),
            "adv_per_seed": adv_acc}


def in_out_attack_study(base_config: APCConfig, victim, train_pairs, test_pairs, seeds=(0,), trainer=None) -> list[dict]:
    """Hybrid APC vs one single-attack APC per training attack, at a fixed pair budget.

    Each row reports in-attack and out-attack mean accuracy for one run.
    """
    trainer = trainer or default_trainer(victim, train_pairs)
    test = list(_records(test_pairs))
    rows = []
    for seed in seeds:
        variants = [("hybrid", base_config.attacks)] + [(f"IAPC-{a}", (a,)) for a in base_config.attacks]
        for label, attacks in variants:
            cfg = replace(base_config, attacks=attacks, seed=seed,
                          rho=budget_rho(base_config, len(attacks)),
                          clean_rho=base_config.clean_rho or base_config.rho)
            model, _ = trainer(cfg)
            rep = eval_defense(victim, APCDefense(model), test)
            in_acc, out_acc = in_out_accuracy(rep, attacks)
            rows.append({"model": label, "seed": seed, "in_attack": in_acc, "out_attack": out_acc,
                         "clean": rep.clean_accuracy, "report": rep})
    return rows


# --------------------------------------------------------------------------
# efficiency


def measure_efficiency(defenses, sample_clouds, repeats: int = 100, warmup: int = 5) -> list[dict]:
    """Median single-example wall time and parameter count for each defense."""
    clouds = [as_tensor(c) for c in sample_clouds]
    if not clouds:
        raise ValueError("need sample clouds")
    rows = []
    with torch.no_grad():
        for d in defenses:
            for i in range(warmup):
                d(clouds[i % len(clouds)])
            times = []
            for i in range(repeats):
                c = clouds[i % len(clouds)]
                t0 = time.perf_counter()
                d(c)
                times.append(time.perf_counter() - t0)
            rows.append({"defense": d.name, "median_seconds": statistics.median(times),
                         "params": int(getattr(d, "n_params", 0))})
    return rows

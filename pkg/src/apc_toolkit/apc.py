"""Adversarial point counterattack: a per-point counter-perturbation purifier.

The encoder builds local kNN features, a max-pooled global code and a fused
per-point embedding; the decoder maps every embedding to a 3-vector that is
added to the input point. Training pairs adversarial clouds with their clean
sources and minimises cross-entropy on a frozen victim plus a geometric
(Chamfer or Hausdorff) and a semantic (feature MSE) consistency term.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import PairRecord, PairStore
from .defenses import SOR_ALPHA, SOR_K, sor
from .geometry import DegenerateInputError, as_tensor, chamfer_one_sided, gather_neighbors, hausdorff_one_sided, knn_indices
from .victims import freeze, mlp, param_count, param_hash, read_state

log = logging.getLogger(__name__)


@dataclass
class APCConfig:
    k: int = 8
    d: int = 32
    local_hidden: tuple[int, ...] = (64,)
    global_hidden: tuple[int, ...] = ()
    fusion_hidden: tuple[int, ...] = ()
    decoder_hidden: tuple[int, ...] = (32, 32)
    local_mode: str = "flatten"  # flatten | pooled
    alpha: float = 100.0
    beta: float = 1.0
    distance: str = "chamfer"  # chamfer | hausdorff
    symmetric_geo: bool = False
    include_clean: bool = True
    preprocess: bool = True
    sor_k: int = SOR_K
    sor_alpha: float = SOR_ALPHA
    attacks: tuple[str, ...] = ("pgd", "knn", "drop")
    rho: float = 0.30
    clean_rho: float | None = None
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.local_hidden = tuple(self.local_hidden)
        self.global_hidden = tuple(self.global_hidden)
        self.fusion_hidden = tuple(self.fusion_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.attacks = tuple(self.attacks)
        if self.k < 1 or self.d < 1:
            raise ValueError("k and d must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.clean_rho is not None and not 0 < self.clean_rho <= 1:
            raise ValueError("clean_rho must lie in (0, 1]")
        if self.local_mode not in ("pooled", "flatten"):
            raise ValueError(f"unknown local_mode {self.local_mode!r}")
        if self.distance not in ("chamfer", "hausdorff"):
            raise ValueError(f"unknown distance {self.distance!r}")

    def architecture(self) -> dict:
        keys = ("k", "d", "local_hidden", "global_hidden", "fusion_hidden", "decoder_hidden", "local_mode")
        return {key: getattr(self, key) for key in keys}


class APCModel(nn.Module):
    name = "apc"

    def __init__(self, config: APCConfig | None = None):
        super().__init__()
        self.config = config = config or APCConfig()
        local_in = 6 if config.local_mode == "pooled" else 6 * config.k
        self.local = mlp([local_in, *config.local_hidden, config.d])
        self.glob = mlp([config.d, *config.global_hidden, config.d])
        self.fusion = mlp([2 * config.d, *config.fusion_hidden, config.d])
        self.decoder = mlp([config.d, *config.decoder_hidden, 3], final_act=False)
        last = self.decoder[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Per-point features ``E`` of shape ``(..., N, d)``."""
        n = x.shape[-2]
        if n <= self.config.k:
            raise ValueError(f"APC needs N > k={self.config.k}, got N={n}")
        nbrs = gather_neighbors(x, knn_indices(x, self.config.k))
        center = x.unsqueeze(-2).expand_as(nbrs)
        if self.config.local_mode == "pooled":
            local = self.local(torch.cat([center, nbrs], dim=-1)).amax(dim=-2)
        else:
            local = self.local(torch.cat([center, nbrs], dim=-1).flatten(-2))
        glob = self.glob(local).amax(dim=-2, keepdim=True)
        return self.fusion(torch.cat([local, glob.expand_as(local)], dim=-1))

    def counter(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encode(x))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """One pass: returns ``(x + C, C)``."""
        c = self.counter(x)
        return x + c, c


def build_apc(config: APCConfig | None = None) -> APCModel:
    config = config or APCConfig()
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        return APCModel(config)


def apc_param_count(model: APCModel) -> int:
    return param_count(model)


def apc_encode(model: APCModel, cloud) -> torch.Tensor:
    x = as_tensor(cloud).to(next(model.parameters()).dtype)
    return model.encode(x)


@dataclass
class PurifyResult:
    purified: torch.Tensor
    counter: torch.Tensor
    pre_sor_count: int
    post_sor_count: int


def preprocess_cloud(cloud, config: APCConfig) -> torch.Tensor:
    x = as_tensor(cloud)
    if config.preprocess:
        x = sor(x, config.sor_k, config.sor_alpha)
    return x


def apc_purify(model: APCModel, cloud, preprocess: bool = True) -> PurifyResult:
    """SOR (optional) followed by a single APC forward pass."""
    x = as_tensor(cloud)
    pre = x.shape[0]
    if preprocess:
        x = sor(x, model.config.sor_k, model.config.sor_alpha)
    if x.shape[0] <= model.config.k:
        raise DegenerateInputError(f"{x.shape[0]} points left after SOR; APC needs more than k={model.config.k}")
    x = x.to(next(model.parameters()).dtype)
    with torch.no_grad():
        purified, c = model(x)
    return PurifyResult(purified, c, pre, x.shape[0])


# --------------------------------------------------------------------------
# losses


def loss_geo(purified, clean, distance: str = "chamfer", symmetric: bool = False) -> torch.Tensor:
    """Mean (chamfer) or max (hausdorff) squared nearest-neighbour distance from purified to clean."""
    fn = chamfer_one_sided if distance == "chamfer" else hausdorff_one_sided
    out = fn(purified, clean, symmetric=symmetric)
    return out.mean() if out.dim() else out


def _feature_mse(feat_p: torch.Tensor, feat_c: torch.Tensor) -> torch.Tensor:
    return ((feat_p - feat_c.detach()) ** 2).mean(dim=-1).mean()


def loss_sem(victim, purified, clean) -> torch.Tensor:
    """MSE between the victim's global features of purified and clean clouds.

    The clean feature is a constant target; gradients reach only ``purified``.
    """
    p = as_tensor(purified)
    c = as_tensor(clean).to(p.dtype)
    single = p.dim() == 2
    feat_p = victim.features(p.unsqueeze(0) if single else p)
    with torch.no_grad():
        feat_c = victim.features(c.unsqueeze(0) if single else c)
    return _feature_mse(feat_p, feat_c)


def loss_total(victim, purified, clean, label, alpha: float = 1.0, beta: float = 1.0,
               distance: str = "chamfer", symmetric: bool = False, clean_feature=None) -> dict:
    """``ce + alpha * geo + beta * sem``; returns every component alongside the total."""
    p = as_tensor(purified)
    c = as_tensor(clean).to(p.dtype)
    single = p.dim() == 2
    pb = p.unsqueeze(0) if single else p
    cb = c.unsqueeze(0) if single else c
    y = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    logits, feat_p = victim(pb)
    ce = F.cross_entropy(logits, y)
    geo = loss_geo(pb, cb, distance, symmetric)
    if clean_feature is None:
        with torch.no_grad():
            clean_feature = victim.features(cb)
    sem = _feature_mse(feat_p, clean_feature.reshape(feat_p.shape))
    total = ce + alpha * geo + beta * sem
    return {"total": total, "ce": ce, "geo": geo, "sem": sem}


# --------------------------------------------------------------------------
# training


def _select(records, fraction, rng):
    records = sorted(records, key=lambda r: r.key)
    count = max(1, int(round(fraction * len(records))))
    idx = np.sort(rng.permutation(len(records))[:count])
    return [records[i] for i in idx]


def select_training_pairs(records, config: APCConfig) -> list[PairRecord]:
    """Per-attack fraction ``rho`` of the pairs plus ``clean_rho`` of clean pairs."""
    by_attack: dict[str, list[PairRecord]] = {}
    for r in records:
        by_attack.setdefault(r.attack_name, []).append(r)
    missing = [a for a in config.attacks if a not in by_attack]
    if missing:
        raise ValueError(f"no training pairs for attack(s) {missing}")
    rng = np.random.default_rng(config.seed)
    chosen = []
    for a in config.attacks:
        chosen += _select(by_attack[a], config.rho, rng)
    if config.include_clean:
        clean = by_attack.get("clean")
        if clean is None:
            # degenerate (x, x) pairs built from the clean side of the attack records
            seen = {}
            for a in config.attacks:
                for r in by_attack[a]:
                    seen.setdefault(r.example_id, PairRecord(r.example_id, "clean", r.victim_name, r.clean, r.clean, r.label))
            clean = list(seen.values())
        frac = config.clean_rho if config.clean_rho is not None else config.rho
        chosen += _select(clean, frac, rng)
    return chosen


def _prepare(victim, pairs, config):
    items = []
    for r in pairs:
        x = preprocess_cloud(r.adversarial, config).float()
        if x.shape[0] <= config.k:
            continue
        items.append((x, torch.as_tensor(r.clean).float(), int(r.label)))
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (x, c, _) in enumerate(items):
        buckets.setdefault((x.shape[0], c.shape[0]), []).append(i)
    feats = {}
    with torch.no_grad():
        for key, idxs in buckets.items():
            c = torch.stack([items[i][1] for i in idxs])
            f = victim.features(c)
            for i, row in zip(idxs, f):
                feats[i] = row
    return items, buckets, feats


def _batches(buckets, batch_size, gen):
    out = []
    for key in sorted(buckets):
        idxs = buckets[key]
        perm = torch.randperm(len(idxs), generator=gen).tolist()
        for s in range(0, len(perm), batch_size):
            out.append([idxs[j] for j in perm[s : s + batch_size]])
    order = torch.randperm(len(out), generator=gen).tolist()
    return [out[i] for i in order]


def _batch_losses(model, victim, items, feats, b, config):
    x = torch.stack([items[i][0] for i in b])
    c = torch.stack([items[i][1] for i in b])
    y = torch.tensor([items[i][2] for i in b])
    f = torch.stack([feats[i] for i in b])
    purified, _ = model(x)
    return loss_total(victim, purified, c, y, config.alpha, config.beta, config.distance, config.symmetric_geo, f)


def _evaluate_loss(model, victim, items, buckets, feats, config):
    sums = {"total": 0.0, "ce": 0.0, "geo": 0.0, "sem": 0.0}
    with torch.no_grad():
        for key in sorted(buckets):
            idxs = buckets[key]
            for s in range(0, len(idxs), 64):
                b = idxs[s : s + 64]
                parts = _batch_losses(model, victim, items, feats, b, config)
                for name in sums:
                    sums[name] += float(parts[name]) * len(b)
    n = sum(len(v) for v in buckets.values())
    return {k: v / n for k, v in sums.items()}


def train_apc(victim, records, config: APCConfig | None = None):
    """Fit an APC on clean/adversarial pairs against a frozen victim.

    ``records`` is a list of :class:`PairRecord` or a pair-store path. Returns
    ``(model, log)``; ``log["epochs"]`` holds per-epoch mean loss components
    and ``log["initial"]`` the same quantities before the first update.
    """
    config = config or APCConfig()
    if isinstance(records, (str, Path)):
        records = PairStore(records).load()
    freeze(victim)
    before = param_hash(victim)
    t0 = time.process_time()
    pairs = select_training_pairs(records, config)
    items, buckets, feats = _prepare(victim, pairs, config)
    model = build_apc(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    initial = _evaluate_loss(model, victim, items, buckets, feats, config)
    model.train()
    for epoch in range(config.epochs):
        sums = {"total": 0.0, "ce": 0.0, "geo": 0.0, "sem": 0.0}
        for b in _batches(buckets, config.batch_size, gen):
            parts = _batch_losses(model, victim, items, feats, b, config)
            opt.zero_grad()
            parts["total"].backward()
            opt.step()
            for name in sums:
                sums[name] += parts[name].item() * len(b)
        history.append({k: v / len(items) for k, v in sums.items()})
        log.debug("apc epoch %d %s", epoch, history[-1])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    if param_hash(victim) != before:
        raise RuntimeError("victim parameters changed during APC training")
    counts: dict[str, int] = {}
    for r in pairs:
        counts[r.attack_name] = counts.get(r.attack_name, 0) + 1
    return model, {
        "initial": initial,
        "epochs": history,
        "pair_counts": counts,
        "n_pairs": len(items),
        "cpu_seconds": time.process_time() - t0,
        "victim_hash": before,
    }


# --------------------------------------------------------------------------
# checkpoints


def save_apc(model: APCModel, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in model.state_dict().items():
        fname = f"{name}.f32"
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        (d / fname).write_bytes(arr.tobytes())
        tensors[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "architecture": "apc",
        "dims": model.config.architecture(),
        "config": asdict(model.config),
        "seed": model.config.seed,
        "version": "1",
        "tensors": tensors,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_apc(directory) -> APCModel:
    manifest, state = read_state(directory)
    if manifest.get("architecture") != "apc":
        raise ValueError(f"{directory} is not an APC checkpoint")
    model = APCModel(APCConfig(**manifest["config"]))
    model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model

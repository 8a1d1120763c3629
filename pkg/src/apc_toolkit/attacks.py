"""White-box untargeted attacks: shifting (PGD, IFGM, Perturb, KNN), adding, dropping.

Every attack has a batched core ``_name(model, x, y, spec, seed)`` that takes
``(B, N, 3)`` clouds and returns a ``(B, N', 3)`` tensor, and a per-example
wrapper ``attack_name(model, example, spec)`` returning an :class:`AttackResult`.
Because the victims have no batch coupling, batching never changes per-example
gradients.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import PairRecord, PairStore
from .geometry import gather_neighbors, knn_indices

log = logging.getLogger(__name__)


@dataclass
class AttackSpec:
    name: str
    epsilon: float = 0.0
    steps: int = 1
    step_size: float = 0.01
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: bool
    iterations_used: int


def default_specs() -> dict[str, AttackSpec]:
    """Budgets tuned so the toy victims collapse without a defense."""
    return {
        "pgd": AttackSpec("pgd", epsilon=0.1, steps=50, step_size=0.01),
        "ifgm": AttackSpec("ifgm", epsilon=0.8, steps=50, step_size=0.05),
        "perturb": AttackSpec("perturb", steps=100, step_size=0.01, extras={"lambda": 1.0}),
        "knn": AttackSpec("knn", steps=100, step_size=0.01, extras={"lambda": 1.0, "gamma": 5.0, "k_c": 5}),
        "drop": AttackSpec("drop", extras={"drop_count": 50, "rounds": 5}),
        "add": AttackSpec("add", steps=100, step_size=0.01, extras={"add_count": 32, "lambda": 1.0, "mode": "points"}),
        "cluster": AttackSpec(
            "cluster",
            steps=100,
            step_size=0.01,
            extras={"add_count": 32, "clusters": 4, "lambda": 1.0, "mode": "clusters", "compactness": 1.0},
        ),
    }


def _logits(model, x):
    out = model(x)
    return out[0] if isinstance(out, tuple) else out


def _ce_grad(model, x, y):
    x = x.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(_logits(model, x), y, reduction="sum")
    (g,) = torch.autograd.grad(loss, x)
    return g


def margin_loss(logits: torch.Tensor, y: torch.Tensor, kappa: float = 0.0) -> torch.Tensor:
    """Per-example ``max(z_true - max_{j != true} z_j, -kappa)``."""
    true = logits.gather(1, y[:, None])[:, 0]
    other = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf")).max(dim=1).values
    return torch.clamp(true - other, min=-kappa)


def knn_compactness(x: torch.Tensor, k: int) -> torch.Tensor:
    """Per-example mean over points of the mean squared distance to ``k`` nearest neighbours.

    Neighbours are chosen from the current coordinates; distances stay differentiable.
    """
    nbrs = gather_neighbors(x, knn_indices(x, k))
    d2 = ((nbrs - x.unsqueeze(2)) ** 2).sum(-1)
    return d2.mean(dim=(1, 2))


# --------------------------------------------------------------------------
# shifting attacks


def _pgd(model, x, y, spec, seed=0):
    eps = spec.epsilon
    x0 = x.detach()
    adv = x0.clone()
    if eps == 0:
        return adv
    for _ in range(spec.steps):
        g = _ce_grad(model, adv, y)
        adv = adv + spec.step_size * g.sign()
        adv = x0 + (adv - x0).clamp(-eps, eps)
    return adv.detach()


def _ifgm(model, x, y, spec, seed=0):
    eps = spec.epsilon
    x0 = x.detach()
    adv = x0.clone()
    if eps == 0:
        return adv
    for _ in range(spec.steps):
        g = _ce_grad(model, adv, y)
        norm = g.flatten(1).norm(dim=1)
        step = torch.where(norm[:, None, None] > 0, g / norm.clamp_min(1e-30)[:, None, None], torch.zeros_like(g))
        adv = adv + spec.step_size * step
        delta = adv - x0
        dn = delta.flatten(1).norm(dim=1)
        # rescale onto the ball; the tiny shrink keeps float32 rounding inside it
        scale = torch.where(dn > eps, eps * (1 - 1e-7) / dn.clamp_min(1e-30), torch.ones_like(dn))
        adv = x0 + delta * scale[:, None, None]
    return adv.detach()


def _cw_loop(model, x, y, spec, extra_penalty=None, trainable_mask=None, init=None):
    """Adam on ``margin + lambda * |delta|^2 (+ extra)``; keeps the smallest successful delta.

    ``trainable_mask`` (``(N,)`` bool) restricts which points move.
    """
    lam = float(spec.extras.get("lambda", 1.0))
    kappa = float(spec.extras.get("kappa", 0.0))
    base = (x if init is None else init).detach()
    delta = torch.zeros_like(base, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=spec.step_size)
    mask = None if trainable_mask is None else trainable_mask[None, :, None].to(base.dtype)
    best = base.clone()
    best_norm = torch.full((len(x),), float("inf"), dtype=base.dtype)
    found = torch.zeros(len(x), dtype=torch.bool)
    for _ in range(spec.steps):
        d = delta if mask is None else delta * mask
        adv = base + d
        logits = _logits(model, adv)
        norm2 = (d**2).flatten(1).sum(1)
        loss = margin_loss(logits, y, kappa) + lam * norm2
        if extra_penalty is not None:
            loss = loss + extra_penalty(adv)
        with torch.no_grad():
            success = logits.argmax(1) != y
            better = success & (norm2 < best_norm)
            best[better] = adv[better].detach()
            best_norm[better] = norm2[better]
            found |= success
        opt.zero_grad()
        loss.sum().backward()
        opt.step()
    with torch.no_grad():
        d = delta if mask is None else delta * mask
        final = (base + d).detach()
        logits = _logits(model, final)
        norm2 = (d**2).flatten(1).sum(1)
        success = logits.argmax(1) != y
        better = success & (norm2 < best_norm)
        best[better] = final[better]
        found |= success
        return torch.where(found[:, None, None], best, final)


def _perturb(model, x, y, spec, seed=0):
    return _cw_loop(model, x, y, spec)


def _knn(model, x, y, spec, seed=0):
    gamma = float(spec.extras.get("gamma", 5.0))
    k_c = int(spec.extras.get("k_c", 5))
    if gamma == 0:
        return _cw_loop(model, x, y, spec)
    return _cw_loop(model, x, y, spec, extra_penalty=lambda adv: gamma * knn_compactness(adv, k_c))


# --------------------------------------------------------------------------
# point dropping / adding


def drop_saliency(grad: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """``-<dL/dx_i, x_i - centroid>``: large when pulling a point inward raises the loss."""
    center = x.mean(dim=1, keepdim=True)
    return -(grad * (x - center)).sum(-1)


def _drop(model, x, y, spec, seed=0):
    m = int(spec.extras.get("drop_count", 50))
    rounds = int(spec.extras.get("rounds", 5))
    n = x.shape[1]
    if m >= n:
        raise ValueError(f"drop_count must be < N (N={n}), got {m}")
    if m < 0:
        raise ValueError("drop_count must be nonnegative")
    cur = x.detach().clone()
    per_round = [m // rounds + (1 if r < m % rounds else 0) for r in range(rounds)]
    for count in per_round:
        if count == 0:
            continue
        s = drop_saliency(_ce_grad(model, cur, y), cur)
        # drop highest saliency, ties -> lower index dropped first; keep original order
        order = torch.sort(-s, dim=1, stable=True).indices
        keep = torch.sort(order[:, count:], dim=1).values
        cur = torch.gather(cur, 1, keep[..., None].expand(-1, -1, 3))
    return cur


def _row_rngs(seed, b):
    """One generator per batch row; an int seed feeds a single shared stream."""
    if isinstance(seed, (list, tuple, np.ndarray)):
        if len(seed) != b:
            raise ValueError(f"expected {b} seeds, got {len(seed)}")
        return [np.random.default_rng(int(s)) for s in seed]
    rng = np.random.default_rng(seed)
    return [rng] * b


def _add_init(x, spec, seed):
    m = int(spec.extras.get("add_count", 32))
    if m < 1:
        raise ValueError(f"add_count must be >= 1, got {m}")
    mode = spec.extras.get("mode", "points")
    b, n, _ = x.shape
    rngs = _row_rngs(seed, b)
    xn = x.detach().to(torch.float64).numpy()
    new = np.empty((b, m, 3))
    if mode == "points":
        jitter = float(spec.extras.get("init_jitter", 0.01))
        for i, rng in enumerate(rngs):
            idx = rng.choice(n, size=m, replace=m > n)
            new[i] = xn[i, idx] + rng.normal(scale=jitter, size=(m, 3))
        groups = None
    elif mode == "clusters":
        mu = int(spec.extras.get("clusters", 4))
        if m % mu:
            raise ValueError(f"add_count={m} is not divisible by clusters={mu}")
        nu = m // mu
        radius = float(spec.extras.get("cluster_radius", 0.05))
        for i, rng in enumerate(rngs):
            centers = rng.choice(n, size=mu, replace=mu > n)
            v = rng.normal(size=(m, 3))
            v /= np.linalg.norm(v, axis=-1, keepdims=True)
            # uniform in a ball of the cluster radius
            new[i] = xn[i, np.repeat(centers, nu)] + v * radius * rng.random((m, 1)) ** (1 / 3)
        groups = np.repeat(np.arange(mu), nu)
    else:
        raise ValueError(f"unknown add mode {mode!r}")
    return torch.from_numpy(new).to(x.dtype), groups


def cluster_spread(points: torch.Tensor, groups) -> torch.Tensor:
    """Per-example mean squared distance of added points to their cluster centroid."""
    g = torch.as_tensor(groups)
    total = torch.zeros(points.shape[0], dtype=points.dtype)
    for c in torch.unique(g):
        pts = points[:, g == c]
        total = total + ((pts - pts.mean(1, keepdim=True)) ** 2).sum(-1).mean(-1)
    return total / len(torch.unique(g))


def _add(model, x, y, spec, seed=0):
    n = x.shape[1]
    new, groups = _add_init(x, spec, seed)
    full = torch.cat([x.detach(), new], dim=1)
    mask = torch.zeros(full.shape[1], dtype=torch.bool)
    mask[n:] = True
    penalty = None
    if groups is not None:
        w = float(spec.extras.get("compactness", 1.0))
        penalty = lambda adv: w * cluster_spread(adv[:, n:], groups)  # noqa: E731
    out = _cw_loop(model, full, y, spec, extra_penalty=penalty, trainable_mask=mask)
    # originals stay bit-identical even after float arithmetic on the masked delta
    out[:, :n] = x.detach()
    return out


BATCH_ATTACKS = {
    "pgd": _pgd,
    "ifgm": _ifgm,
    "perturb": _perturb,
    "knn": _knn,
    "drop": _drop,
    "add": _add,
    "cluster": _add,
}


def attack_kind(spec: AttackSpec) -> str:
    return spec.extras.get("kind", spec.name)


def run_attack_batch(model, x, y, spec: AttackSpec, seed: int = 0) -> torch.Tensor:
    kind = attack_kind(spec)
    if kind not in BATCH_ATTACKS:
        raise ValueError(f"unknown attack {kind!r}")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(dtype)
    y = torch.as_tensor(y, dtype=torch.long)
    return BATCH_ATTACKS[kind](model, x, y, spec, seed)


def _single(model, example, spec, seed=0) -> AttackResult:
    x = torch.as_tensor(np.asarray(example.cloud))[None]
    y = torch.tensor([int(example.label)])
    adv = run_attack_batch(model, x, y, spec, seed)
    with torch.no_grad():
        pred = int(_logits(model, adv).argmax(1)[0])
    iters = spec.extras.get("rounds", 5) if attack_kind(spec) == "drop" else spec.steps
    return AttackResult(adv[0].detach().numpy(), pred != int(example.label), int(iters))


def attack_pgd(model, example, spec: AttackSpec) -> AttackResult:
    """L-inf PGD from the clean cloud: ``x <- clip_eps(x + step * sign(grad))``."""
    return _single(model, example, spec)


def attack_ifgm(model, example, spec: AttackSpec) -> AttackResult:
    """Iterative L2 fast gradient method with projection onto the L2 ball."""
    return _single(model, example, spec)


def attack_perturb_cw(model, example, spec: AttackSpec) -> AttackResult:
    return _single(model, example, spec)


def attack_knn_constrained(model, example, spec: AttackSpec) -> AttackResult:
    return _single(model, example, spec)


def attack_drop(model, example, spec: AttackSpec) -> AttackResult:
    """Saliency-guided point removal over several rounds."""
    return _single(model, example, spec)


def attack_add(model, example, spec: AttackSpec, seed: int = 0) -> AttackResult:
    """Add independent points (``mode='points'``) or compact clusters (``mode='clusters'``)."""
    return _single(model, example, spec, seed)


def example_seed(master: int, example_id: str, attack_name: str) -> int:
    digest = hashlib.sha256(f"{master}|{example_id}|{attack_name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def generate_attack_set(model, split, specs, store_path, victim_name=None, seed: int = 0, batch_size: int = 100,
                        example_ids=None) -> dict:
    """Attack every example with every spec and persist the pairs.

    Examples are batched; randomized attacks (Add/Cluster) draw their
    initialization from a per-example seed so the output does not depend on
    the batch layout. Returns per-attack counts and success rates.
    """
    store = PairStore(store_path)
    victim_name = victim_name or model.name
    examples = split.examples
    if example_ids is not None:
        wanted = set(example_ids)
        examples = [e for e in examples if e.example_id in wanted]
    summary = {}
    for spec in specs:
        successes = 0
        written = 0
        for s in range(0, len(examples), batch_size):
            chunk = examples[s : s + batch_size]
            x = np.stack([e.cloud for e in chunk])
            seeds = [example_seed(seed, e.example_id, spec.name) for e in chunk]
            adv = run_attack_batch(model, x, [e.label for e in chunk], spec, seeds)
            with torch.no_grad():
                preds = _logits(model, adv.to(next(model.parameters()).dtype)).argmax(1).numpy()
            records = []
            for e, a, p in zip(chunk, adv, preds):
                successes += int(p != e.label)
                records.append(
                    PairRecord(e.example_id, spec.name, victim_name, e.cloud,
                               a.detach().to(torch.float32).numpy(), e.label)
                )
            written += store.put(records)
        summary[spec.name] = {"count": written, "success_rate": successes / max(written, 1)}
        log.info("attack %s on %s: %d pairs, success %.3f", spec.name, victim_name, written,
                 summary[spec.name]["success_rate"])
    return summary

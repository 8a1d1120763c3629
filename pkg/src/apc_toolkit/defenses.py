"""Baseline input-level defenses: simple random sampling and statistical outlier removal.

Both only ever remove points; surviving coordinates are returned untouched and
in their original order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import as_tensor, knn_indices, pairwise_sqdist

SOR_K = 2
SOR_ALPHA = 1.1


@dataclass
class DefenseSpec:
    name: str = "none"  # srs | sor | none
    srs_drop_count: int | None = None  # None -> N // 2
    sor_k: int = SOR_K
    sor_alpha: float = SOR_ALPHA
    seed: int = 0

    def __post_init__(self):
        if self.name not in ("srs", "sor", "none"):
            raise ValueError(f"unknown defense {self.name!r}")
        if self.sor_k < 1 or self.sor_alpha <= 0:
            raise ValueError("sor_k and sor_alpha must be positive")


def srs(cloud, m: int, seed: int) -> torch.Tensor:
    """Remove ``m`` uniformly chosen points."""
    x = as_tensor(cloud)
    n = x.shape[0]
    if not 0 <= m < n:
        raise ValueError(f"srs needs 0 <= m < N (N={n}), got m={m}")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=n - m, replace=False))
    return x[torch.from_numpy(keep)]


def sor_mask(cloud, k: int = SOR_K, alpha: float = SOR_ALPHA) -> torch.Tensor:
    """Boolean keep-mask of statistical outlier removal.

    ``d_i`` is the mean Euclidean distance from point ``i`` to its ``k``
    nearest neighbours; points with ``d_i > mean(d) + alpha * std(d)`` are
    dropped. If that would drop everything the mask keeps every point.
    """
    x = as_tensor(cloud)
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"sor needs 1 <= k <= N-1 (N={n}), got k={k}")
    with torch.no_grad():
        idx = knn_indices(x, k)
        d2 = pairwise_sqdist(x, x).gather(1, idx)
        d = d2.sqrt().mean(dim=1)
        mu = d.mean()
        sigma = d.std(unbiased=False)
        # float noise on exactly-equal distances must not count as spread
        if sigma <= 1e-12 * max(float(mu), 1.0):
            sigma = torch.zeros((), dtype=d.dtype)
        keep = d <= mu + alpha * sigma
    if not bool(keep.any()):
        keep = torch.ones(n, dtype=torch.bool)
    return keep


def sor(cloud, k: int = SOR_K, alpha: float = SOR_ALPHA) -> torch.Tensor:
    x = as_tensor(cloud)
    return x[sor_mask(x, k, alpha)]


def apply_defense(spec: DefenseSpec, cloud) -> torch.Tensor:
    x = as_tensor(cloud)
    if spec.name == "none":
        return x
    if spec.name == "srs":
        m = spec.srs_drop_count if spec.srs_drop_count is not None else x.shape[0] // 2
        return srs(x, m, spec.seed)
    return sor(x, spec.sor_k, spec.sor_alpha)

"""Point-set primitives shared by every other module.

Clouds are ``(N, 3)`` arrays (numpy or torch); most functions also accept a
leading batch dimension ``(B, N, 3)``. Distances are computed in float64 and
cast back to the input dtype so oracle comparisons hold at 1e-6.
"""

from __future__ import annotations

import numpy as np
import torch


class DegenerateInputError(ValueError):
    """Raised when a cloud is geometrically degenerate (e.g. all points coincide)."""


def as_tensor(cloud) -> torch.Tensor:
    """Convert array-like to a floating tensor without copying tensors."""
    if isinstance(cloud, torch.Tensor):
        t = cloud
    else:
        t = torch.as_tensor(np.asarray(cloud))
    if not t.is_floating_point():
        t = t.to(torch.float32)
    return t


def _check_cloud(t: torch.Tensor, name: str = "cloud") -> None:
    if t.dim() < 2 or t.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (..., N, 3), got {tuple(t.shape)}")
    if t.shape[-2] < 1:
        raise ValueError(f"{name} is empty")


def pairwise_sqdist(a, b) -> torch.Tensor:
    """Squared Euclidean distances between all rows of ``a`` and ``b`` (float64).

    Differences are formed explicitly rather than via the ``|a|^2 + |b|^2 - 2ab``
    expansion so that exact ties stay exact.
    """
    a = as_tensor(a).to(torch.float64)
    b = as_tensor(b).to(torch.float64)
    diff = a.unsqueeze(-2) - b.unsqueeze(-3)
    return (diff * diff).sum(-1)


def _gram_sqdist(a: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """``|a|^2 + |b|^2 - 2ab`` in float64, no grad; exact for small-integer coordinates."""
    a = a.detach().to(torch.float64)
    b = a if b is None else b.detach().to(torch.float64)
    d = (a * a).sum(-1).unsqueeze(-1) + (b * b).sum(-1).unsqueeze(-2) - 2.0 * (a @ b.transpose(-1, -2))
    return d.clamp_min_(0.0)


def knn_indices(cloud, k: int) -> torch.Tensor:
    """Indices of the ``k`` nearest neighbours of every point, self excluded.

    Ties are broken by ascending point index (stable sort).
    """
    x = as_tensor(cloud)
    _check_cloud(x)
    n = x.shape[-2]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must satisfy 1 <= k <= N-1 (N={n}), got k={k}")
    with torch.no_grad():
        d = _gram_sqdist(x)
        d.diagonal(dim1=-2, dim2=-1).fill_(float("inf"))
        vals, order = torch.topk(d, k + 1, dim=-1, largest=False, sorted=True)
        # topk leaves tie order unspecified; fall back to a stable sort if any tie reaches the cut
        if bool((vals[..., 1:] == vals[..., :-1]).any()):
            order = torch.sort(d, dim=-1, stable=True).indices
    return order[..., :k]


def gather_neighbors(cloud, idx) -> torch.Tensor:
    """Coordinates of neighbours: entry ``[..., i, j, :]`` is ``cloud[..., idx[i, j], :]``."""
    x = as_tensor(cloud)
    idx = torch.as_tensor(idx, dtype=torch.long)
    _check_cloud(x)
    n = x.shape[-2]
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= n):
        raise ValueError("neighbour index out of range")
    if x.dim() == 2:
        return x[idx]
    b, _, k = idx.shape
    flat = idx.reshape(b, -1, 1).expand(-1, -1, 3)
    return torch.gather(x, 1, flat).reshape(b, -1, k, 3)


def _nearest_sqdist(a, b) -> torch.Tensor:
    """Squared distance from each point of ``a`` to its nearest point of ``b``.

    The nearest index is chosen without grad; the distance of the selected
    pair is then recomputed from explicit differences, so gradients flow
    through the chosen pair only and exact coincidences give exactly 0.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    _check_cloud(a, "a")
    _check_cloud(b, "b")
    with torch.no_grad():
        nn_idx = _gram_sqdist(a, b).argmin(dim=-1)
    if b.dim() == 2 and a.dim() == 2:
        nearest = b[nn_idx]
    else:
        b_full = b.expand(*a.shape[:-2], *b.shape[-2:]) if b.dim() < a.dim() else b
        nearest = torch.gather(b_full, -2, nn_idx.unsqueeze(-1).expand(*nn_idx.shape, 3))
    diff = a.to(torch.float64) - nearest.to(torch.float64)
    return (diff * diff).sum(-1)


def chamfer_one_sided(a, b, symmetric: bool = False) -> torch.Tensor:
    """Mean over points of ``a`` of the squared distance to the nearest point of ``b``.

    With ``symmetric=True`` the two directions are summed. Differentiable
    w.r.t. both arguments; the result has the dtype of ``a``.
    """
    a_t = as_tensor(a)
    out = _nearest_sqdist(a_t, b).mean(dim=-1)
    if symmetric:
        out = out + _nearest_sqdist(b, a_t).mean(dim=-1)
    return out.to(a_t.dtype)


def hausdorff_one_sided(a, b, symmetric: bool = False) -> torch.Tensor:
    """Max over points of ``a`` of the squared distance to the nearest point of ``b``."""
    a_t = as_tensor(a)
    out = _nearest_sqdist(a_t, b).max(dim=-1).values
    if symmetric:
        out = torch.maximum(out, _nearest_sqdist(b, a_t).max(dim=-1).values)
    return out.to(a_t.dtype)


def normalize_unit_sphere(cloud: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(cloud)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("expected a nonempty (N, 3) cloud")
    p64 = pts.astype(np.float64)
    centered = p64 - p64.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius <= 0.0:
        raise DegenerateInputError("all points coincide; cannot normalize")
    return (centered / radius).astype(pts.dtype if pts.dtype.kind == "f" else np.float64)


def random_subsample(cloud: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Uniformly pick ``n`` distinct points; kept in their original relative order."""
    pts = np.asarray(cloud)
    if not 1 <= n <= len(pts):
        raise ValueError(f"n must satisfy 1 <= n <= N (N={len(pts)}), got {n}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(pts), size=n, replace=False))
    return pts[idx].copy()

"""Mini PointNet / DGCNN classifiers with an exposed global feature extractor.

Every classifier maps ``(B, N, 3)`` clouds to ``(logits, feature)``; ``feature``
is the max-pooled global vector consumed by the semantic consistency loss.
No batch normalization, so per-example outputs never depend on the batch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import as_tensor, gather_neighbors, knn_indices

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"


def mlp(widths, final_act: bool = True) -> nn.Sequential:
    """Shared MLP over the last axis with GELU activations."""
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if final_act or i < len(widths) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class PointNetMini(nn.Module):
    name = "pointnet_mini"

    def __init__(self, num_classes: int = 8, feature_dim: int = 128):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.point_mlp = mlp([3, 64, 128, feature_dim])
        self.head = mlp([feature_dim, 128, num_classes], final_act=False)

    def dims(self) -> dict:
        return {"num_classes": self.num_classes, "feature_dim": self.feature_dim}

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != 3:
            raise ValueError(f"expected (..., N, 3) input, got {tuple(x.shape)}")
        return self.point_mlp(x).amax(dim=-2)

    def forward(self, x):
        feat = self.features(x)
        return self.head(feat), feat


def edge_features(x: torch.Tensor, k: int) -> torch.Tensor:
    """``[x_i ; x_j - x_i]`` for each point ``i`` and each of its ``k`` neighbours ``j``."""
    nbrs = gather_neighbors(x, knn_indices(x, k))
    center = x.unsqueeze(-2).expand_as(nbrs)
    return torch.cat([center, nbrs - center], dim=-1)


class DGCNNMini(nn.Module):
    name = "dgcnn_mini"

    def __init__(self, num_classes: int = 8, feature_dim: int = 128, k_graph: int = 8):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.k_graph = k_graph
        self.edge_mlp = mlp([6, 64, 64])
        self.point_mlp = mlp([64, 128, feature_dim])
        self.head = mlp([feature_dim, 128, num_classes], final_act=False)

    def dims(self) -> dict:
        return {"num_classes": self.num_classes, "feature_dim": self.feature_dim, "k_graph": self.k_graph}

    def features(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-1] != 3:
            raise ValueError(f"expected (..., N, 3) input, got {tuple(x.shape)}")
        if x.shape[1] <= self.k_graph:
            raise ValueError(f"dgcnn_mini needs N > k_graph={self.k_graph}, got N={x.shape[1]}")
        # graph rebuilt from the current coordinates on every call
        e = self.edge_mlp(edge_features(x, self.k_graph)).amax(dim=2)
        feat = self.point_mlp(e).amax(dim=1)
        return feat[0] if squeeze else feat

    def forward(self, x):
        feat = self.features(x)
        return self.head(feat), feat


ARCHITECTURES = {PointNetMini.name: PointNetMini, DGCNNMini.name: DGCNNMini}


def build_victim(name: str, seed: int = 0, **dims) -> nn.Module:
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown victim architecture {name!r}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ARCHITECTURES[name](**dims)
    model.seed = seed
    return model


def _forward(model, cloud):
    x = as_tensor(cloud).to(next(model.parameters()).dtype)
    single = x.dim() == 2
    logits, feat = model(x.unsqueeze(0) if single else x)
    return (logits[0], feat[0]) if single else (logits, feat)


def forward_pointnet_mini(model: PointNetMini, cloud):
    """``(logits, feature)`` for one cloud ``(N, 3)`` or a batch."""
    if getattr(model, "name", None) != PointNetMini.name:
        raise ValueError("model is not a pointnet_mini")
    return _forward(model, cloud)


def forward_dgcnn_mini(model: DGCNNMini, cloud):
    if getattr(model, "name", None) != DGCNNMini.name:
        raise ValueError("model is not a dgcnn_mini")
    return _forward(model, cloud)


def predict(model, cloud) -> int:
    with torch.no_grad():
        logits, _ = _forward(model, cloud)
    return int(logits.argmax(-1))


def predict_batch(model, clouds, batch_size: int = 64) -> np.ndarray:
    """Argmax labels for a list of clouds; equal-size clouds are batched."""
    preds = np.empty(len(clouds), dtype=np.int64)
    by_n: dict[int, list[int]] = {}
    for i, c in enumerate(clouds):
        by_n.setdefault(len(c), []).append(i)
    with torch.no_grad():
        for idxs in by_n.values():
            for s in range(0, len(idxs), batch_size):
                chunk = idxs[s : s + batch_size]
                x = torch.stack([as_tensor(clouds[i]).float() for i in chunk])
                logits, _ = model(x)
                preds[chunk] = logits.argmax(-1).numpy()
    return preds


def input_gradient(model, cloud, label: int) -> torch.Tensor:
    """Exact gradient of the cross-entropy loss w.r.t. the input coordinates."""
    params = list(model.parameters())
    dtype = params[0].dtype if params else torch.float32
    x = as_tensor(cloud).detach().to(dtype).clone().requires_grad_(True)
    logits, _ = model(x.unsqueeze(0))
    if not logits.requires_grad:
        raise NotImplementedError("model output is not differentiable w.r.t. its input")
    loss = F.cross_entropy(logits, torch.tensor([int(label)]))
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def param_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ValueError(f"invalid training config {self}")


def _stack(split):
    x = torch.from_numpy(np.stack([e.cloud for e in split.examples])).float()
    y = torch.tensor([e.label for e in split.examples])
    return x, y


def accuracy(model, split) -> float:
    x, y = _stack(split)
    preds = predict_batch(model, list(x))
    return float((preds == y.numpy()).mean())


def train_victim(model: nn.Module, train_split, config: TrainConfig | None = None, test_split=None):
    """Mini-batch Adam on cross-entropy; returns ``(model, log)``. Deterministic given the seed."""
    config = config or TrainConfig()
    if train_split is None or len(train_split) == 0:
        raise ValueError("training split is empty")
    x, y = _stack(train_split)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = []
    t0 = time.process_time()
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(len(x), generator=gen)
        total, seen = 0.0, 0
        for s in range(0, len(x), config.batch_size):
            b = perm[s : s + config.batch_size]
            logits, _ = model(x[b])
            loss = F.cross_entropy(logits, y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            seen += len(b)
        history.append(total / seen)
        log.debug("%s epoch %d loss %.4f", model.name, epoch, history[-1])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    out = {
        "loss": history,
        "train_accuracy": accuracy(model, train_split),
        "cpu_seconds": time.process_time() - t0,
    }
    if test_split is not None:
        out["test_accuracy"] = accuracy(model, test_split)
    return model, out


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# --------------------------------------------------------------------------
# checkpoints: manifest.json + one little-endian float32 file per tensor


def save_checkpoint(model: nn.Module, directory, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in model.state_dict().items():
        fname = f"{name}.f32"
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        (d / fname).write_bytes(arr.tobytes())
        tensors[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "architecture": model.name,
        "dims": model.dims(),
        "seed": getattr(model, "seed", None),
        "version": CHECKPOINT_VERSION,
        "tensors": tensors,
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_state(directory) -> tuple[dict, dict]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    state = {}
    for name, info in manifest["tensors"].items():
        arr = np.frombuffer((d / info["file"]).read_bytes(), dtype="<f4").reshape(info["shape"])
        state[name] = torch.from_numpy(arr.copy())
    return manifest, state


def load_checkpoint(directory) -> nn.Module:
    manifest, state = read_state(directory)
    model = build_victim(manifest["architecture"], seed=manifest.get("seed") or 0, **manifest["dims"])
    model.load_state_dict(state)
    return freeze(model)

"""Synthetic labelled shapes, dataset splits and the clean/adversarial pair store.

On-disk layout (splits and pair stores share it): one directory holding
``manifest.json`` plus, per record, raw little-endian float32 ``N x 3``
coordinate files and a JSON sidecar with the metadata.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import normalize_unit_sphere

FORMAT_VERSION = "1"

SHAPE_KINDS = (
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "pyramid",
    "ellipsoid",
    "plane-cross",
)

JITTER_SIGMA = 0.005
SCALE_RANGE = (0.7, 1.3)


@dataclass
class LabeledCloud:
    cloud: np.ndarray
    label: int
    example_id: str


@dataclass
class DatasetSplit:
    examples: list[LabeledCloud]
    split_name: str
    num_classes: int

    def __post_init__(self):
        if not self.examples:
            raise ValueError("a split must contain at least one example")
        if self.split_name not in ("train", "test"):
            raise ValueError(f"unknown split name {self.split_name!r}")
        ids = [e.example_id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise ValueError("example ids must be unique within a split")
        for e in self.examples:
            if not 0 <= e.label < self.num_classes:
                raise ValueError(f"label {e.label} out of range for {e.example_id}")

    def __len__(self):
        return len(self.examples)

    def by_id(self) -> dict[str, LabeledCloud]:
        return {e.example_id: e for e in self.examples}


@dataclass
class PairRecord:
    example_id: str
    attack_name: str
    victim_name: str
    clean: np.ndarray
    adversarial: np.ndarray
    label: int

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.example_id, self.attack_name, self.victim_name)


@dataclass
class DatasetConfig:
    train_per_class: int = 100
    test_per_class: int = 25
    n_points: int = 256
    seed: int = 0
    kinds: tuple[str, ...] = field(default=SHAPE_KINDS)

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("per-class counts must be positive")
        unknown = set(self.kinds) - set(SHAPE_KINDS)
        if unknown:
            raise ValueError(f"unknown shape kind(s) {sorted(unknown)}")
        if len(set(self.kinds)) != len(self.kinds):
            raise ValueError("shape kinds must be distinct")


# --------------------------------------------------------------------------
# shape generation


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_by_area(rng, n, areas):
    p = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(p), size=n, p=p / p.sum())


def _triangles(rng, n, tris):
    """Area-weighted uniform samples on a list of triangles ``(T, 3, 3)``."""
    tris = np.asarray(tris, dtype=np.float64)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    face = _sample_by_area(rng, n, areas)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tris[face]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


def sample_surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the canonical (unscaled, unrotated) surface of ``kind``.

    The sphere has radius 1 and the cube half-width 1.
    """
    if kind == "sphere":
        return _unit_vectors(rng, n)
    if kind == "ellipsoid":
        # elongated enough that no sphere survives anisotropic scaling into it
        return _unit_vectors(rng, n) * np.array([1.0, 0.6, 0.2])
    if kind == "cube":
        face = rng.integers(0, 6, size=n)
        pts = rng.uniform(-1, 1, size=(n, 3))
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign
        return pts
    if kind == "cylinder":
        r, h = 0.6, 1.0
        part = _sample_by_area(rng, n, [2 * np.pi * r * 2 * h, np.pi * r * r, np.pi * r * r])
        theta = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
        z = np.where(part == 0, rng.uniform(-h, h, n), np.where(part == 1, h, -h))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    if kind == "cone":
        r, h = 0.5, 2.0
        slant = np.hypot(r, h)
        part = _sample_by_area(rng, n, [np.pi * r * slant, np.pi * r * r])
        theta = rng.uniform(0, 2 * np.pi, n)
        # lateral surface: radius grows linearly from apex, density ~ radius
        t = np.sqrt(rng.random(n))
        rad = np.where(part == 0, r * t, r * np.sqrt(rng.random(n)))
        z = np.where(part == 0, h / 2 - h * t, -h / 2)
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    if kind == "torus":
        big, small = 0.7, 0.25
        # rejection sampling for area-uniform minor angle
        out = np.empty((0, 3))
        while len(out) < n:
            u = rng.uniform(0, 2 * np.pi, 2 * n)
            v = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = rng.random(2 * n) < (big + small * np.cos(v)) / (big + small)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
        return out[:n]
    if kind == "pyramid":
        # squat square pyramid; its aspect ratio never overlaps the tall cone's
        base = np.array([[-1, -1, -0.4], [1, -1, -0.4], [1, 1, -0.4], [-1, 1, -0.4]], float)
        apex = np.array([0.0, 0.0, 0.4])
        tris = [[base[i], base[(i + 1) % 4], apex] for i in range(4)]
        tris += [[base[0], base[1], base[2]], [base[0], base[2], base[3]]]
        return _triangles(rng, n, tris)
    if kind == "plane-cross":
        # three mutually orthogonal unit squares through the origin
        sq = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], float)
        tris = []
        for perm in ([0, 1, 2], [0, 2, 1], [2, 0, 1]):
            q = sq[:, perm]
            tris += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
        return _triangles(rng, n, tris)
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def _rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_shape(kind: str, n: int, seed: int, kinds=SHAPE_KINDS, example_id: str | None = None) -> LabeledCloud:
    """Sample one labelled cloud: surface, anisotropic scale, rotation, jitter, normalize."""
    if kind not in kinds:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {tuple(kinds)}")
    if n < 32:
        raise ValueError(f"n must be >= 32, got {n}")
    rng = np.random.default_rng(seed)
    pts = sample_surface(kind, n, rng)
    pts = pts * rng.uniform(*SCALE_RANGE, size=3)
    pts = pts @ _rotation_z(rng.uniform(0, 2 * np.pi)).T
    pts = pts + rng.normal(scale=JITTER_SIGMA, size=pts.shape)
    pts = normalize_unit_sphere(pts).astype(np.float32)
    eid = example_id if example_id is not None else f"{kind}-{seed}"
    return LabeledCloud(cloud=pts, label=list(kinds).index(kind), example_id=eid)


def _example_seed(master: int, split_idx: int, class_idx: int, i: int) -> int:
    ss = np.random.SeedSequence([master, split_idx, class_idx, i])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def build_dataset(config: DatasetConfig | None = None) -> dict[str, DatasetSplit]:
    """Balanced train/test splits whose every example is a pure function of the config."""
    config = config or DatasetConfig()
    if config.train_per_class < 1 or config.test_per_class < 1:
        raise ValueError("per-class counts must be positive")
    out = {}
    for split_idx, (name, count) in enumerate(
        [("train", config.train_per_class), ("test", config.test_per_class)]
    ):
        examples = []
        for c, kind in enumerate(config.kinds):
            for i in range(count):
                seed = _example_seed(config.seed, split_idx, c, i)
                examples.append(
                    generate_shape(kind, config.n_points, seed, config.kinds, example_id=f"{name}-{kind}-{i:04d}")
                )
        out[name] = DatasetSplit(examples=examples, split_name=name, num_classes=len(config.kinds))
    return out


# --------------------------------------------------------------------------
# on-disk format

_SAFE = re.compile(r"[^A-Za-z0-9._-]+")


def _fname(*parts: str) -> str:
    return "__".join(_SAFE.sub("_", p) for p in parts)


def write_cloud(path: Path, cloud: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(cloud, dtype="<f4").reshape(-1, 3))
    Path(path).write_bytes(arr.tobytes())


def read_cloud(path: Path) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size % 3:
        raise OSError(f"{path}: size is not a multiple of 3 floats")
    return data.reshape(-1, 3).astype(np.float32)


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_split(split: DatasetSplit, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    keys = []
    for e in split.examples:
        stem = _fname(e.example_id)
        write_cloud(d / f"{stem}.f32", e.cloud)
        _write_json(
            d / f"{stem}.json",
            {"example_id": e.example_id, "label": int(e.label), "n_points": int(len(e.cloud)), "version": FORMAT_VERSION},
        )
        keys.append(stem)
    _write_json(
        d / "manifest.json",
        {"kind": "split", "split_name": split.split_name, "num_classes": split.num_classes,
         "version": FORMAT_VERSION, "keys": keys},
    )
    return d


def load_split(directory) -> DatasetSplit:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no split manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    examples = []
    for stem in manifest["keys"]:
        meta = json.loads((d / f"{stem}.json").read_text())
        examples.append(LabeledCloud(read_cloud(d / f"{stem}.f32"), int(meta["label"]), meta["example_id"]))
    return DatasetSplit(examples, manifest["split_name"], int(manifest["num_classes"]))


class PairStore:
    """Directory of clean/adversarial pairs keyed by (example, attack, victim).

    One writer at a time; the manifest is rewritten after every ``put`` batch so
    partial progress survives interruption.
    """

    def __init__(self, path):
        self.path = Path(path)

    @property
    def manifest_path(self) -> Path:
        return self.path / "manifest.json"

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def _read_manifest(self) -> dict:
        if not self.exists():
            return {"kind": "pairs", "version": FORMAT_VERSION, "keys": []}
        return json.loads(self.manifest_path.read_text())

    def put(self, records) -> int:
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create pair store at {self.path}: {exc}") from exc
        manifest = self._read_manifest()
        keys = {tuple(k) for k in manifest["keys"]}
        count = 0
        for r in records:
            stem = _fname(*r.key)
            write_cloud(self.path / f"{stem}.clean.f32", r.clean)
            write_cloud(self.path / f"{stem}.adv.f32", r.adversarial)
            _write_json(
                self.path / f"{stem}.json",
                {
                    "example_id": r.example_id,
                    "attack_name": r.attack_name,
                    "victim_name": r.victim_name,
                    "label": int(r.label),
                    "n_clean": int(len(r.clean)),
                    "n_adversarial": int(len(r.adversarial)),
                    "version": FORMAT_VERSION,
                },
            )
            keys.add(r.key)
            count += 1
        manifest["keys"] = [list(k) for k in sorted(keys)]
        _write_json(self.manifest_path, manifest)
        return count

    def keys(self) -> list[tuple[str, str, str]]:
        if not self.exists():
            raise FileNotFoundError(f"no pair store at {self.path}")
        return [tuple(k) for k in self._read_manifest()["keys"]]

    def get(self, key) -> PairRecord:
        stem = _fname(*key)
        meta = json.loads((self.path / f"{stem}.json").read_text())
        return PairRecord(
            example_id=meta["example_id"],
            attack_name=meta["attack_name"],
            victim_name=meta["victim_name"],
            clean=read_cloud(self.path / f"{stem}.clean.f32"),
            adversarial=read_cloud(self.path / f"{stem}.adv.f32"),
            label=int(meta["label"]),
        )

    def load(self, attack=None, victim=None) -> list[PairRecord]:
        attacks = _as_set(attack)
        victims = _as_set(victim)
        out = []
        for key in self.keys():
            if attacks is not None and key[1] not in attacks:
                continue
            if victims is not None and key[2] not in victims:
                continue
            out.append(self.get(key))
        return out


def _as_set(x):
    if x is None:
        return None
    if isinstance(x, str):
        return {x}
    return set(x)


def store_pairs(store_path, records) -> int:
    """Persist records (last write wins per key); returns the number written."""
    return PairStore(store_path).put(records)


def load_pairs(store_path, attack=None, victim=None) -> list[PairRecord]:
    """Records in sorted-key order, optionally filtered by attack and/or victim name."""
    return PairStore(store_path).load(attack=attack, victim=victim)


def clean_pairs(split: DatasetSplit, victim_name: str) -> list[PairRecord]:
    """Degenerate (x, x) pairs stored under the attack name ``"clean"``."""
    return [
        PairRecord(e.example_id, "clean", victim_name, e.cloud, e.cloud.copy(), e.label)
        for e in split.examples
    ]

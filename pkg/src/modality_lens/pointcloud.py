"""Point clouds: file IO, normalisation, FPS + k-NN patching, synthetic shapes."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, EmptyInputError, ParseError

PCLB_MAGIC = b"PCLB"
PCLB_VERSION = 1
GENERATORS = ("sphere", "cube", "cylinder", "torus")


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ContractError(f"point cloud must be N x 3 with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractError("point cloud has non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PatchConfig:
    """Resample size, number of patches (G) and points per patch (k).

    Desk-scale defaults; ``FULL_PATCH_CONFIG`` holds the full-size values.
    """

    n_sample: int = 256
    n_groups: int = 32
    group_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_groups <= self.n_sample:
            raise ConfigError(f"need 1 <= n_groups <= n_sample, got {self.n_groups}/{self.n_sample}")
        if not 1 <= self.group_size <= self.n_sample:
            raise ConfigError(f"need 1 <= group_size <= n_sample, got {self.group_size}/{self.n_sample}")


FULL_PATCH_CONFIG = PatchConfig(n_sample=8192, n_groups=512, group_size=32)


@dataclass
class PointPatchSet:
    centers: np.ndarray  # G x 3
    groups: np.ndarray  # G x k x 3, relative to centers
    selection_order: list[int]
    member_index: np.ndarray | None = None  # G x k indices into the resampled cloud

    @property
    def n_groups(self) -> int:
        return self.centers.shape[0]

    @property
    def group_size(self) -> int:
        return self.groups.shape[1]


# ---------------------------------------------------------------- IO


def load_pointcloud(path, format: str | None = None) -> PointCloud:
    """Read ``xyz_text`` or ``pclb_binary``; the format is guessed from the suffix if omitted."""
    path = Path(path)
    fmt = format or _guess_format(path)
    raw = path.read_bytes()
    if not raw:
        raise EmptyInputError(f"{path}: empty file")
    if fmt == "pclb_binary":
        pts = _parse_pclb(raw, str(path))
    elif fmt == "xyz_text":
        pts = _parse_xyz(raw.decode("utf-8", errors="replace"), str(path))
    else:
        raise ConfigError(f"unknown point-cloud format {fmt!r}")
    return PointCloud(pts, source_id=path.stem)


def save_pointcloud(pc: PointCloud, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or _guess_format(path)
    if fmt == "pclb_binary":
        path.write_bytes(encode_pclb(pc.points))
    elif fmt == "xyz_text":
        path.write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pc.points.tolist()))
    else:
        raise ConfigError(f"unknown point-cloud format {fmt!r}")


def encode_pclb(points: np.ndarray) -> bytes:
    pts = np.ascontiguousarray(points, dtype="<f4")
    return PCLB_MAGIC + struct.pack("<II", PCLB_VERSION, pts.shape[0]) + pts.tobytes()


def _guess_format(path: Path) -> str:
    return "pclb_binary" if path.suffix.lower() == ".pclb" else "xyz_text"


def _parse_pclb(raw: bytes, name: str) -> np.ndarray:
    if raw[:4] != PCLB_MAGIC:
        raise ParseError(f"{name}: bad PCLB magic at byte offset 0")
    if len(raw) < 12:
        raise ParseError(f"{name}: truncated PCLB header at byte offset {len(raw)}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != PCLB_VERSION:
        raise ParseError(f"{name}: unsupported PCLB version {version} at byte offset 4")
    if n == 0:
        raise EmptyInputError(f"{name}: PCLB file holds zero points")
    need = 12 + 12 * n
    if len(raw) != need:
        raise ParseError(f"{name}: expected {need} bytes for {n} points, got {len(raw)} (offset 12)")
    return np.frombuffer(raw, dtype="<f4", offset=12).astype(np.float64).reshape(n, 3)


def _parse_xyz(text: str, name: str) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{name}: line {lineno}: expected 3 values, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError(f"{name}: line {lineno}: not a number: {line.strip()!r}") from None
    if not rows:
        raise EmptyInputError(f"{name}: no points")
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------- geometry


def normalize_cloud(pc: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point sits at radius 1."""
    pts = pc.points - pc.points.mean(axis=0)
    radius = np.sqrt((pts * pts).sum(axis=1)).max()
    if radius > 0:
        pts = pts / radius
    else:
        pts = np.zeros_like(pts)
    return PointCloud(pts, label=pc.label, source_id=pc.source_id)


def _sqdist(points: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = points - c
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _pick(points: np.ndarray, score: np.ndarray) -> int:
    # max score; ties -> lexicographically smallest (x, y, z), then lowest index
    cand = np.flatnonzero(score == score.max())
    if cand.size == 1:
        return int(cand[0])
    sub = points[cand]
    order = np.lexsort((cand, sub[:, 2], sub[:, 1], sub[:, 0]))
    return int(cand[order[0]])


def fps(points: np.ndarray, m: int, start_rule: str = "farthest_from_centroid") -> list[int]:
    """Greedy farthest point sampling returning ``m`` indices in selection order."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"fps needs 1 <= m <= N, got m={m}, N={n}")
    if start_rule == "index_zero":
        first = 0
    elif start_rule == "farthest_from_centroid":
        first = _pick(points, _sqdist(points, points.mean(axis=0)))
    else:
        raise ConfigError(f"unknown fps start rule {start_rule!r}")
    chosen = [first]
    mind = _sqdist(points, points[first])
    mind[first] = -1.0  # selected points never win again, even among duplicates
    for _ in range(1, m):
        nxt = _pick(points, mind)
        chosen.append(nxt)
        np.minimum(mind, _sqdist(points, points[nxt]), out=mind)
        mind[nxt] = -1.0
    return chosen


def knn_group(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points per center, sorted by (distance, index)."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if not 1 <= k <= points.shape[0]:
        raise ContractError(f"knn needs 1 <= k <= N, got k={k}, N={points.shape[0]}")
    d = _sqdist(points[None, :, :], centers[:, None, :])
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def resample(points: np.ndarray, n_sample: int, seed: int) -> np.ndarray:
    """Seeded uniform resample to ``n_sample`` points.

    Points are first put in lexicographic order so the result depends only on
    the geometry, not on the input ordering. Sampling is with replacement only
    when the cloud has fewer than ``n_sample`` points.
    """
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    canon = points[order]
    n = canon.shape[0]
    if n == n_sample:
        return canon
    rng = np.random.default_rng(seed)
    if n > n_sample:
        idx = np.sort(rng.choice(n, size=n_sample, replace=False))
    else:
        idx = np.sort(rng.choice(n, size=n_sample, replace=True))
    return canon[idx]


def make_patches(pc: PointCloud, cfg: PatchConfig) -> PointPatchSet:
    pts = resample(pc.points, cfg.n_sample, cfg.seed)
    order = fps(pts, cfg.n_groups)
    centers = pts[order]
    members = knn_group(pts, centers, cfg.group_size)
    groups = pts[members] - centers[:, None, :]
    return PointPatchSet(centers=centers, groups=groups, selection_order=order, member_index=members)


# ---------------------------------------------------------------- synthetic shapes


@dataclass(frozen=True)
class Category:
    name: str
    generator: str
    size: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SyntheticSpec:
    categories: tuple[Category, ...]
    points_per_cloud: int = 512
    noise_sigma: float = 0.0
    clouds_per_category: int = 8
    seed: int = 0
    size_jitter: float = 0.0

    def __post_init__(self):
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise ConfigError(f"category names must be unique: {names}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.size_jitter < 1:
            raise ConfigError("size_jitter must lie in [0, 1)")
        for c in self.categories:
            if c.generator not in GENERATORS:
                raise ConfigError(f"unknown generator {c.generator!r} for category {c.name!r}")


DEFAULT_CATEGORIES = (
    Category("sphere", "sphere", {"radius": 1.0}),
    Category("cube", "cube", {"side": 1.0}),
    Category("cylinder", "cylinder", {"radius": 0.5, "height": 1.5}),
    Category("torus", "torus", {"major": 1.0, "minor": 0.3}),
)


def _sphere(rng, n, radius=1.0):
    v = rng.standard_normal((n, 3))
    return radius * v / np.sqrt((v * v).sum(axis=1, keepdims=True))


def _cube(rng, n, side=1.0):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2)) * side
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5) * side
    for a in range(3):
        rest = [b for b in range(3) if b != a]
        sel = axis == a
        pts[sel, a] = sign[sel]
        pts[sel, rest[0]] = uv[sel, 0]
        pts[sel, rest[1]] = uv[sel, 1]
    return pts


def _cylinder(rng, n, radius=0.5, height=1.5):
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius**2
    kind = rng.choice(3, size=n, p=np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(kind == 0, radius, radius * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(kind == 0, rng.uniform(-height / 2, height / 2, size=n),
                 np.where(kind == 1, height / 2, -height / 2))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n, major=1.0, minor=0.3):
    out = []
    have = 0
    while have < n:
        m = 2 * (n - have) + 16
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        # area element is proportional to (major + minor cos v)
        keep = rng.uniform(0, major + minor, size=m) < major + minor * np.cos(v)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out.append(np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1))
        have += u.size
    return np.concatenate(out)[:n]


_GEN = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus}


def synth_generate(spec: SyntheticSpec) -> list[tuple[PointCloud, int]]:
    """Seeded clouds for every category, in category-major order."""
    out = []
    for cid, cat in enumerate(spec.categories):
        if cat.generator not in _GEN:
            raise ConfigError(f"unknown generator {cat.generator!r}")
        for i in range(spec.clouds_per_category):
            rng = np.random.default_rng([spec.seed, cid, i])
            size = dict(cat.size)
            if spec.size_jitter:
                size = {k: v * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter) for k, v in size.items()}
            pts = _GEN[cat.generator](rng, spec.points_per_cloud, **size)
            if spec.noise_sigma:
                pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
            out.append((PointCloud(pts, label=cid, source_id=f"{cat.name}-{spec.seed}-{i:04d}"), cid))
    return out

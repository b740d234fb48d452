"""Dataset ingestion, synthetic shape generation, augmentation, batching.

File formats: whitespace xyz, ascii PLY (vertex x/y/z properties, extras
dropped, binary rejected), and OFF vertices. Coordinates are stored as
float32 and written with 9 significant digits, which round-trips bitwise.

The synthetic generator stands in for a real pretraining corpus: four shape
families whose local geometry spans flat to highly curved, so patch
difficulty genuinely varies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PointCloud, as_rng, unit_sphere_normalize

__all__ = [
    "Dataset",
    "ParseError",
    "SHAPE_KINDS",
    "load_pointcloud",
    "write_xyz",
    "write_ply_colored",
    "synth_shape",
    "synth_dataset",
    "augment",
    "build_dataset",
    "load_manifest",
]

SHAPE_KINDS = ("sphere", "cube", "torus", "ridged-plane")


class ParseError(ValueError):
    """Malformed point-cloud file; message carries path and line number."""


@dataclass(frozen=True)
class Dataset:
    samples: list[tuple[PointCloud, int]]
    class_names: list[str]
    provenance: str  # "file" | "synthetic"

    def __post_init__(self):
        n_classes = len(self.class_names)
        for _, label in self.samples:
            if not 0 <= label < n_classes:
                raise ValueError(f"label {label} outside [0, {n_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.samples], dtype=np.int64)


# -- parsers --------------------------------------------------------------------


def _parse_floats(tokens, path, lineno, expect):
    if len(tokens) != expect:
        raise ParseError(f"{path}:{lineno}: expected {expect} values, got {len(tokens)}")
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise ParseError(f"{path}:{lineno}: non-numeric token ({e})") from None


def _load_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            rows.append(_parse_floats(tokens, path, lineno, 3))
    if not rows:
        raise ParseError(f"{path}: file contains no points")
    return np.array(rows, dtype=np.float32)


def _load_ply(path: Path) -> np.ndarray:
    with open(path, errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}:1: not a PLY file (missing 'ply' magic)")

    elements: list[tuple[str, int, list[str]]] = []  # (name, count, property names)
    data_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise ParseError(f"{path}:{lineno}: only ascii PLY is supported")
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError(f"{path}:{lineno}: malformed element declaration")
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: element count is not an integer") from None
            elements.append((tokens[1], count, []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError(f"{path}:{lineno}: property before any element")
            elements[-1][2].append(tokens[-1])
        elif tokens[0] == "end_header":
            data_start = lineno  # lines[data_start] is the first data line (0-based: lineno)
            break
    if data_start is None:
        raise ParseError(f"{path}: header never terminated with end_header")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ParseError(f"{path}: header declares no vertex element")
    props = vertex[2]
    try:
        cols = [props.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise ParseError(f"{path}: vertex element lacks x/y/z properties") from None

    cursor = data_start  # 0-based index into `lines`
    rows = None
    for name, count, eprops in elements:
        chunk = lines[cursor : cursor + count]
        if len(chunk) < count:
            raise ParseError(
                f"{path}: element '{name}' declares {count} rows but only "
                f"{len(chunk)} remain"
            )
        if name == "vertex":
            rows = []
            for off, line in enumerate(chunk):
                vals = _parse_floats(line.split(), path, cursor + off + 1, len(eprops))
                rows.append([vals[c] for c in cols])
        cursor += count
    return np.array(rows, dtype=np.float32)


def _load_off(path: Path) -> np.ndarray:
    with open(path) as fh:
        lines = [(i + 1, ln.split()) for i, ln in enumerate(fh) if ln.split()]
    if not lines or lines[0][1][0].upper() != "OFF":
        raise ParseError(f"{path}:1: missing OFF header")
    if len(lines) < 2:
        raise ParseError(f"{path}: missing counts line")
    lineno, counts = lines[1]
    if len(counts) < 2:
        raise ParseError(f"{path}:{lineno}: counts line needs at least vertices and faces")
    try:
        n_vertices = int(counts[0])
    except ValueError:
        raise ParseError(f"{path}:{lineno}: vertex count is not an integer") from None
    vertex_lines = lines[2 : 2 + n_vertices]
    if len(vertex_lines) < n_vertices:
        raise ParseError(
            f"{path}: declared {n_vertices} vertices but found {len(vertex_lines)}"
        )
    rows = [_parse_floats(tokens, path, lineno, 3) for lineno, tokens in vertex_lines]
    return np.array(rows, dtype=np.float32)


def load_pointcloud(path) -> PointCloud:
    """Parse an xyz / ascii-PLY / OFF file into a PointCloud."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    ext = path.suffix.lower()
    if ext == ".xyz":
        pts = _load_xyz(path)
    elif ext == ".ply":
        pts = _load_ply(path)
    elif ext == ".off":
        pts = _load_off(path)
    else:
        raise ParseError(f"{path}: unsupported extension '{ext}' (use xyz/ply/off)")
    return PointCloud(points=pts)


def write_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        for p in cloud.points:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def write_ply_colored(path, points: np.ndarray, colors: np.ndarray) -> None:
    """Ascii PLY with per-vertex uchar red/green/blue."""
    if len(points) != len(colors):
        raise ValueError("points and colors must align")
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(points, colors):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")


# -- synthetic shapes ---------------------------------------------------------------


def _sample_sphere(rng, n):
    # antithetic +-v pairs: area-uniform and centroid-free, so unit-sphere
    # normalization leaves every point at norm 1 (for even n)
    half = (n + 1) // 2
    v = rng.normal(size=(half, 3))
    v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return np.concatenate([v, -v], axis=0)[:n]


def _sample_cube(rng, n):
    face = rng.integers(6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        others = [a for a in range(3) if a != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts


def _sample_torus(rng, n, major=1.0, minor=0.4):
    # area-uniform: the tube angle needs rejection with weight (R + r cos v)
    out = np.empty((n, 2))
    have = 0
    while have < n:
        cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * (n - have))
        accept = rng.uniform(0.0, 1.0, size=cand.size) <= (
            (major + minor * np.cos(cand)) / (major + minor)
        )
        good = cand[accept][: n - have]
        out[have : have + len(good), 1] = good
        have += len(good)
    out[:, 0] = rng.uniform(0.0, 2.0 * np.pi, size=n)
    u, v = out[:, 0], out[:, 1]
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


_RIDGE_H, _RIDGE_W, _RIDGE_FREQ = 0.35, 0.22, 2.0


def _ridge_height(x, y):
    return _RIDGE_H * np.exp(-((x / _RIDGE_W) ** 2)) * np.cos(np.pi * _RIDGE_FREQ * y)


def _ridge_area_weight(x, y):
    g = np.exp(-((x / _RIDGE_W) ** 2))
    dzdx = _RIDGE_H * g * np.cos(np.pi * _RIDGE_FREQ * y) * (-2.0 * x / _RIDGE_W**2)
    dzdy = -_RIDGE_H * g * np.pi * _RIDGE_FREQ * np.sin(np.pi * _RIDGE_FREQ * y)
    return np.sqrt(1.0 + dzdx**2 + dzdy**2)


def _sample_ridged_plane(rng, n):
    # flat sheet with a corrugated ridge along x ~ 0; area-uniform by rejection
    grid = np.linspace(-1.0, 1.0, 101)
    gx, gy = np.meshgrid(grid, grid)
    w_max = float(_ridge_area_weight(gx, gy).max()) * 1.01
    pts = np.empty((n, 2))
    have = 0
    while have < n:
        cand = rng.uniform(-1.0, 1.0, size=(2 * (n - have), 2))
        w = _ridge_area_weight(cand[:, 0], cand[:, 1]) / w_max
        accept = rng.uniform(0.0, 1.0, size=len(cand)) <= w
        good = cand[accept][: n - have]
        pts[have : have + len(good)] = good
        have += len(good)
    z = _ridge_height(pts[:, 0], pts[:, 1])
    return np.stack([pts[:, 0], pts[:, 1], z], axis=1)


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "torus": _sample_torus,
    "ridged-plane": _sample_ridged_plane,
}


def synth_shape(kind: str, n_points: int, seed, jitter: float = 0.01) -> PointCloud:
    """Deterministic area-uniform surface sample with Gaussian jitter."""
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind '{kind}' (choose from {SHAPE_KINDS})")
    if n_points < 8:
        raise ValueError("n_points must be at least 8")
    rng = as_rng(seed)
    pts = _SAMPLERS[kind](rng, n_points)
    if jitter > 0:
        pts = pts + rng.normal(0.0, jitter, size=pts.shape)
    return PointCloud(points=pts.astype(np.float32), label=SHAPE_KINDS.index(kind))


def synth_dataset(
    per_class: int, n_points: int, seed: int, jitter: float = 0.01, salt: int = 0
) -> Dataset:
    """Balanced dataset over the four shape families, unit-sphere normalized."""
    samples = []
    for label, kind in enumerate(SHAPE_KINDS):
        for i in range(per_class):
            cloud = synth_shape(kind, n_points, seed=[seed, label, salt + i], jitter=jitter)
            samples.append((unit_sphere_normalize(cloud), label))
    return Dataset(samples=samples, class_names=list(SHAPE_KINDS), provenance="synthetic")


def augment(cloud: PointCloud, rng: np.random.Generator) -> PointCloud:
    """Uniform scale in [0.8, 1.2] plus translation in [-0.1, 0.1]^3."""
    scale = float(rng.uniform(0.8, 1.2))
    shift = rng.uniform(-0.1, 0.1, size=3).astype(np.float32)
    return PointCloud(points=cloud.points * scale + shift, label=cloud.label)


# -- manifests & config-driven construction ----------------------------------------


def load_manifest(path) -> tuple[Dataset, Dataset]:
    """Manifest JSON: class_names plus train/test entry lists.

    Each entry is {"path": ..., "label": int} or
    {"synthetic": {"kind", "n_points", "seed", "jitter"}, "label": int}.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    class_names = doc.get("class_names")
    if not class_names:
        raise ParseError(f"{path}: manifest needs a class_names list")

    def build(entries):
        samples = []
        for entry in entries:
            label = int(entry["label"])
            if "path" in entry:
                cloud = load_pointcloud(path.parent / entry["path"])
            elif "synthetic" in entry:
                spec = entry["synthetic"]
                cloud = synth_shape(
                    spec["kind"],
                    int(spec["n_points"]),
                    seed=spec.get("seed", 0),
                    jitter=float(spec.get("jitter", 0.01)),
                )
            else:
                raise ParseError(f"{path}: entry needs 'path' or 'synthetic'")
            samples.append((unit_sphere_normalize(cloud), label))
        return samples

    train = Dataset(build(doc.get("train", [])), class_names, provenance="file")
    test = Dataset(build(doc.get("test", [])), class_names, provenance="file")
    return train, test


def build_dataset(spec: dict) -> tuple[Dataset, Dataset]:
    """Config-driven dataset construction; see TrainConfig.dataset."""
    kind = spec.get("kind")
    if kind == "synthetic":
        seed = int(spec.get("seed", 0))
        n_points = int(spec.get("n_points", 128))
        jitter = float(spec.get("jitter", 0.01))
        train = synth_dataset(int(spec["train_per_class"]), n_points, seed, jitter)
        test = synth_dataset(
            int(spec["test_per_class"]), n_points, seed, jitter,
            salt=1_000_000,  # disjoint per-sample seed namespace
        )
        return train, test
    if kind == "manifest":
        return load_manifest(spec["path"])
    raise ValueError(f"unknown dataset kind '{kind}' (use 'synthetic' or 'manifest')")

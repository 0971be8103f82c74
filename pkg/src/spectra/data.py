"""
Hyperspectral scene I/O, patch extraction and sampling.

On disk a scene is three files: a ``key = value`` manifest, a raw
band-sequential float32 little-endian cube, and a raw uint16
little-endian label raster (0 = unlabeled). In memory the cube is a
``[bands, height, width]`` float64 array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .kvtext import dump_kv, parse_kv, split_list

MANIFEST_VERSION = 1

_DEFAULT_PALETTE = [
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4",
    "#46f0f0", "#f032e6", "#bcf60c", "#fabebe", "#008080", "#e6beff",
    "#9a6324", "#fffac8", "#800000", "#aaffc3", "#808000", "#ffd8b1",
    "#000075", "#808080", "#ffffff", "#a0a0ff",
]


class ManifestError(ValueError):
    pass


@dataclass
class HsiCube:
    data: np.ndarray  # [bands, height, width]
    wavelengths: np.ndarray | None = None

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError(f"cube must be [bands, height, width], got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("cube contains non-finite values")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class GroundTruth:
    labels: np.ndarray  # [height, width] int, 0 = unlabeled
    class_names: list[str] = field(default_factory=list)
    palette: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(1, int(self.labels.max(initial=0)) + 1)]
        if not self.palette:
            self.palette = default_palette(len(self.class_names))
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) > self.n_classes:
            raise ValueError(f"labels must lie in 0..{self.n_classes}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def shape(self) -> tuple:
        return self.labels.shape


def default_palette(n: int) -> list[str]:
    return [_DEFAULT_PALETTE[i % len(_DEFAULT_PALETTE)] for i in range(n)]


# ---------------------------------------------------------------- file format


def write_scene(cube: HsiCube, gt: GroundTruth, out_dir, stem: str = "scene") -> Path:
    """Write manifest + payloads; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if gt.shape != (cube.height, cube.width):
        raise ValueError(f"ground truth {gt.shape} vs cube {(cube.height, cube.width)}")
    if any("," in name for name in gt.class_names):
        raise ValueError("class names may not contain commas")
    data_file = f"{stem}.bsq"
    gt_file = f"{stem}_gt.u16"
    (out_dir / data_file).write_bytes(cube.data.astype("<f4").tobytes(order="C"))
    (out_dir / gt_file).write_bytes(gt.labels.astype("<u2").tobytes(order="C"))
    meta = {
        "version": MANIFEST_VERSION,
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "dtype": "f32le",
        "interleave": "BSQ",
        "data_file": data_file,
        "gt_file": gt_file,
        "classes": ", ".join(gt.class_names),
        "palette": ", ".join(gt.palette),
    }
    if cube.wavelengths is not None:
        meta["wavelengths"] = ", ".join(repr(float(w)) for w in cube.wavelengths)
    path = out_dir / f"{stem}.manifest"
    path.write_text(dump_kv(meta))
    return path


def _read_exact(path: Path, nbytes: int, what: str) -> bytes:
    if not path.is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    raw = path.read_bytes()
    if len(raw) != nbytes:
        raise ManifestError(f"{what} file {path.name}: expected {nbytes} bytes, found {len(raw)}")
    return raw


def load_cube(manifest_path) -> tuple[HsiCube, GroundTruth]:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    meta = parse_kv(manifest_path.read_text())
    required = ("version", "height", "width", "bands", "dtype", "interleave", "data_file", "gt_file", "classes")
    missing = [k for k in required if k not in meta]
    if missing:
        raise ManifestError(f"manifest missing keys: {', '.join(missing)}")
    if int(meta["version"]) != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {meta['version']}")
    if meta["dtype"].lower() != "f32le" or meta["interleave"].upper() != "BSQ":
        raise ManifestError("only f32le band-sequential payloads are supported")
    h, w, d = int(meta["height"]), int(meta["width"]), int(meta["bands"])
    if min(h, w, d) < 1:
        raise ManifestError("height, width and bands must be positive")
    root = manifest_path.parent
    raw = _read_exact(root / meta["data_file"], 4 * h * w * d, "data")
    cube = np.frombuffer(raw, dtype="<f4").reshape(d, h, w).astype(np.float64)
    raw = _read_exact(root / meta["gt_file"], 2 * h * w, "ground-truth")
    labels = np.frombuffer(raw, dtype="<u2").reshape(h, w).astype(np.int64)

    names = split_list(meta["classes"])
    if labels.max(initial=0) > len(names):
        raise ManifestError(f"label {labels.max()} exceeds the {len(names)} declared classes")
    palette = split_list(meta.get("palette", "")) or default_palette(len(names))
    if len(palette) < len(names):
        raise ManifestError("palette has fewer colours than classes")
    wl = None
    if meta.get("wavelengths"):
        wl = np.array([float(v) for v in split_list(meta["wavelengths"])])
        if wl.shape != (d,):
            raise ManifestError("wavelength count does not match bands")
    return HsiCube(cube, wl), GroundTruth(labels, names, palette)


# ---------------------------------------------------------------- preprocessing


def normalize(cube: HsiCube) -> HsiCube:
    """Per-band min-max scaling to [0, 1]; constant bands become 0."""
    x = cube.data
    lo = x.min(axis=(1, 2), keepdims=True)
    span = x.max(axis=(1, 2), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, 0.0)
    return HsiCube(out, cube.wavelengths)


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    # reflect without repeating the edge, then clamp if still outside
    idx = np.where(idx < 0, -idx, idx)
    idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)
    return np.clip(idx, 0, n - 1)


def _window(center: int, s: int, n: int) -> np.ndarray:
    r = s // 2
    return _mirror_index(np.arange(center - r, center + r + 1), n)


def extract_patch(cube: HsiCube, row: int, col: int, s: int) -> np.ndarray:
    """``[bands, s, s]`` window centred on ``(row, col)`` with mirrored borders."""
    if s < 1 or s % 2 == 0:
        raise ValueError(f"patch size must be odd, got {s}")
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise IndexError(f"centre ({row}, {col}) outside {cube.height}x{cube.width} cube")
    rows = _window(row, s, cube.height)
    cols = _window(col, s, cube.width)
    return cube.data[:, rows[:, None], cols[None, :]]


def extract_patches(cube: HsiCube, coords: np.ndarray, s: int) -> np.ndarray:
    """Stack of patches for an ``[m, 2]`` array of (row, col) centres."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if coords.size and (
        coords.min() < 0 or coords[:, 0].max() >= cube.height or coords[:, 1].max() >= cube.width
    ):
        raise IndexError("patch centre outside the cube")
    r = s // 2
    offs = np.arange(-r, r + 1)
    rows = _mirror_index(coords[:, 0, None] + offs, cube.height)  # m, s
    cols = _mirror_index(coords[:, 1, None] + offs, cube.width)
    out = cube.data[:, rows[:, :, None], cols[:, None, :]]  # d, m, s, s
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


# ---------------------------------------------------------------- sampling


def train_count(total: int, fraction: float) -> int:
    """``max(1, round(fraction * total))`` with halves rounded away from zero."""
    return max(1, int(math.floor(fraction * total + 0.5)))


@dataclass
class SampleSplit:
    train: dict[int, np.ndarray]  # class label -> [k, 2] (row, col)
    test: dict[int, np.ndarray]
    seed: int

    def _stack(self, part: dict) -> tuple[np.ndarray, np.ndarray]:
        keys = sorted(part)
        if not keys:
            return np.zeros((0, 2), np.int64), np.zeros(0, np.int64)
        coords = np.concatenate([part[k] for k in keys])
        labels = np.concatenate([np.full(len(part[k]), k, np.int64) for k in keys])
        return coords, labels

    def train_arrays(self):
        return self._stack(self.train)

    def test_arrays(self):
        return self._stack(self.test)

    def counts(self) -> dict[int, tuple[int, int]]:
        return {k: (len(self.train[k]), len(self.test[k])) for k in sorted(self.train)}


def stratified_split(gt: GroundTruth, fraction: float = 0.005, seed: int = 0) -> SampleSplit:
    """Per-class uniform draw without replacement of the training pixels."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = {}, {}
    for k in range(1, gt.n_classes + 1):
        coords = np.argwhere(gt.labels == k)  # row-major order
        if len(coords) == 0:
            raise ValueError(f"class {k} ({gt.class_names[k - 1]}) has no labeled pixels")
        n_train = train_count(len(coords), fraction)
        pick = np.zeros(len(coords), bool)
        pick[rng.choice(len(coords), size=n_train, replace=False)] = True
        train[k] = coords[pick]
        test[k] = coords[~pick]
    return SampleSplit(train, test, seed)


def batch_iter(
    split: SampleSplit,
    cube: HsiCube,
    gt: GroundTruth,
    batch_size: int,
    shuffle_seed: int | None,
    s: int,
    part: str = "train",
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(patches [b, d, s, s], labels [b])`` with 0-based labels.

    Order is a seeded permutation (or the split order when
    ``shuffle_seed`` is None); the last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    coords, labels = split.train_arrays() if part == "train" else split.test_arrays()
    order = np.arange(len(labels))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(labels))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield extract_patches(cube, coords[idx], s), labels[idx] - 1


# ---------------------------------------------------------------- synthetic scenes


def synth_scene(
    h: int = 32,
    w: int = 32,
    d: int = 20,
    n_classes: int = 4,
    noise_sigma: float = 0.02,
    seed: int = 7,
    out_dir=None,
) -> tuple[HsiCube, GroundTruth, Path | None]:
    """Voronoi-partitioned scene with one smooth spectral signature per class.

    Values are rounded through float32 so the in-memory scene equals
    what :func:`write_scene` + :func:`load_cube` give back. With
    ``out_dir`` the scene is also written there and the manifest path
    returned as the third element (else ``None``).
    """
    if min(h, w, d) < 1:
        raise ValueError("scene extents must be positive")
    if n_classes < 1 or n_classes > h * w:
        raise ValueError(f"cannot place {n_classes} classes on a {h}x{w} grid")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)

    sites = rng.choice(h * w, size=n_classes, replace=False)
    sr, sc = np.divmod(sites, w)
    rr, cc = np.mgrid[0:h, 0:w]
    dist = (rr[None] - sr[:, None, None]) ** 2 + (cc[None] - sc[:, None, None]) ** 2
    labels = np.argmin(dist, axis=0) + 1  # each site owns itself at distance 0

    band = np.arange(d, dtype=np.float64)
    signatures = np.zeros((n_classes, d))
    for k in range(n_classes):
        for _ in range(rng.integers(2, 4)):
            amp = rng.uniform(0.3, 1.0)
            mu = rng.uniform(0, d - 1)
            width = rng.uniform(max(d / 10, 0.5), max(d / 4, 1.0))
            signatures[k] += amp * np.exp(-0.5 * ((band - mu) / width) ** 2)
    if n_classes > 1:
        gaps = [
            np.linalg.norm(signatures[i] - signatures[j])
            for i in range(n_classes)
            for j in range(i + 1, n_classes)
        ]
        if np.mean(gaps) <= 5 * noise_sigma:
            raise ValueError(
                f"class signatures too close for sigma={noise_sigma} "
                f"(mean separation {np.mean(gaps):.3g})"
            )

    cube = signatures[labels - 1].transpose(2, 0, 1)
    if noise_sigma > 0:
        cube = cube + rng.normal(0.0, noise_sigma, cube.shape)
    cube = cube.astype("<f4").astype(np.float64)
    names = [f"class_{k}" for k in range(1, n_classes + 1)]
    hsi, gt = HsiCube(cube), GroundTruth(labels, names, default_palette(n_classes))
    manifest = write_scene(hsi, gt, out_dir) if out_dir is not None else None
    return hsi, gt, manifest

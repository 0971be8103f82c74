"""Confusion-matrix metrics, report formatting and PPM classification maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import GroundTruth, HsiCube, SampleSplit, extract_patches
from .kvtext import dump_kv
from .model import CMTNet, predict
from .tensor import Tensor, no_grad


def confusion(true_labels, pred_labels, n: int) -> np.ndarray:
    """``n x n`` counts, rows = true class, columns = predicted (0-based labels)."""
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(pred_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"{t.size} true labels vs {p.size} predictions")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    return np.bincount(t * n + p, minlength=n * n).reshape(n, n)


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray  # NaN for classes absent from the evaluated set

    def to_dict(self) -> dict[str, str]:
        out = {"oa": repr(self.oa), "aa": repr(self.aa), "kappa": repr(self.kappa)}
        for i, acc in enumerate(self.per_class, 1):
            out[f"class_{i}"] = repr(float(acc))
        return out


def metrics(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    diag = np.diag(cm)
    oa = diag.sum() / total
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, diag / rows, np.nan)
    aa = float(np.mean(per_class[rows > 0]))
    pe = float((rows * cols).sum() / total**2)
    if pe == 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    return MetricsReport(float(oa), aa, float(kappa), per_class)


def format_report(report: MetricsReport, class_names=None, title: str = "") -> str:
    n = len(report.per_class)
    names = list(class_names) if class_names else [f"class_{i}" for i in range(1, n + 1)]
    width = max([len(x) for x in names] + [8])
    lines = [title] if title else []
    lines.append(f"{'NO.':>4}  {'Class':<{width}}  {'Acc(%)':>8}")
    for i, (name, acc) in enumerate(zip(names, report.per_class), 1):
        cell = "-" if np.isnan(acc) else f"{100 * acc:.2f}"
        lines.append(f"{i:>4}  {name:<{width}}  {cell:>8}")
    lines.append(f"{'':>4}  {'OA(%)':<{width}}  {100 * report.oa:>8.2f}")
    lines.append(f"{'':>4}  {'AA(%)':<{width}}  {100 * report.aa:>8.2f}")
    lines.append(f"{'':>4}  {'k x 100':<{width}}  {100 * report.kappa:>8.2f}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, path) -> None:
    Path(path).write_text(dump_kv(report.to_dict()))


# ---------------------------------------------------------------- maps


def _rgb(hex_colour: str) -> tuple[int, int, int]:
    h = hex_colour.strip().lstrip("#")
    if len(h) != 6:
        raise ValueError(f"bad colour {hex_colour!r}")
    return int(h[0:2], 16), int(h[2:4], 16), int(h[4:6], 16)


def render_map(raster, palette, path=None) -> np.ndarray:
    """Colour a label raster (0 = black) and optionally write it as binary PPM.

    Returns the ``[h, w, 3]`` uint8 image.
    """
    raster = np.asarray(raster, dtype=np.int64)
    if raster.ndim != 2:
        raise ValueError("raster must be 2-D")
    lut = np.zeros((len(palette) + 1, 3), dtype=np.uint8)
    for i, c in enumerate(palette, 1):
        lut[i] = _rgb(c) if isinstance(c, str) else c
    if raster.min(initial=0) < 0 or raster.max(initial=0) > len(palette):
        raise ValueError("palette does not cover every class in the raster")
    img = lut[raster]
    if path is not None:
        h, w = raster.shape
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return img


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ValueError("only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1 :]
    if len(body) != 3 * w * h:
        raise ValueError("PPM payload size mismatch")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------- model evaluation


def predict_pixels(model: CMTNet, cube: HsiCube, coords, batch_size: int = 100) -> np.ndarray:
    """Eval-mode 0-based predictions for ``[m, 2]`` pixel coordinates."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    s = model.config.patch_size
    preds = np.empty(len(coords), dtype=np.int64)
    with no_grad():
        for start in range(0, len(coords), batch_size):
            chunk = coords[start : start + batch_size]
            out = model.forward(Tensor(extract_patches(cube, chunk, s)), "eval")
            preds[start : start + len(chunk)] = predict(out)
    return preds


def evaluate(
    model: CMTNet,
    cube: HsiCube,
    gt: GroundTruth,
    split: SampleSplit,
    batch_size: int = 100,
) -> tuple[MetricsReport, np.ndarray]:
    """Metrics over the test pixels plus a prediction raster.

    The raster holds 1-based predicted classes at every labeled pixel
    and 0 elsewhere.
    """
    coords = np.argwhere(gt.labels > 0)
    preds = predict_pixels(model, cube, coords, batch_size)
    raster = np.zeros_like(gt.labels)
    raster[coords[:, 0], coords[:, 1]] = preds + 1
    tc, tl = split.test_arrays()
    cm = confusion(tl - 1, raster[tc[:, 0], tc[:, 1]] - 1, gt.n_classes)
    return metrics(cm), raster

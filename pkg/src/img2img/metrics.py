"""Evaluation statistics that need no trained external model."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

LAB_BINS = 64
LAB_RANGES = {"L": (0.0, 100.0), "a": (-110.0, 110.0), "b": (-110.0, 110.0)}
LAB_CHANNELS = ("L", "a", "b")

# sRGB (linear) -> CIE XYZ, D65
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0


def _as_array(img) -> np.ndarray:
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def srgb_to_lab(image) -> np.ndarray:
    """[..., 3, H, W] sRGB in [-1, 1] -> CIELAB (D65, 2 degree observer), same layout."""
    rgb = _as_array(image)
    if rgb.ndim < 3 or rgb.shape[-3] != 3:
        raise ShapeError(f"srgb_to_lab expects 3 channels in axis -3, got shape {rgb.shape}")
    v = np.clip((rgb + 1.0) / 2.0, 0.0, 1.0)
    lin = np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)
    xyz = np.einsum("ij,...jhw->...ihw", _RGB_TO_XYZ, lin)
    t = xyz / D65_WHITE[:, None, None]
    f = np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0, :, :], f[..., 1, :, :], f[..., 2, :, :]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-3)


@dataclass
class LabHistogram:
    channel: str
    edges: np.ndarray
    probs: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def log_prob(self, floor: float = 1e-12) -> np.ndarray:
        return np.log(np.maximum(self.probs, floor))

    def plot_data(self) -> list[tuple[float, float]]:
        """(bin center, log probability) pairs."""
        return [(float(c), float(lp)) for c, lp in zip(self.centers, self.log_prob())]


def lab_marginal_hist(images, channel: str, bins: int = LAB_BINS) -> LabHistogram:
    """Pooled, normalized histogram of one Lab channel over all pixels of ``images``.

    ``images`` is one [3, H, W] image, a [N, 3, H, W] stack or a list of images.
    Values outside the fixed channel range land in the edge bins.
    """
    if channel not in LAB_RANGES:
        raise ValueError(f"channel must be one of {LAB_CHANNELS}")
    if isinstance(images, (list, tuple)):
        if not images:
            raise ValueError("need at least one image")
        vals = np.concatenate([srgb_to_lab(im)[..., LAB_CHANNELS.index(channel), :, :].ravel() for im in images])
    else:
        vals = srgb_to_lab(images)[..., LAB_CHANNELS.index(channel), :, :].ravel()
    lo, hi = LAB_RANGES[channel]
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(np.clip(vals, lo, hi), bins=edges)
    return LabHistogram(channel, edges, counts / counts.sum())


def hist_intersection(p: LabHistogram, q: LabHistogram) -> float:
    if p.channel != q.channel or p.edges.shape != q.edges.shape or not np.array_equal(p.edges, q.edges):
        raise ValueError("histograms use different binning")
    return float(np.minimum(p.probs, q.probs).sum())


def lab_intersections(pred_images, gt_images, bins: int = LAB_BINS) -> dict[str, float]:
    return {c: hist_intersection(lab_marginal_hist(pred_images, c, bins), lab_marginal_hist(gt_images, c, bins))
            for c in LAB_CHANNELS}


# -- label maps ---------------------------------------------------------------

@dataclass
class ClassPalette:
    ids: list[int]
    colors: np.ndarray  # [K, 3] uint8-valued RGB

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if not self.ids or len(self.ids) != len(self.colors):
            raise ValueError("palette needs one color per class id and at least one class")
        if len({tuple(c) for c in self.colors}) != len(self.colors):
            raise ValueError("palette colors must be pairwise distinct")
        order = np.argsort(self.ids, kind="stable")
        self.ids = [int(self.ids[i]) for i in order]
        self.colors = self.colors[order]

    @classmethod
    def read(cls, path: str | Path) -> ClassPalette:
        """Plain text, one ``id r g b`` line per class, ``#`` comments."""
        ids, colors = [], []
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise DataError(f"{path}: {e.strerror or e}") from e
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 4:
                raise DataError(f"{path}:{n}: expected 'id r g b'")
            ids.append(int(parts[0]))
            colors.append([int(p) for p in parts[1:]])
        return cls(ids, np.array(colors))

    def write(self, path: str | Path) -> None:
        lines = [f"{i} {int(c[0])} {int(c[1])} {int(c[2])}" for i, c in zip(self.ids, self.colors)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def quantize_to_labels(image, palette: ClassPalette) -> np.ndarray:
    """Nearest palette color (Euclidean in 0..255 RGB) per pixel; ties go to the lowest class id."""
    rgb = (_as_array(image) + 1.0) * 127.5
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"expected [3, H, W] image, got {rgb.shape}")
    d = ((rgb[None] - palette.colors[:, :, None, None]) ** 2).sum(axis=1)  # [K, H, W]
    return np.asarray(palette.ids)[np.argmin(d, axis=0)]


def render_labels(labels: np.ndarray, palette: ClassPalette) -> np.ndarray:
    lut = {cid: k for k, cid in enumerate(palette.ids)}
    idx = np.vectorize(lut.__getitem__)(labels)
    return (palette.colors[idx].transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


@dataclass
class SegMetrics:
    per_pixel_acc: float
    per_class_acc: float
    class_iou: float
    per_class: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"per_pixel_acc": self.per_pixel_acc, "per_class_acc": self.per_class_acc,
                "class_iou": self.class_iou, "per_class": self.per_class}


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    idx = gt.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def seg_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> SegMetrics:
    """Per-pixel accuracy, mean class recall and mean class IOU.

    Class means run over classes present in the ground truth only.
    """
    cm = confusion_matrix(pred, gt, n_classes)
    total = cm.sum()
    if total == 0:
        raise ShapeError("empty label maps")
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    present = gt_count > 0
    recall = np.divide(tp, gt_count, out=np.zeros_like(tp), where=present)
    union = gt_count + pred_count - tp
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    table = [{"class": c, "gt_pixels": int(gt_count[c]), "recall": float(recall[c]), "iou": float(iou[c])}
             for c in range(n_classes) if present[c]]
    return SegMetrics(float(tp.sum() / total), float(recall[present].mean()), float(iou[present].mean()), table)


def l1_error(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_error needs equal shapes, got {a.shape} and {b.shape}")
    return float(np.abs(a - b).mean())

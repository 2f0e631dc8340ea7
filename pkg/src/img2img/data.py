"""Paired-image datasets, augmentation and the PNG boundary.

Images live in memory as float32 arrays of shape [C, H, W] with values in
[-1, 1]; 8-bit pixels map through v / 127.5 - 1.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError, ImageDecodeError, UnsupportedDepthError
from .tensor import RngState
from .train import STREAM_SPLIT, AugmentConfig

LAYOUTS = ("side_by_side", "two_folders")
MANIFEST_MAGIC = "# img2img manifest v1"
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass
class PairedSample:
    x: np.ndarray
    y: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.x.shape[1:] != self.y.shape[1:]:
            raise DataError(f"sample {self.id!r}: x {self.x.shape} and y {self.y.shape} differ in H, W")


def u8_to_unit(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def unit_to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(a, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# -- PNG ----------------------------------------------------------------------

def png_decode(data: bytes) -> np.ndarray:
    """Decode an 8-bit grayscale or RGB(A) PNG to a [C, H, W] array in [-1, 1]."""
    if len(data) < 33 or data[:8] != PNG_SIGNATURE or data[12:16] != b"IHDR":
        raise ImageDecodeError("malformed PNG: bad signature or missing IHDR")
    bit_depth, color_type = data[24], data[25]
    # palette images carry 8-bit samples regardless of index depth
    if bit_depth != 8 and not (color_type == 3 or (color_type == 0 and bit_depth < 8)):
        raise UnsupportedDepthError(f"only 8-bit PNGs are supported (bit depth {bit_depth})")
    try:
        img = Image.open(io.BytesIO(data))
        if img.format != "PNG":
            raise ImageDecodeError(f"not a PNG stream (got {img.format})")
        img.load()
    except ImageDecodeError:
        raise
    except Exception as e:
        raise ImageDecodeError(f"malformed PNG: {e}") from e
    if img.mode in ("1", "L", "LA"):
        arr = np.asarray(img.convert("L"))[None]
    elif img.mode in ("RGB", "RGBA", "P", "PA"):
        arr = np.asarray(img.convert("RGB")).transpose(2, 0, 1)
    else:
        raise UnsupportedDepthError(f"unsupported PNG mode {img.mode}")
    return u8_to_unit(arr)


def png_encode(image: np.ndarray) -> bytes:
    """Encode a [C, H, W] (C in {1, 3}) array with values in [-1, 1] as an 8-bit PNG."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DataError(f"png_encode expects [1|3, H, W], got {image.shape}")
    u8 = unit_to_u8(image)
    img = Image.fromarray(u8[0], "L") if u8.shape[0] == 1 else Image.fromarray(u8.transpose(1, 2, 0), "RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def read_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror or e}") from e
    try:
        return png_decode(raw)
    except ImageDecodeError as e:
        raise type(e)(f"{path}: {e}") from e


def write_png(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(png_encode(image))


def triptych(x: np.ndarray, y: np.ndarray, out: np.ndarray) -> np.ndarray:
    """input | target | output side by side, grayscale panels expanded to RGB when mixed."""
    panels = [x, y, out]
    if len({p.shape[0] for p in panels}) > 1:
        panels = [np.repeat(p, 3, axis=0) if p.shape[0] == 1 else p[:3] for p in panels]
    return np.concatenate(panels, axis=2)


# -- paired samples -----------------------------------------------------------

def load_paired(path: str | Path, layout: str = "side_by_side") -> PairedSample:
    """side_by_side: one A|B image split at width/2. two_folders: ``path`` is
    ``<root>/A/<name>`` and the target is read from ``<root>/B/<name>``."""
    path = Path(path)
    if layout == "side_by_side":
        img = read_png(path)
        w = img.shape[2]
        if w % 2:
            raise DataError(f"{path}: side-by-side image has odd width {w}")
        return PairedSample(img[:, :, : w // 2].copy(), img[:, :, w // 2:].copy(), path.stem)
    if layout == "two_folders":
        other = path.parent.parent / "B" / path.name
        return PairedSample(read_png(path), read_png(other), path.stem)
    raise DataError(f"unknown layout {layout!r}; choose from {LAYOUTS}")


def resize_bilinear(image: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    h, w = (size, size) if isinstance(size, int) else size
    if image.shape[1:] == (h, w):
        return image.copy()
    chans = [np.asarray(Image.fromarray(c.astype(np.float32), "F").resize((w, h), Image.BILINEAR)) for c in image]
    return np.stack(chans).astype(np.float32)


def jitter_and_mirror(s: PairedSample, cfg: AugmentConfig, rng: RngState) -> PairedSample:
    """Resize to ``load_size``, take one random ``crop_size`` crop and flip
    horizontally with probability 1/2; x and y always get the same transform."""
    x, y = s.x, s.y
    if cfg.enable_jitter:
        x, y = resize_bilinear(x, cfg.load_size), resize_bilinear(y, cfg.load_size)
        top = rng.integers(0, cfg.load_size - cfg.crop_size + 1)
        left = rng.integers(0, cfg.load_size - cfg.crop_size + 1)
        sl = (slice(None), slice(top, top + cfg.crop_size), slice(left, left + cfg.crop_size))
        x, y = x[sl], y[sl]
    if cfg.enable_mirror and rng.uniform() < 0.5:
        x, y = x[:, :, ::-1], y[:, :, ::-1]
    return PairedSample(np.ascontiguousarray(x), np.ascontiguousarray(y), s.id)


# -- manifests ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list[str]
    layout: str = "side_by_side"

    def paths(self) -> list[Path]:
        base = self.root / "A" if self.layout == "two_folders" else self.root
        return [base / e for e in self.entries]

    def load(self) -> list[PairedSample]:
        return [load_paired(p, self.layout) for p in self.paths()]

    def write(self, path: str | Path) -> None:
        lines = [MANIFEST_MAGIC, f"# root={self.root}", f"# layout={self.layout}", f"# split={self.split}"]
        Path(path).write_text("\n".join(lines + self.entries) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise DataError(f"{path}: {e.strerror or e}") from e
        meta, entries = {}, []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "=" in line:
                    k, v = line[1:].split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            entries.append(line)
        root = Path(meta.get("root", path.parent))
        return cls(root, meta.get("split", "train"), entries, meta.get("layout", "side_by_side"))


def list_images(root: Path, layout: str) -> list[str]:
    if layout == "side_by_side":
        return sorted(p.name for p in root.glob("*.png"))
    if layout == "two_folders":
        a = {p.name for p in (root / "A").glob("*.png")}
        b = {p.name for p in (root / "B").glob("*.png")}
        return sorted(a & b)
    raise DataError(f"unknown layout {layout!r}; choose from {LAYOUTS}")


def split_manifests(root: str | Path, layout: str = "side_by_side", split_frac: float = 0.8,
                    seed: int = 0, validate: bool = True) -> tuple[DatasetManifest, DatasetManifest]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    if not 0.0 <= split_frac <= 1.0:
        raise DataError(f"split fraction must be in [0, 1], got {split_frac}")
    names = list_images(root, layout)
    if not names:
        raise DataError(f"{root}: no PNG images found for layout {layout}")
    if validate:
        bad = []
        for name in names:
            try:
                load_paired((root / "A" / name) if layout == "two_folders" else root / name, layout)
            except DataError as e:
                bad.append(f"{name} ({e})")
        if bad:
            raise DataError(f"{len(bad)} unreadable file(s): " + "; ".join(bad))
    order = RngState(seed, (STREAM_SPLIT,)).permutation(len(names))
    n_train = int(round(split_frac * len(names)))
    train = sorted(names[i] for i in order[:n_train])
    test = sorted(names[i] for i in order[n_train:])
    return DatasetManifest(root, "train", train, layout), DatasetManifest(root, "test", test, layout)


class PairedDataset(Sequence):
    """Samples loaded lazily from a manifest and cached."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._paths = manifest.paths()
        self._cache: dict[int, PairedSample] = {}

    def __len__(self) -> int:
        return len(self._paths)

    def __getitem__(self, i: int) -> PairedSample:
        if i not in self._cache:
            self._cache[i] = load_paired(self._paths[i], self.manifest.layout)
        return self._cache[i]

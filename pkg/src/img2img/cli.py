"""Command-line interface: prepare, train, infer, eval, arch.

Every command exits 0 on success. Failures print one line to stderr,
``error: <ErrorClass>: <message>``, and exit 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .arch import (PATCH_SIZES, DiscriminatorConfig, GeneratorConfig, describe_discriminator, describe_generator,
                   describe_preset, parse_arch, preset_names, receptive_field)
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

log = logging.getLogger("img2img")

OUTPUT_ROOT_ENV = "IMG2IMG_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- run configuration --------------------------------------------------------

@dataclass
class RunConfig:
    task: str = "run"
    dataset_root: str = ""
    layout: str = "side_by_side"
    manifest: str = ""
    generator: str = "unet"
    depth: int = 8
    base_filters: int = 64
    patch: int = 70
    d_base_filters: int = 64
    objective: str = "l1+cgan"
    lam: float = 100.0
    batch_size: int = 1
    iterations: int = 1000
    seed: int = 0
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    augment: bool = True
    crop_size: int = 0  # 0: the image size
    output_dir: str = ""
    checkpoint_every: int = 0
    log_wall_time: bool = True

    _ALIASES = {"lambda": "lam"}

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: f.type for f in dataclasses.fields(cls)}

    def set(self, key: str, raw) -> None:
        key = self._ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        types = self.field_types()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if not isinstance(raw, str):
                value = raw
            elif kind == "bool":
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                value = raw.lower() in ("true", "1", "yes")
            elif kind == "int":
                value = int(raw)
            elif kind == "float":
                value = float(raw)
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {key} (expected {kind})") from None
        setattr(self, key, value)

    def to_text(self) -> str:
        lines = ["# img2img run config"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{'lambda' if f.name == 'lam' else f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> RunConfig:
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected key = value")
            k, v = line.split("=", 1)
            try:
                cfg.set(k.strip(), v.strip())
            except ConfigError as e:
                raise ConfigError(f"{source}:{n}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror or e}") from e

    def validate(self) -> None:
        from .train import parse_objective

        if not self.dataset_root and not self.manifest:
            raise ConfigError("dataset_root or manifest is required")
        if self.generator not in ("unet", "encoder_decoder"):
            raise ConfigError(f"generator must be unet or encoder_decoder, got {self.generator!r}")
        if self.patch not in PATCH_SIZES:
            raise ConfigError(f"patch must be one of {PATCH_SIZES}, got {self.patch}")
        parse_objective(self.objective)
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        for k in ("depth", "base_filters", "d_base_filters", "batch_size"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.iterations < 0 or self.checkpoint_every < 0 or self.crop_size < 0:
            raise ConfigError("iterations, checkpoint_every and crop_size must be >= 0")
        if self.crop_size and self.crop_size % 2 ** self.depth:
            raise ConfigError(f"crop_size {self.crop_size} must be a multiple of 2^depth = {2 ** self.depth}")

    def run_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / self.task


def code_hash() -> str:
    """Git-style blob sha1 over the version string and every package source file."""
    root = Path(__file__).resolve().parent
    body = f"img2img {__version__}\n".encode()
    for p in sorted(root.glob("*.py")):
        body += p.name.encode() + b"\0" + p.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# -- helpers ------------------------------------------------------------------

def _dataset(cfg: RunConfig):
    from .data import DatasetManifest, PairedDataset, list_images

    if cfg.manifest:
        manifest = DatasetManifest.read(cfg.manifest)
    else:
        root = Path(cfg.dataset_root)
        if not root.is_dir():
            raise DataError(f"{root}: not a directory")
        prepared = root / "train.manifest"
        if prepared.exists():
            manifest = DatasetManifest.read(prepared)
        else:
            manifest = DatasetManifest(root, "train", list_images(root, cfg.layout), cfg.layout)
    if not manifest.entries:
        raise DataError("dataset is empty")
    return PairedDataset(manifest)


def _train_config(cfg: RunConfig, sample):
    from .train import AugmentConfig, ObjectiveConfig, TrainConfig

    size = sample.x.shape[1]
    if sample.x.shape[1] != sample.x.shape[2]:
        raise ShapeError(f"training images must be square, got {sample.x.shape[1]}x{sample.x.shape[2]}")
    crop = cfg.crop_size or size
    if crop % 2 ** cfg.depth:
        raise ShapeError(f"training size {crop} must be a multiple of 2^depth = {2 ** cfg.depth}")
    augment = AugmentConfig.for_crop(crop) if cfg.augment else None
    if augment is None and crop != size:
        raise ConfigError("crop_size differs from the image size but augmentation is off")
    gen = GeneratorConfig(cfg.generator, cfg.depth, sample.x.shape[0], sample.y.shape[0], cfg.base_filters)
    disc = DiscriminatorConfig(cfg.patch, base_filters=cfg.d_base_filters)
    return TrainConfig(gen, disc, ObjectiveConfig(cfg.objective, cfg.lam), augment, cfg.batch_size,
                       cfg.iterations, cfg.seed, cfg.lr, cfg.beta1, cfg.beta2, cfg.checkpoint_every,
                       cfg.log_wall_time)


def _load_generator(path: str | Path):
    from .checkpoint import load_checkpoint
    from .tensor import RngState
    from .train import STREAM_INIT_G, STREAM_NOISE, TrainConfig
    from .arch import Generator

    ckpt = load_checkpoint(path)
    try:
        tcfg = TrainConfig.from_dict(ckpt.config)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"{path}: checkpoint config is incomplete ({e})") from e
    G = Generator(tcfg.generator, RngState(tcfg.seed, (STREAM_INIT_G,)), RngState(tcfg.seed, (STREAM_NOISE,)))
    G.load_state_dict({k[2:]: v for k, v in ckpt.tensors.items() if k.startswith("G.")})
    return G, tcfg


def _fit_channels(img: np.ndarray, channels: int, what: str) -> np.ndarray:
    if img.shape[0] == channels:
        return img
    if img.shape[0] == 1 and channels == 3:
        return np.repeat(img, 3, axis=0)
    raise ShapeError(f"{what} has {img.shape[0]} channels, generator expects {channels}")


def _check_size(h: int, w: int, depth: int) -> None:
    m = 2 ** depth
    if h % m or w % m:
        raise ShapeError(f"image size {h}x{w} must be a multiple of 2^depth = {m} in both dimensions")


def _read_input(path: Path, layout: str, size: int | None):
    from .data import load_paired, read_png, resize_bilinear

    if layout == "single":
        x, y = read_png(path), None
    else:
        s = load_paired(path, layout)
        x, y = s.x, s.y
    if size:
        x = resize_bilinear(x, size)
        y = resize_bilinear(y, size) if y is not None else None
    return x, y


def _png_files(p: Path) -> list[Path]:
    if p.is_dir():
        files = sorted(p.glob("*.png"))
        if not files:
            raise DataError(f"{p}: no PNG files")
        return files
    if not p.exists():
        raise DataError(f"{p}: no such file")
    return [p]


# -- commands -----------------------------------------------------------------

def cmd_prepare(args) -> int:
    from .data import split_manifests

    train, test = split_manifests(args.root, args.layout, args.split_frac, args.seed)
    out = Path(args.out_dir) if args.out_dir else Path(args.root)
    out.mkdir(parents=True, exist_ok=True)
    train.write(out / "train.manifest")
    test.write(out / "test.manifest")
    print(f"train: {len(train.entries)}  test: {len(test.entries)}  -> {out}")
    return 0


TRAIN_FLAGS = {
    "task": str, "dataset_root": str, "layout": str, "manifest": str, "generator": str, "depth": int,
    "base_filters": int, "patch": int, "d_base_filters": int, "objective": str, "lambda": float,
    "batch_size": int, "iterations": int, "seed": int, "lr": float, "beta1": float, "beta2": float,
    "crop_size": int, "output_dir": str, "checkpoint_every": int,
}


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import train_loop

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key in TRAIN_FLAGS:
        v = getattr(args, key.replace("-", "_"), None)
        if v is not None:
            cfg.set(key, v)
    if args.no_augment:
        cfg.augment = False
    if args.no_wall_time:
        cfg.log_wall_time = False
    cfg.validate()
    dataset = _dataset(cfg)
    tcfg = _train_config(cfg, dataset[0])
    resume = load_checkpoint(args.resume) if args.resume else None

    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    (run / "run_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    (run / "run_info.json").write_text(json.dumps(
        {"seed": cfg.seed, "code_hash": code_hash(), "version": __version__, "train_config": tcfg.to_dict()},
        indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("run dir %s, %d training pairs", run, len(dataset))
    result = train_loop(dataset, tcfg, run, resume=resume, iterations=cfg.iterations)
    if cfg.checkpoint_every == 0 or result.trainer.step % cfg.checkpoint_every:
        from .checkpoint import save_checkpoint

        final = run / f"ckpt_{result.trainer.step:07d}.bin"
        save_checkpoint(result.trainer.to_checkpoint(), final)
    last = result.rows[-1] if result.rows else None
    built = "yes" if result.trainer.D is not None else "no"
    msg = f"steps: {result.trainer.step}  discriminator: {built}"
    if last:
        msg += f"  loss_d={last['loss_d']:.4f} loss_g_adv={last['loss_g_adv']:.4f} loss_g_l1={last['loss_g_l1']:.4f}"
    print(msg)
    print(f"run dir: {run}")
    return 0


def cmd_infer(args) -> int:
    from .data import write_png
    from .metrics import l1_error
    from .train import translate

    G, tcfg = _load_generator(args.checkpoint)
    seed = tcfg.seed if args.seed is None else args.seed
    inputs = _png_files(Path(args.input))
    out = Path(args.output)
    if len(inputs) > 1 or out.suffix.lower() != ".png":
        out.mkdir(parents=True, exist_ok=True)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        x, _ = _read_input(path, args.layout, args.size)
        x = _fit_channels(x, tcfg.generator.in_channels, str(path))
        _check_size(x.shape[1], x.shape[2], tcfg.generator.depth)
        y = translate(G, Tensor(x[None]), seed).data[0]
        dest = out / path.name if out.is_dir() else out
        write_png(dest, y)
        line = f"{path.name}: {x.shape[1]}x{x.shape[2]} -> {dest}"
        if args.compare_seed is not None:
            y2 = translate(G, Tensor(x[None]), args.compare_seed).data[0]
            line += f"  l1(seed {seed}, seed {args.compare_seed}) = {l1_error(y, y2):.6f}"
        print(line)
    return 0


def _eval_pairs(args):
    """Yield (id, prediction, target) arrays in [-1, 1]."""
    from .data import DatasetManifest, read_png
    from .train import translate

    if args.pred_dir:
        if not args.gt_dir:
            raise ConfigError("--pred-dir needs --gt-dir")
        for p in _png_files(Path(args.pred_dir)):
            g = Path(args.gt_dir) / p.name
            if not g.exists():
                raise DataError(f"{g}: missing ground truth for {p.name}")
            yield p.stem, read_png(p), read_png(g)
        return
    if not (args.checkpoint and args.manifest):
        raise ConfigError("eval needs --checkpoint and --manifest, or --pred-dir and --gt-dir")
    G, tcfg = _load_generator(args.checkpoint)
    seed = tcfg.seed if args.seed is None else args.seed
    manifest = DatasetManifest.read(args.manifest)
    for s, path in zip(manifest.load(), manifest.paths()):
        x = _fit_channels(s.x, tcfg.generator.in_channels, str(path))
        _check_size(x.shape[1], x.shape[2], tcfg.generator.depth)
        yield s.id, translate(G, Tensor(x[None]), seed).data[0], s.y


def cmd_eval(args) -> int:
    from .metrics import (LAB_CHANNELS, ClassPalette, l1_error, lab_marginal_hist, hist_intersection,
                          quantize_to_labels, seg_metrics)

    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(wanted) - {"l1", "hist", "seg"}
    if unknown or not wanted:
        raise ConfigError(f"unknown metric(s) {sorted(unknown)}; choose from l1, hist, seg")
    palette = None
    if "seg" in wanted:
        if not args.palette:
            raise ConfigError("seg metrics need --palette")
        palette = ClassPalette.read(args.palette)

    preds, gts, l1s = [], [], []
    for _, pred, gt in _eval_pairs(args):
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        preds.append(pred)
        gts.append(gt)
        l1s.append(l1_error(pred, gt))
    if not preds:
        raise DataError("nothing to evaluate")

    result: dict = {"n_images": len(preds)}
    lines = [f"images: {len(preds)}"]
    if "l1" in wanted:
        result["l1"] = float(np.mean(l1s))
        lines.append(f"l1: {result['l1']:.6f}")
    plots = {}
    if "hist" in wanted:
        if preds[0].shape[0] != 3:
            raise ShapeError("hist metrics need RGB images")
        result["hist_intersection"] = {}
        for c in LAB_CHANNELS:
            hp, hg = lab_marginal_hist(preds, c), lab_marginal_hist(gts, c)
            result["hist_intersection"][c] = hist_intersection(hp, hg)
            plots[f"hist_pred_{c}"], plots[f"hist_gt_{c}"] = hp.plot_data(), hg.plot_data()
        hi = result["hist_intersection"]
        lines.append("hist intersection: " + "  ".join(f"{c}={hi[c]:.4f}" for c in LAB_CHANNELS))
    if "seg" in wanted:
        n_classes = max(palette.ids) + 1
        pl = np.stack([quantize_to_labels(p, palette) for p in preds])
        gl = np.stack([quantize_to_labels(g, palette) for g in gts])
        sm = seg_metrics(pl, gl, n_classes)
        result["seg"] = sm.as_dict()
        lines.append(f"per-pixel acc: {sm.per_pixel_acc:.4f}  per-class acc: {sm.per_class_acc:.4f}  "
                     f"class IOU: {sm.class_iou:.4f}")
        lines.append(f"{'class':>5} {'gt_pixels':>10} {'recall':>8} {'iou':>8}")
        lines.extend(f"{r['class']:>5} {r['gt_pixels']:>10} {r['recall']:>8.4f} {r['iou']:>8.4f}"
                     for r in sm.per_class)
    text = "\n".join(lines)
    print(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "metrics.txt").write_text(text + "\n", encoding="utf-8")
        for name, rows in plots.items():
            body = "bin_center,log_prob\n" + "".join(f"{c!r},{lp!r}\n" for c, lp in rows)
            (out / f"{name}.csv").write_text(body, encoding="utf-8")
    return 0


def cmd_arch(args) -> int:
    if bool(args.spec) == bool(args.preset):
        raise UsageError("give exactly one of --spec or --preset")
    if args.preset:
        report = describe_preset(args.preset, args.input_size, args.in_channels, args.out_channels,
                                 args.base_filters, args.depth)
    else:
        in_ch = args.in_channels if args.role != "discriminator" else args.in_channels + args.out_channels
        spec = parse_arch(args.spec, args.role, in_ch, args.kernel, args.out_channels)
        if args.role == "discriminator":
            report = describe_discriminator(spec, args.input_size, args.spec)
        else:
            from .arch import ArchReport, _rows, output_shapes, param_count

            if args.input_size % 2 ** len(spec.all_layers()):
                raise ShapeError(f"input size {args.input_size} must be a multiple of "
                                 f"2^{len(spec.all_layers())} for this stack")
            shapes = output_shapes(spec, (1, in_ch, args.input_size, args.input_size))
            report = ArchReport(args.spec, _rows(spec, shapes, args.role), param_count(spec),
                                receptive_field(spec).size if args.role == "encoder" else None)
    print(json.dumps(report.as_dict(), indent=2) if args.json else report.as_text())
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="img2img", description="Paired image-to-image translation with conditional GANs.")
    p.add_argument("--version", action="version", version=f"img2img {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="split a folder of pairs into train/test manifests")
    s.add_argument("--root", required=True)
    s.add_argument("--layout", choices=("side_by_side", "two_folders"), default="side_by_side")
    s.add_argument("--split-frac", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", help="where manifests go (default: the root)")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a generator (and discriminator)")
    s.add_argument("--config", help="key = value run config; flags override it")
    for key, kind in TRAIN_FLAGS.items():
        s.add_argument("--" + key.replace("_", "-"), dest=key, type=kind)
    s.add_argument("--no-augment", action="store_true", help="disable jitter and mirroring")
    s.add_argument("--no-wall-time", action="store_true", help="log wall_ms as 0 (byte-stable logs)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="translate images with a trained generator")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="PNG file or folder")
    s.add_argument("--output", required=True, help="PNG file or folder")
    s.add_argument("--size", type=int, help="resize inputs to SIZE x SIZE first")
    s.add_argument("--layout", choices=("single", "side_by_side", "two_folders"), default="single")
    s.add_argument("--seed", type=int, help="dropout noise seed (default: the training seed)")
    s.add_argument("--compare-seed", type=int, help="also run with this seed and report the L1 distance")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="L1, Lab histogram and segmentation metrics")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--pred-dir")
    s.add_argument("--gt-dir")
    s.add_argument("--metrics", default="l1,hist")
    s.add_argument("--palette", help="'id r g b' lines, needed for seg")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", help="write metrics.json, metrics.txt and histogram plot data here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("arch", help="inspect an architecture string or preset")
    s.add_argument("--spec")
    s.add_argument("--preset", choices=preset_names())
    s.add_argument("--role", choices=("discriminator", "encoder", "decoder"), default="discriminator")
    s.add_argument("--kernel", type=int, choices=(1, 4), default=4)
    s.add_argument("--input-size", type=int, default=256)
    s.add_argument("--in-channels", type=int, default=3)
    s.add_argument("--out-channels", type=int, default=3)
    s.add_argument("--base-filters", type=int, default=64)
    s.add_argument("--depth", type=int)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_arch)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: UsageError: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # one parseable line per failure
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(e, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())

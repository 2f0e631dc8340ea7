"""Objectives, Adam, and the alternating discriminator/generator protocol."""

from __future__ import annotations

import dataclasses
import enum
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .errors import ConfigError, NonFiniteError, ShapeError
from .tensor import RngState, Tensor, backward, clamp, log, no_grad, reduce_mean
from . import tensor as T

log_ = logging.getLogger(__name__)

PROB_EPS = 1e-7

# rng stream ids derived from the run seed
STREAM_INIT_G = 1
STREAM_INIT_D = 2
STREAM_NOISE = 3
STREAM_SHUFFLE = 4
STREAM_AUGMENT = 5
STREAM_INFER = 6
STREAM_SPLIT = 7


class Objective(str, enum.Enum):
    L1_ONLY = "L1_only"
    GAN = "GAN"
    CGAN = "cGAN"
    L1_PLUS_GAN = "L1_plus_GAN"
    L1_PLUS_CGAN = "L1_plus_cGAN"


OBJECTIVE_ALIASES = {
    "l1": Objective.L1_ONLY,
    "gan": Objective.GAN,
    "cgan": Objective.CGAN,
    "l1+gan": Objective.L1_PLUS_GAN,
    "l1+cgan": Objective.L1_PLUS_CGAN,
}


def parse_objective(name: str) -> Objective:
    key = name.strip()
    if key.lower() in OBJECTIVE_ALIASES:
        return OBJECTIVE_ALIASES[key.lower()]
    try:
        return Objective(key)
    except ValueError:
        raise ConfigError(f"unknown objective {name!r}; choose from {sorted(OBJECTIVE_ALIASES)}") from None


@dataclass
class ObjectiveConfig:
    mode: Objective = Objective.L1_PLUS_CGAN
    lam: float = 100.0

    def __post_init__(self):
        if not isinstance(self.mode, Objective):
            self.mode = parse_objective(self.mode)
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")

    @property
    def uses_l1(self) -> bool:
        return self.mode in (Objective.L1_ONLY, Objective.L1_PLUS_GAN, Objective.L1_PLUS_CGAN)

    @property
    def uses_gan(self) -> bool:
        return self.mode is not Objective.L1_ONLY

    @property
    def conditional(self) -> bool:
        return self.mode in (Objective.CGAN, Objective.L1_PLUS_CGAN)


# -- losses -----------------------------------------------------------------

def _check_probs(t: Tensor, what: str) -> None:
    d = t.data
    if not np.isfinite(d).all() or (d < 0).any() or (d > 1).any():
        raise ValueError(f"{what} must hold probabilities in [0, 1]")


def _safe(t: Tensor) -> Tensor:
    return clamp(t, PROB_EPS, 1.0 - PROB_EPS)


def loss_d(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-(1/2) [mean log D(real) + mean log(1 - D(fake))]: the halved discriminator objective."""
    _check_probs(d_real, "d_real")
    _check_probs(d_fake, "d_fake")
    real_term = reduce_mean(log(_safe(d_real)))
    fake_term = reduce_mean(log(1.0 - _safe(d_fake)))
    return (real_term + fake_term) * -0.5


def adversarial_loss_g(d_fake: Tensor) -> Tensor:
    """Non-saturating generator term -mean log D(fake)."""
    _check_probs(d_fake, "d_fake")
    return -reduce_mean(log(_safe(d_fake)))


def l1_loss(fake: Tensor, target: Tensor) -> Tensor:
    if fake.shape != target.shape:
        raise ShapeError(f"L1 needs equal shapes, got {fake.shape} and {target.shape}")
    return reduce_mean(T.abs(target - fake))


def loss_g(d_fake: Tensor | None, fake: Tensor, target: Tensor, cfg: ObjectiveConfig) -> Tensor:
    total = None
    if cfg.uses_gan:
        if d_fake is None:
            raise ValueError(f"objective {cfg.mode.value} needs discriminator output")
        total = adversarial_loss_g(d_fake)
    if cfg.uses_l1:
        l1 = l1_loss(fake, target) * cfg.lam
        total = l1 if total is None else total + l1
    return total


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], s: AdamState) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} at step {s.t + 1}")
    s.t += 1
    bc1 = 1.0 - s.beta1 ** s.t
    bc2 = 1.0 - s.beta2 ** s.t
    for name, p in params.items():
        g = grads.get(name)
        if name not in s.m:
            s.m[name] = np.zeros_like(p.data)
            s.v[name] = np.zeros_like(p.data)
        m, v = s.m[name], s.v[name]
        m *= s.beta1
        v *= s.beta2
        if g is not None:
            m += (1.0 - s.beta1) * g
            v += (1.0 - s.beta2) * (g * g)
        update = (s.lr / bc1) * m / (np.sqrt(v / bc2) + s.eps)
        p.data -= update.astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 0.0002, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- one training iteration ---------------------------------------------------

def stack_batch(batch) -> tuple[Tensor, Tensor]:
    if isinstance(batch, tuple) and len(batch) == 2 and not hasattr(batch[0], "x"):
        x, y = batch
        return T.as_tensor(x), T.as_tensor(y)
    xs = np.stack([s.x for s in batch])
    ys = np.stack([s.y for s in batch])
    return Tensor(xs), Tensor(ys)


def _disc_input(obj: ObjectiveConfig, x: Tensor) -> Tensor | None:
    return x if obj.conditional else None


def d_step(x: Tensor, y: Tensor, fake: Tensor, D: Discriminator, obj: ObjectiveConfig) -> Tensor:
    """Forward + backward of the discriminator loss; ``fake`` is detached first."""
    xc = _disc_input(obj, x)
    ld = loss_d(D(y, xc), D(fake.detach(), xc))
    backward(ld)
    return ld


def g_step(x: Tensor, y: Tensor, fake: Tensor, D: Discriminator | None, obj: ObjectiveConfig) -> dict:
    """Forward + backward of the generator loss. D's parameters are frozen meanwhile."""
    adv = None
    if obj.uses_gan:
        D.set_requires_grad(False)
    try:
        if obj.uses_gan:
            adv = adversarial_loss_g(D(fake, _disc_input(obj, x)))
        if obj.uses_l1:
            l1 = l1_loss(fake, y)
            total = l1 * obj.lam if adv is None else adv + l1 * obj.lam
            l1_val = l1.item()
        else:
            total = adv
            with no_grad():
                l1_val = l1_loss(fake.detach(), y).item()
        backward(total)
    finally:
        if obj.uses_gan:
            D.set_requires_grad(True)
    return {"loss_g_adv": adv.item() if adv is not None else 0.0, "loss_g_l1": l1_val, "loss_g": total.item()}


def train_step(batch, G: Generator, D: Discriminator | None, opt_G: Adam, opt_D: Adam | None,
               obj: ObjectiveConfig) -> dict:
    """One discriminator update (skipped for L1-only) followed by one generator update."""
    x, y = stack_batch(batch)
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeError(f"input {x.shape} and target {y.shape} disagree")
    fake = G(x)
    ld_val = 0.0
    if obj.uses_gan:
        if D is None or opt_D is None:
            raise ConfigError(f"objective {obj.mode.value} needs a discriminator")
        ld_val = d_step(x, y, fake, D, obj).item()
        opt_D.step()
    out = g_step(x, y, fake, D, obj)
    opt_G.step()
    out["loss_d"] = ld_val
    for k, v in out.items():
        if not np.isfinite(v):
            raise NonFiniteError(f"{k} became non-finite")
    return out


# -- configs and the loop -----------------------------------------------------

@dataclass
class AugmentConfig:
    enable_jitter: bool = True
    enable_mirror: bool = True
    load_size: int = 286
    crop_size: int = 256

    def __post_init__(self):
        if self.load_size < self.crop_size:
            raise ConfigError(f"load_size {self.load_size} must be >= crop_size {self.crop_size}")

    @classmethod
    def for_crop(cls, crop_size: int, jitter: bool = True, mirror: bool = True) -> AugmentConfig:
        """Keep the 286:256 load/crop ratio at any resolution (e.g. 64 -> 72)."""
        return cls(jitter, mirror, int(round(crop_size * 286 / 256)), crop_size)


@dataclass
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    augment: AugmentConfig | None = None
    batch_size: int = 1
    iterations: int = 100
    seed: int = 0
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    checkpoint_every: int = 0
    log_wall_time: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        # the objective decides whether D sees x
        self.discriminator.conditional = self.objective.conditional
        self.discriminator.x_channels = self.generator.in_channels
        self.discriminator.y_channels = self.generator.out_channels

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objective"]["mode"] = self.objective.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        aug = d.pop("augment", None)
        return cls(
            generator=GeneratorConfig(**d.pop("generator")),
            discriminator=DiscriminatorConfig(**d.pop("discriminator")),
            objective=ObjectiveConfig(parse_objective(d["objective"]["mode"]), d.pop("objective")["lam"]),
            augment=AugmentConfig(**aug) if aug else None,
            **d,
        )


METRIC_HEADER = "iter,loss_d,loss_g_adv,loss_g_l1,wall_ms"


def format_metric_row(row: dict) -> str:
    return ",".join([str(row["iter"]), repr(float(row["loss_d"])), repr(float(row["loss_g_adv"])),
                     repr(float(row["loss_g_l1"])), str(row["wall_ms"])])


def translate(G: Generator, x: Tensor, seed: int) -> Tensor:
    """Run G exactly as in training (dropout on, batch statistics) with a seeded noise stream.

    The generator's own training noise stream is left untouched.
    """
    saved = G.noise_rng
    G.set_noise_rng(RngState(seed, (STREAM_INFER,)))
    try:
        with no_grad():
            return G(x)
    finally:
        G.set_noise_rng(saved)


class Trainer:
    """Holds networks, optimizers and rng state of one run.

    Everything random is derived from ``cfg.seed``: parameter init and dropout
    noise use persistent streams, shuffling and augmentation are re-derived from
    (seed, epoch) and (seed, step), so resuming only needs the step counter and
    the persistent states.
    """

    def __init__(self, dataset: Sequence, cfg: TrainConfig):
        if not len(dataset):
            raise ConfigError("dataset is empty")
        if cfg.batch_size > len(dataset):
            raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {len(dataset)} "
                              "(partial batches are dropped)")
        self.dataset = dataset
        self.cfg = cfg
        self.G = Generator(cfg.generator, RngState(cfg.seed, (STREAM_INIT_G,)), RngState(cfg.seed, (STREAM_NOISE,)))
        self.opt_G = Adam(self.G.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
        self.D = None
        self.opt_D = None
        if cfg.objective.uses_gan:
            self.D = Discriminator(cfg.discriminator, RngState(cfg.seed, (STREAM_INIT_D,)))
            self.opt_D = Adam(self.D.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
        self.step = 0
        self.rows: list[dict] = []

    @property
    def steps_per_epoch(self) -> int:
        return len(self.dataset) // self.cfg.batch_size

    def _batch(self, step: int) -> list:
        from .data import jitter_and_mirror

        epoch, pos = divmod(step, self.steps_per_epoch)
        order = RngState(self.cfg.seed, (STREAM_SHUFFLE, epoch)).permutation(len(self.dataset))
        idx = order[pos * self.cfg.batch_size:(pos + 1) * self.cfg.batch_size]
        batch = [self.dataset[int(i)] for i in idx]
        if self.cfg.augment is not None:
            rng = RngState(self.cfg.seed, (STREAM_AUGMENT, step))
            batch = [jitter_and_mirror(s, self.cfg.augment, rng) for s in batch]
        return batch

    def train_step(self) -> dict:
        t0 = time.perf_counter()
        out = train_step(self._batch(self.step), self.G, self.D, self.opt_G, self.opt_D, self.cfg.objective)
        self.step += 1
        wall = int(round((time.perf_counter() - t0) * 1000)) if self.cfg.log_wall_time else 0
        row = {"iter": self.step, "loss_d": out["loss_d"], "loss_g_adv": out["loss_g_adv"],
               "loss_g_l1": out["loss_g_l1"], "wall_ms": wall}
        self.rows.append(row)
        return row

    def sample(self, sample) -> np.ndarray:
        x = Tensor(sample.x[None])
        return translate(self.G, x, self.cfg.seed).data[0]

    # -- persistence ----------------------------------------------------------
    def to_checkpoint(self):
        from .checkpoint import Checkpoint

        tensors = {f"G.{k}": v for k, v in self.G.state_dict().items()}
        optim = {"G": _adam_meta(self.opt_G.state)}
        tensors.update(_adam_tensors("optG", self.opt_G.state))
        if self.D is not None:
            tensors.update({f"D.{k}": v for k, v in self.D.state_dict().items()})
            tensors.update(_adam_tensors("optD", self.opt_D.state))
            optim["D"] = _adam_meta(self.opt_D.state)
        return Checkpoint(
            tensors=tensors,
            optimizer=optim,
            rng={"noise": self.G.noise_rng.get_state()},
            step=self.step,
            config=self.cfg.to_dict(),
        )

    @classmethod
    def from_checkpoint(cls, ckpt, dataset: Sequence) -> Trainer:
        tr = cls(dataset, TrainConfig.from_dict(ckpt.config))
        tr.load_checkpoint(ckpt)
        return tr

    def load_checkpoint(self, ckpt) -> None:
        self.G.load_state_dict(_strip(ckpt.tensors, "G."))
        _load_adam(self.opt_G.state, ckpt, "optG", "G")
        if self.D is not None:
            self.D.load_state_dict(_strip(ckpt.tensors, "D."))
            _load_adam(self.opt_D.state, ckpt, "optD", "D")
        self.G.set_noise_rng(RngState.from_state(ckpt.rng["noise"]))
        self.step = ckpt.step


def _adam_meta(s: AdamState) -> dict:
    return {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "t": s.t}


def _adam_tensors(prefix: str, s: AdamState) -> dict:
    out = {f"{prefix}.m.{k}": v for k, v in s.m.items()}
    out.update({f"{prefix}.v.{k}": v for k, v in s.v.items()})
    return out


def _strip(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def _load_adam(s: AdamState, ckpt, prefix: str, key: str) -> None:
    meta = ckpt.optimizer[key]
    s.lr, s.beta1, s.beta2, s.eps, s.t = meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], meta["t"]
    s.m = {k: v.copy() for k, v in _strip(ckpt.tensors, f"{prefix}.m.").items()}
    s.v = {k: v.copy() for k, v in _strip(ckpt.tensors, f"{prefix}.v.").items()}


@dataclass
class TrainResult:
    trainer: Trainer
    rows: list[dict]
    checkpoints: list[Path]


def train_loop(dataset: Sequence, cfg: TrainConfig, out_dir: str | Path | None = None,
               resume=None, sample_index: int = 0, iterations: int | None = None) -> TrainResult:
    """Train until the step counter reaches ``iterations`` (default ``cfg.iterations``).

    With ``resume`` (a Checkpoint) the run continues from the saved step using the
    saved config. With ``out_dir`` set, rows go to ``metrics.csv`` and, every
    ``cfg.checkpoint_every`` steps, ``ckpt_<step>.bin`` plus an input|target|output
    sample grid ``sample_<step>.png`` are written.
    """
    from .checkpoint import save_checkpoint
    from .data import png_encode, triptych

    trainer = Trainer.from_checkpoint(resume, dataset) if resume is not None else Trainer(dataset, cfg)
    cfg = trainer.cfg
    target = cfg.iterations if iterations is None else iterations
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "metrics.csv"
        if resume is not None and path.exists():
            # drop rows logged after the checkpoint we resume from
            keep = [ln for ln in path.read_text(encoding="utf-8").splitlines()[1:]
                    if ln and int(ln.split(",", 1)[0]) <= trainer.step]
            path.write_text("\n".join([METRIC_HEADER] + keep) + "\n", encoding="utf-8")
            log_file = open(path, "a", encoding="utf-8")
        else:
            log_file = open(path, "w", encoding="utf-8")
            log_file.write(METRIC_HEADER + "\n")
    ckpts: list[Path] = []
    start = len(trainer.rows)
    try:
        while trainer.step < target:
            row = trainer.train_step()
            if log_file is not None:
                log_file.write(format_metric_row(row) + "\n")
                log_file.flush()
            if out is not None and cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                p = out / f"ckpt_{trainer.step:07d}.bin"
                save_checkpoint(trainer.to_checkpoint(), p)
                ckpts.append(p)
                s = dataset[sample_index]
                grid = triptych(s.x, s.y, trainer.sample(s))
                (out / f"sample_{trainer.step:07d}.png").write_bytes(png_encode(grid))
                log_.info("step %d: loss_d=%.4f loss_g_adv=%.4f l1=%.4f", trainer.step,
                          row["loss_d"], row["loss_g_adv"], row["loss_g_l1"])
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(trainer, trainer.rows[start:], ckpts)

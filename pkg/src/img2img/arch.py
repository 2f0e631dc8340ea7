"""Architecture notation, network builders and receptive-field algebra.

Layer strings use the ``Ck`` / ``CDk`` notation: ``Ck`` is
convolution-batchnorm-activation with ``k`` filters, ``CDk`` adds 50%
dropout before the activation. What a token means beyond its filter count
(stride, transposition, normalization, activation) depends on the role of
the stack it belongs to, so parsing takes the role as context.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ArchParseError, ConfigError, ShapeError
from .tensor import RngState, Tensor, backward, default_dtype

ROLES = ("discriminator", "encoder", "decoder")
PATCH_SIZES = (1, 16, 70, 286)

DISCRIMINATOR_PRESETS = {
    1: "C64-C128",
    16: "C64-C128",
    70: "C64-C128-C256-C512",
    286: "C64-C128-C256-C512-C512-C512",
}

_TOKEN = re.compile(r"^(CD|C)(-?\d+)$")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "C" or "CD"
    filters: int
    stride: int = 2
    kernel: int = 4
    has_batchnorm: bool = True
    activation: str = "leaky_relu"
    transposed: bool = False

    @property
    def dropout(self) -> float:
        return nn.DROPOUT_RATE if self.kind == "CD" else 0.0

    @property
    def padding(self) -> int:
        return 1 if self.kernel == 4 else 0

    @property
    def token(self) -> str:
        return f"{self.kind}{self.filters}"


@dataclass(frozen=True)
class ArchSpec:
    role: str
    in_channels: int
    layers: tuple[LayerSpec, ...]
    head: LayerSpec | None = None
    kernel: int = 4
    out_channels: int | None = None

    @property
    def notation(self) -> str:
        return print_arch(self)

    def context(self) -> dict:
        """Keyword arguments that make ``parse_arch(self.notation, **ctx) == self``."""
        ctx = {"role": self.role, "in_channels": self.in_channels, "kernel": self.kernel}
        if self.out_channels is not None:
            ctx["out_channels"] = self.out_channels
        return ctx

    def all_layers(self) -> tuple[LayerSpec, ...]:
        return self.layers + ((self.head,) if self.head is not None else ())


def print_arch(spec: ArchSpec) -> str:
    return "-".join(layer.token for layer in spec.layers)


def parse_arch(text: str, role: str = "discriminator", in_channels: int = 6, kernel: int = 4,
               out_channels: int | None = None) -> ArchSpec:
    """Parse ``C64-C128-...`` into an :class:`ArchSpec` using the role's defaults.

    discriminator: every layer stride 2 except the last listed one (stride 1),
      no batchnorm on the first layer, leaky ReLU; a stride-1 head maps to one
      channel followed by a sigmoid. ``kernel=1`` gives the all-1x1, all-stride-1
      pixel discriminator.
    encoder: stride 2, leaky ReLU, no batchnorm on the first and the innermost
      layer.
    decoder: stride-2 transposed convolutions with batchnorm and ReLU; a
      transposed head maps to ``out_channels`` followed by tanh.
    """
    if role not in ROLES:
        raise ArchParseError(f"unknown role {role!r}")
    if kernel not in (1, 4):
        raise ArchParseError(f"kernel must be 1 or 4, got {kernel}")
    tokens = text.strip().split("-") if text.strip() else []
    if not tokens:
        raise ArchParseError("empty architecture string")
    parsed = []
    for pos, tok in enumerate(tokens, start=1):
        m = _TOKEN.match(tok.strip())
        if not m:
            raise ArchParseError(f"unknown token {tok!r}", pos)
        k = int(m.group(2))
        if k <= 0:
            raise ArchParseError(f"filter count must be positive in {tok!r}", pos)
        parsed.append((m.group(1), k))

    n = len(parsed)
    layers = []
    head = None
    if role == "discriminator":
        for i, (kind, k) in enumerate(parsed):
            stride = 1 if kernel == 1 or i == n - 1 else 2
            layers.append(LayerSpec(kind, k, stride, kernel, i != 0, "leaky_relu"))
        head = LayerSpec("C", 1, 1, kernel, False, "sigmoid")
    elif role == "encoder":
        for i, (kind, k) in enumerate(parsed):
            bn = 0 < i < n - 1
            layers.append(LayerSpec(kind, k, 2, kernel, bn, "leaky_relu"))
    else:
        for kind, k in parsed:
            layers.append(LayerSpec(kind, k, 2, kernel, True, "relu", transposed=True))
        head = LayerSpec("C", out_channels or 3, 2, kernel, False, "tanh", transposed=True)
        out_channels = out_channels or 3
    return ArchSpec(role, in_channels, tuple(layers), head, kernel, out_channels)


def scaled_notation(notation: str, base_filters: int) -> str:
    """Rescale a 64-based preset string to another base filter count."""
    return "-".join(
        f"{m.group(1)}{int(m.group(2)) * base_filters // 64}"
        for m in (_TOKEN.match(t) for t in notation.split("-"))
    )


def discriminator_spec(patch_size: int, in_channels: int, base_filters: int = 64) -> ArchSpec:
    if patch_size not in DISCRIMINATOR_PRESETS:
        raise ConfigError(f"patch size must be one of {PATCH_SIZES}, got {patch_size}")
    text = scaled_notation(DISCRIMINATOR_PRESETS[patch_size], base_filters)
    return parse_arch(text, "discriminator", in_channels, kernel=1 if patch_size == 1 else 4)


def _encoder_filters(depth: int, base_filters: int) -> list[int]:
    return [base_filters * min(2 ** i, 8) for i in range(depth)]


def encoder_spec(depth: int, in_channels: int, base_filters: int = 64) -> ArchSpec:
    text = "-".join(f"C{f}" for f in _encoder_filters(depth, base_filters))
    return parse_arch(text, "encoder", in_channels)


def decoder_spec(depth: int, base_filters: int = 64, out_channels: int = 3, n_dropout: int = 3,
                 in_channels: int | None = None) -> ArchSpec:
    enc = _encoder_filters(depth, base_filters)
    outs = [enc[depth - 1 - j] for j in range(1, depth)]
    text = "-".join(("CD" if j < n_dropout else "C") + str(f) for j, f in enumerate(outs))
    return parse_arch(text, "decoder", in_channels if in_channels is not None else enc[-1],
                      out_channels=out_channels)


# -- algebra ----------------------------------------------------------------

@dataclass(frozen=True)
class ReceptiveField:
    size: int
    jump: int


def receptive_field(spec: ArchSpec) -> ReceptiveField:
    """Backward recurrence r_in = (r_out - 1) * stride + kernel over all layers incl. the head."""
    layers = spec.all_layers()
    if any(layer.transposed for layer in layers):
        raise ShapeError("receptive field is defined for downsampling stacks only")
    r, jump = 1, 1
    for layer in reversed(layers):
        r = (r - 1) * layer.stride + layer.kernel
        jump *= layer.stride
    return ReceptiveField(r, jump)


def layer_input_channels(spec: ArchSpec, skip_channels: list[int] | None = None) -> list[int]:
    """Input channel count of every layer (head last); ``skip_channels[j]`` is
    concatenated onto the output of layer j before it feeds layer j+1."""
    chans = [spec.in_channels]
    for j, layer in enumerate(spec.layers):
        extra = skip_channels[j] if skip_channels else 0
        chans.append(layer.filters + extra)
    return chans[: len(spec.all_layers())]


def param_count(spec: ArchSpec, skip_channels: list[int] | None = None) -> int:
    """Weights + biases + batchnorm scale/shift."""
    total = 0
    for cin, layer in zip(layer_input_channels(spec, skip_channels), spec.all_layers()):
        total += layer.kernel * layer.kernel * cin * layer.filters + layer.filters
        if layer.has_batchnorm:
            total += 2 * layer.filters
    return total


def output_shapes(spec: ArchSpec, in_shape, skip_channels: list[int] | None = None) -> list[tuple[int, ...]]:
    n, c, h, w = in_shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, architecture expects {spec.in_channels}")
    shapes = []
    for j, layer in enumerate(spec.all_layers()):
        size = nn.conv_transpose_output_size if layer.transposed else nn.conv_output_size
        h, w = size(h, layer.kernel, layer.stride, layer.padding), size(w, layer.kernel, layer.stride, layer.padding)
        if h < 1 or w < 1:
            raise ShapeError(f"layer {j + 1} ({layer.token}) would produce {h}x{w}")
        c = layer.filters
        if skip_channels and j < len(spec.layers):
            c += skip_channels[j]
        shapes.append((n, c, h, w))
    return shapes


def output_shape(spec: ArchSpec, in_shape, skip_channels: list[int] | None = None) -> tuple[int, ...]:
    return output_shapes(spec, in_shape, skip_channels)[-1]


def gradient_support_receptive_field(spec: ArchSpec) -> int:
    """Measure the receptive field empirically.

    Builds a one-channel linear replica of the stack (same kernels, strides and
    padding, all-ones weights, no normalization), seeds a unit cotangent at a
    central output location and returns the width of the input-gradient
    support.
    """
    rf_guess = 1
    for layer in spec.all_layers():
        rf_guess = rf_guess * layer.stride + layer.kernel
    size = 2 * rf_guess + 16
    with default_dtype(np.float64):
        x = Tensor(np.zeros((1, 1, size, size)), requires_grad=True)
        h = x
        for layer in spec.all_layers():
            w = Tensor(np.ones((1, 1, layer.kernel, layer.kernel)))
            h = nn.conv2d(h, w, None, layer.stride, layer.padding)
        cot = np.zeros(h.shape)
        cot[0, 0, h.shape[2] // 2, h.shape[3] // 2] = 1.0
        backward(h, cot)
    rows = np.nonzero(np.abs(x.grad[0, 0]).sum(axis=1))[0]
    cols = np.nonzero(np.abs(x.grad[0, 0]).sum(axis=0))[0]
    if rows[0] == 0 or cols[0] == 0 or rows[-1] == size - 1 or cols[-1] == size - 1:
        raise ShapeError("gradient support touched the probe border; probe too small")
    return int(max(rows[-1] - rows[0], cols[-1] - cols[0]) + 1)


# -- built networks ---------------------------------------------------------

class Block(nn.Module):
    """conv -> [batchnorm] -> [dropout] -> activation"""

    def __init__(self, layer: LayerSpec, in_ch: int, rng: RngState, noise: RngState | None):
        self.conv = nn.Conv2d(in_ch, layer.filters, layer.kernel, layer.stride, layer.padding, rng, layer.transposed)
        self.bn = nn.BatchNorm2d(layer.filters, rng) if layer.has_batchnorm else None
        if layer.dropout and noise is None:
            raise ConfigError("a dropout layer needs a noise rng")
        self.drop = nn.Dropout(noise, layer.dropout) if layer.dropout else None
        self._act = nn.ACTIVATIONS[layer.activation]
        self._spec = layer

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv(x)
        if self.bn is not None:
            h = self.bn(h)
        if self.drop is not None:
            h = self.drop(h)
        return self._act(h)


@dataclass
class GeneratorConfig:
    variant: str = "unet"
    depth: int = 8
    in_channels: int = 3
    out_channels: int = 3
    base_filters: int = 64
    n_dropout: int = 3

    def __post_init__(self):
        if self.variant not in ("unet", "encoder_decoder"):
            raise ConfigError(f"generator variant must be 'unet' or 'encoder_decoder', got {self.variant!r}")
        if self.depth < 2:
            raise ConfigError("generator depth must be at least 2")
        if self.base_filters < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def input_size(self) -> int:
        """Training resolution whose encoder reaches a 1x1 bottleneck."""
        return 2 ** self.depth

    def encoder_spec(self) -> ArchSpec:
        return encoder_spec(self.depth, self.in_channels, self.base_filters)

    def decoder_spec(self) -> ArchSpec:
        return decoder_spec(self.depth, self.base_filters, self.out_channels, self.n_dropout)

    def skip_channels(self) -> list[int] | None:
        if self.variant != "unet":
            return None
        enc = self.encoder_spec().layers
        # decoder layer j (1-based) is joined with encoder layer depth - j
        return [enc[self.depth - 1 - j].filters for j in range(1, self.depth)]

    def param_count(self) -> int:
        return param_count(self.encoder_spec()) + param_count(self.decoder_spec(), self.skip_channels())

    def unet_decoder_notation(self) -> str:
        """Decoder written as the channel count entering each upsampling layer."""
        dec = self.decoder_spec()
        ins = layer_input_channels(dec, self.skip_channels())
        kinds = [layer.kind for layer in dec.layers] + ["C"]
        return "-".join(f"{kind}{c}" for kind, c in zip(kinds, ins))


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig, rng: RngState, noise_rng: RngState):
        self._cfg = cfg
        self._noise = noise_rng
        enc, dec = cfg.encoder_spec(), cfg.decoder_spec()
        ins = layer_input_channels(enc)
        self.encoder = [Block(layer, c, rng, noise_rng) for layer, c in zip(enc.layers, ins)]
        dins = layer_input_channels(dec, cfg.skip_channels())
        self.decoder = [Block(layer, c, rng, noise_rng) for layer, c in zip(dec.layers, dins)]
        self.head = Block(dec.head, dins[-1], rng, None)
        self._bottleneck: Tensor | None = None

    @property
    def config(self) -> GeneratorConfig:
        return self._cfg

    @property
    def bottleneck(self) -> Tensor | None:
        """Innermost encoder activation of the last forward pass."""
        return self._bottleneck

    @property
    def noise_rng(self) -> RngState:
        return self._noise

    def set_noise_rng(self, rng: RngState) -> None:
        self._noise = rng
        for blk in self.decoder:
            if blk.drop is not None:
                blk.drop.state.rng = rng

    def dropout_states(self) -> list[nn.DropoutState]:
        return [blk.drop.state for blk in self.decoder if blk.drop is not None]

    def freeze_dropout(self, frozen: bool = True) -> None:
        for st in self.dropout_states():
            st.frozen = frozen
            if not frozen:
                st.mask = None

    def skip_edges(self) -> list[tuple[int, int]]:
        """(encoder layer i, decoder layer n - i) pairs joined by concatenation, 1-based."""
        if self._cfg.variant != "unet":
            return []
        d = self._cfg.depth
        return [(d - j, j) for j in range(1, d)]

    def __call__(self, x: Tensor, zero_skips: bool = False) -> Tensor:
        d = self._cfg.depth
        if x.ndim != 4 or x.shape[1] != self._cfg.in_channels:
            raise ShapeError(f"generator expects [N,{self._cfg.in_channels},H,W], got {x.shape}")
        h, w = x.shape[2:]
        if h % 2 ** d or w % 2 ** d:
            raise ShapeError(f"input size {h}x{w} must be a multiple of 2^depth = {2 ** d}")
        feats = []
        hcur = x
        for blk in self.encoder:
            hcur = blk(hcur)
            feats.append(hcur)
        self._bottleneck = hcur
        unet = self._cfg.variant == "unet"
        for j, blk in enumerate(self.decoder, start=1):
            hcur = blk(hcur)
            if unet:
                skip = feats[d - 1 - j]
                if zero_skips:
                    skip = Tensor(np.zeros_like(skip.data))
                hcur = nn.concat_channels(hcur, skip)
        return self.head(hcur)


@dataclass
class DiscriminatorConfig:
    patch_size: int = 70
    conditional: bool = True
    x_channels: int = 3
    y_channels: int = 3
    base_filters: int = 64
    pad_to_receptive_field: bool = True

    def __post_init__(self):
        if self.patch_size not in PATCH_SIZES:
            raise ConfigError(f"patch size must be one of {PATCH_SIZES}, got {self.patch_size}")

    @property
    def in_channels(self) -> int:
        return self.x_channels + self.y_channels if self.conditional else self.y_channels

    def spec(self) -> ArchSpec:
        return discriminator_spec(self.patch_size, self.in_channels, self.base_filters)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig, rng: RngState):
        self._cfg = cfg
        spec = cfg.spec()
        self._spec = spec
        ins = layer_input_channels(spec)
        self.layers = [Block(layer, c, rng, None) for layer, c in zip(spec.layers, ins)]
        self.head = Block(spec.head, ins[-1], rng, None)
        self._rf = receptive_field(spec).size

    @property
    def config(self) -> DiscriminatorConfig:
        return self._cfg

    @property
    def spec(self) -> ArchSpec:
        return self._spec

    @property
    def in_channels(self) -> int:
        return self._spec.in_channels

    def __call__(self, y: Tensor, x: Tensor | None = None) -> Tensor:
        """Map of patch probabilities for ``y`` (conditioned on ``x`` when conditional)."""
        if self._cfg.conditional:
            if x is None:
                raise ShapeError("conditional discriminator needs the input image x")
            h = nn.concat_channels(x, y)
        else:
            if x is not None:
                raise ShapeError("unconditional discriminator must not observe x")
            h = y
        if h.shape[1] != self.in_channels:
            raise ShapeError(f"discriminator expects {self.in_channels} channels, got {h.shape[1]}")
        if self._cfg.pad_to_receptive_field:
            ph, pw = max(0, self._rf - h.shape[2]), max(0, self._rf - h.shape[3])
            if ph or pw:
                h = nn.pad2d(h, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
        for blk in self.layers:
            h = blk(h)
        return self.head(h)


# -- presets ----------------------------------------------------------------

GENERATOR_PRESETS = {"g-unet": "unet", "g-encdec": "encoder_decoder"}
DISCRIMINATOR_PRESET_NAMES = {"d1": 1, "d16": 16, "d70": 70, "d286": 286}


def preset_names() -> list[str]:
    return list(GENERATOR_PRESETS) + list(DISCRIMINATOR_PRESET_NAMES)


@dataclass
class ArchReport:
    """Layer table, shapes, parameter count and (for discriminators) receptive field."""

    name: str
    rows: list[dict] = field(default_factory=list)
    params: int = 0
    receptive_field: int | None = None
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"name": self.name, "layers": self.rows, "params": self.params,
                "receptive_field": self.receptive_field, "notes": self.notes}

    def as_text(self) -> str:
        lines = [f"# {self.name}"]
        lines.append(f"{'#':>3}  {'layer':<8} {'k':>2} {'s':>2} {'bn':>3} {'act':<11} out_shape")
        for r in self.rows:
            lines.append(f"{r['index']:>3}  {r['token']:<8} {r['kernel']:>2} {r['stride']:>2} "
                         f"{'y' if r['batchnorm'] else 'n':>3} {r['activation']:<11} {tuple(r['out_shape'])}")
        lines.append(f"params: {self.params}")
        if self.receptive_field is not None:
            lines.append(f"receptive_field: {self.receptive_field}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def _rows(spec: ArchSpec, shapes, label: str, start: int = 1) -> list[dict]:
    rows = []
    for i, (layer, shp) in enumerate(zip(spec.all_layers(), shapes), start=start):
        is_head = layer is spec.head
        rows.append({
            "index": i, "stack": label, "token": "head" if is_head else layer.token,
            "kernel": layer.kernel, "stride": layer.stride, "batchnorm": layer.has_batchnorm,
            "dropout": layer.dropout, "transposed": layer.transposed,
            "activation": layer.activation, "out_shape": list(shp),
        })
    return rows


def describe_discriminator(spec: ArchSpec, input_size: int, name: str = "discriminator") -> ArchReport:
    rf = receptive_field(spec).size
    size = max(input_size, rf)
    notes = []
    if rf > input_size:
        notes.append(f"receptive field {rf} exceeds input size {input_size}; input is zero-padded to {rf}x{rf}")
    shapes = output_shapes(spec, (1, spec.in_channels, size, size))
    return ArchReport(name, _rows(spec, shapes, "D"), param_count(spec), rf, notes)


def describe_generator(cfg: GeneratorConfig, input_size: int, name: str = "generator") -> ArchReport:
    if input_size % 2 ** cfg.depth:
        raise ShapeError(f"input size {input_size} must be a multiple of 2^depth = {2 ** cfg.depth}")
    enc, dec = cfg.encoder_spec(), cfg.decoder_spec()
    eshapes = output_shapes(enc, (1, cfg.in_channels, input_size, input_size))
    skips = cfg.skip_channels()
    dshapes = output_shapes(dec, eshapes[-1], skips)
    rows = _rows(enc, eshapes, "encoder") + _rows(dec, dshapes, "decoder", start=len(eshapes) + 1)
    notes = [f"encoder: {enc.notation}", f"decoder: {dec.notation}"]
    if skips:
        notes.append(f"unet decoder (input channels): {cfg.unet_decoder_notation()}")
    return ArchReport(name, rows, cfg.param_count(), None, notes)


def describe_preset(preset: str, input_size: int = 256, in_channels: int = 3, out_channels: int = 3,
                    base_filters: int = 64, depth: int | None = None) -> ArchReport:
    if preset in GENERATOR_PRESETS:
        if depth is None:
            depth = max(1, int(round(np.log2(input_size))))
        cfg = GeneratorConfig(GENERATOR_PRESETS[preset], depth, in_channels, out_channels, base_filters)
        return describe_generator(cfg, input_size, preset)
    if preset in DISCRIMINATOR_PRESET_NAMES:
        cfg = DiscriminatorConfig(DISCRIMINATOR_PRESET_NAMES[preset], True, in_channels, out_channels, base_filters)
        return describe_discriminator(cfg.spec(), input_size, preset)
    raise ConfigError(f"unknown preset {preset!r}; choose from {preset_names()}")


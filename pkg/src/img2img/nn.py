"""Layer vocabulary: 4x4 (and 1x1) convolutions, transposed convolutions,
batch normalization with current-batch statistics, inverted dropout,
activations and channel concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import RngState, Tensor, _make, gaussian_init, get_default_dtype

BN_EPS = 1e-5
LEAKY_SLOPE = 0.2
DROPOUT_RATE = 0.5
INIT_STD = 0.02


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


# -- raw kernels (numpy in, numpy out) ----------------------------------------

def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # [N, C, Ho, Wo, k, k]
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    win = _windows(x, w.shape[2], stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, O]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Adjoint of _conv_forward with respect to its input (col2im)."""
    n, _, ho, wo = g.shape
    c, k = w.shape[1], w.shape[2]
    h, wd = in_hw
    cols = np.tensordot(w, g, axes=([0], [1]))  # [C, k, k, N, Ho, Wo]
    out = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + span_h:stride, j:j + span_w:stride] += cols[:, i, j]
    out = out.transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(out)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    win = _windows(x, k, stride, padding)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [O, C, k, k]


def _check_conv(x: Tensor, weight: Tensor, stride: int, in_axis: int, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected [N,C,H,W] input, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"{op}: expected square [*,*,k,k] weight, got {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels, weight expects {weight.shape[in_axis]}")
    if stride not in (1, 2):
        raise ShapeError(f"{op}: stride must be 1 or 2, got {stride}")


# -- differentiable layer functions -------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; ``weight`` is [out_ch, in_ch, k, k]."""
    _check_conv(x, weight, stride, 1, "conv2d")
    k = weight.shape[2]
    h, w = x.shape[2:]
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output would be {ho}x{wo} for input {h}x{w}, k={k}, s={stride}, p={padding}")
    xd, wd = x.data, weight.data
    need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias is not None and bias.requires_grad
    out = _conv_forward(xd, wd, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = _conv_input_grad(g, wd, (h, w), stride, padding) if need_x else None
        gw = _conv_weight_grad(xd, g, k, stride, padding) if need_w else None
        gb = g.sum(axis=(0, 2, 3)) if need_b else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution; ``weight`` is [in_ch, out_ch, k, k].

    With the same weight array this is exactly the adjoint of ``conv2d``
    with respect to its input.
    """
    _check_conv(x, weight, stride, 0, "conv_transpose2d")
    k = weight.shape[2]
    h, w = x.shape[2:]
    ho, wo = conv_transpose_output_size(h, k, stride, padding), conv_transpose_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output would be {ho}x{wo} for input {h}x{w}")
    xd, wd = x.data, weight.data
    need_x, need_w, need_b = x.requires_grad, weight.requires_grad, bias is not None and bias.requires_grad
    out = _conv_input_grad(xd, wd, (ho, wo), stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = _conv_forward(g, wd, stride, padding) if need_x else None
        # treating g as the conv input and x as its output cotangent gives [in, out, k, k]
        gw = _conv_weight_grad(g, xd, k, stride, padding) if need_w else None
        gb = g.sum(axis=(0, 2, 3)) if need_b else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv_transpose2d")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS, mode: str = "train") -> Tensor:
    """Per-channel normalization over (N, H, W).

    Both ``train`` and ``test_batch_stats`` use the statistics of the batch
    being processed; no running averages exist. With one sample at 1x1
    spatial size the variance is zero and the output equals ``beta``.
    """
    if mode not in ("train", "test_batch_stats"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=(0, 2, 3), keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    g4 = gamma.data[None, :, None, None]
    out = xhat * g4 + beta.data[None, :, None, None]
    need_x, need_g, need_b = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if need_g else None
        gbeta = g.sum(axis=(0, 2, 3)) if need_b else None
        gx = None
        if need_x:
            dxhat = g * g4
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "batchnorm2d")


@dataclass
class DropoutState:
    """Source of the generator's noise. Active at train *and* test time."""

    rng: RngState
    rate: float = DROPOUT_RATE
    active: bool = True
    frozen: bool = False
    mask: np.ndarray | None = field(default=None, repr=False)

    def draw(self, shape) -> np.ndarray:
        if self.frozen and self.mask is not None:
            if self.mask.shape != tuple(shape):
                raise ShapeError(f"frozen dropout mask {self.mask.shape} does not fit input {tuple(shape)}")
            return self.mask
        keep = 1.0 - self.rate
        self.mask = self.rng.keep_mask(shape, keep).astype(get_default_dtype()) / keep
        return self.mask


def dropout(x: Tensor, state: DropoutState) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate)."""
    if not state.active or state.rate == 0:
        return x
    mask = state.draw(x.shape).astype(x.dtype, copy=False)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def relu(x: Tensor) -> Tensor:
    pos = x.data >= 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data >= 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero padding of the spatial dims."""
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return _make(out, (x,), lambda g: (g[:, :, top:top + h, left:left + w],), "pad2d")


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "none": lambda t: t,
}


# -- modules ----------------------------------------------------------------

class Module:
    """Minimal parameter container.

    Parameters are the tensors reachable through public instance attributes (including lists of modules), named by attribute path in
    insertion order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype, copy=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int, rng: RngState, transposed: bool = False):
        if kernel not in (1, 4):
            raise ShapeError(f"kernel size must be 1 or 4, got {kernel}")
        if stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {stride}")
        shape = (in_ch, out_ch, kernel, kernel) if transposed else (out_ch, in_ch, kernel, kernel)
        self.weight = gaussian_init(shape, 0.0, INIT_STD, rng)
        self.bias = Tensor(np.zeros(out_ch, dtype=get_default_dtype()), requires_grad=True)
        self.stride, self.padding, self.transposed = stride, padding, transposed

    def __call__(self, x: Tensor) -> Tensor:
        fn = conv_transpose2d if self.transposed else conv2d
        return fn(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, ch: int, rng: RngState | None = None, eps: float = BN_EPS):
        dt = get_default_dtype()
        # DCGAN-style init: scale ~ N(1, 0.02), shift 0
        g = np.ones(ch, dtype=dt) if rng is None else (1.0 + rng.normal((ch,), 0.0, INIT_STD)).astype(dt)
        self.gamma = Tensor(g, requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=dt), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, rng: RngState, rate: float = DROPOUT_RATE):
        self._state = DropoutState(rng, rate)

    @property
    def state(self) -> DropoutState:
        return self._state

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self._state)

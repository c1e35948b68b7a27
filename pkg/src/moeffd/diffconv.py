"""The five convolution experts: Vanilla, ADC, CDC, RDC and SOC.

Every kind learns nine weights per channel pair, a centre weight ``w_c`` and
eight neighbour weights ``w_p``:

    y = w_c·x_c + Σ_{p≠c} w_p·x̂_p

with the sampled difference ``x̂_p`` depending on the kind (δ is the offset of
neighbour p from the centre, ``x^R_p`` the radial partner at offset 2δ, and
``x^next_p`` the clockwise successor of p on the 3×3 ring):

    Vanilla  x̂_p = x_p
    CDC      x̂_p = x_p − x_c
    ADC      x̂_p = x_p − x^next_p
    RDC      x̂_p = x^R_p − x_p
    SOC      x̂_p = (x^R_p − x_p) + (x_c − x_p)

Each x̂_p is a fixed linear combination of input samples, so every kind equals a
plain convolution with a "lifted" kernel (3×3 for Vanilla/CDC/ADC, 5×5 for
RDC/SOC) obtained by a constant linear map of the nine weights. The fast path
uses that; :func:`naive_diff_conv` evaluates the sum above pixel by pixel.

All convolutions are stride 1 with zero padding and no bias.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


class DiffConvKind(str, Enum):
    VANILLA = "vanilla"
    ADC = "adc"
    CDC = "cdc"
    RDC = "rdc"
    SOC = "soc"

    @property
    def region(self) -> int:
        """Side length of the receptive field Ω."""
        return 5 if self in (DiffConvKind.RDC, DiffConvKind.SOC) else 3

    @classmethod
    def parse(cls, value) -> "DiffConvKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown convolution kind {value!r}; expected one of "
                             f"{[k.value for k in cls]}") from None


ALL_KINDS = tuple(DiffConvKind)

# Clockwise ring starting at north-west, as (row, col) offsets.
CLOCKWISE = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))
NEIGHBOURS = tuple((a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0))


def weight_index(offset: tuple[int, int]) -> int:
    """Position of a 3×3 offset in the row-major nine-weight layout."""
    return (offset[0] + 1) * 3 + (offset[1] + 1)


def next_clockwise(offset: tuple[int, int]) -> tuple[int, int]:
    i = CLOCKWISE.index(tuple(offset))
    return CLOCKWISE[(i + 1) % 8]


def lifting_matrix(kind: DiffConvKind) -> np.ndarray:
    """(K·K, 9) matrix mapping the nine learned weights to the equivalent dense kernel."""
    kind = DiffConvKind.parse(kind)
    k = kind.region
    r = k // 2
    lift = np.zeros((k * k, 9))

    def cell(off):
        return (off[0] + r) * k + (off[1] + r)

    centre = weight_index((0, 0))
    lift[cell((0, 0)), centre] = 1.0
    for off in NEIGHBOURS:
        j = weight_index(off)
        outer = (2 * off[0], 2 * off[1])
        if kind is DiffConvKind.VANILLA:
            lift[cell(off), j] += 1.0
        elif kind is DiffConvKind.CDC:
            lift[cell(off), j] += 1.0
            lift[cell((0, 0)), j] -= 1.0
        elif kind is DiffConvKind.ADC:
            lift[cell(off), j] += 1.0
            lift[cell(next_clockwise(off)), j] -= 1.0
        elif kind is DiffConvKind.RDC:
            lift[cell(outer), j] += 1.0
            lift[cell(off), j] -= 1.0
        else:  # SOC
            lift[cell(outer), j] += 1.0
            lift[cell(off), j] -= 2.0
            lift[cell((0, 0)), j] += 1.0
    return lift


_LIFT_CACHE: dict[tuple[DiffConvKind, np.dtype], Tensor] = {}


def _lift_t(kind: DiffConvKind, dtype) -> Tensor:
    key = (kind, np.dtype(dtype))
    if key not in _LIFT_CACHE:
        _LIFT_CACHE[key] = Tensor(lifting_matrix(kind).T.astype(dtype))
    return _LIFT_CACHE[key]


def lifted_kernel(weights: Tensor, kind) -> Tensor:
    """Dense (C_out, C_in, K, K) kernel equivalent to ``weights`` (C_out, C_in, 3, 3) under ``kind``."""
    kind = DiffConvKind.parse(kind)
    o, c = weights.shape[:2]
    if weights.shape[2:] != (3, 3):
        raise DimensionError(f"difference kernels are 3x3 per channel pair, got {weights.shape}")
    k = kind.region
    flat = weights.reshape(o * c, 9)
    return (flat @ _lift_t(kind, weights.dtype)).reshape(o, c, k, k)


def diff_conv_channels_last(x: Tensor, weights: Tensor, kind) -> Tensor:
    """Batched difference convolution on (B, H, W, C_in) maps."""
    if x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"diff_conv: input channels {x.shape[-1]} vs kernel {weights.shape}")
    return T.conv2d_same(x, lifted_kernel(weights, kind))


def diff_conv_forward(x, weights, kind) -> Tensor:
    """Apply a difference convolution to a (C_in, H, W) or (B, C_in, H, W) map.

    Returns the same layout with C_out channels. ``weights`` has shape
    (C_out, C_in, 3, 3) whatever the kind.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    weights = weights if isinstance(weights, Tensor) else Tensor(weights, dtype=x.dtype)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != weights.shape[1]:
        raise DimensionError(f"diff_conv: input {x.shape} does not match kernel {weights.shape}")
    y = diff_conv_channels_last(x.transpose(0, 2, 3, 1), weights, kind).transpose(0, 3, 1, 2)
    return y.reshape(y.shape[1:]) if single else y


def conv1x1(x, w) -> Tensor:
    """Per-pixel channel mixing: (C_in, H, W) or (B, C_in, H, W) with w of shape (C_out, C_in)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = w if isinstance(w, Tensor) else Tensor(w, dtype=x.dtype)
    if x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise DimensionError(f"conv1x1: input {x.shape} does not match weights {w.shape}")
    axes = tuple(range(x.ndim))
    last = axes[:-3] + (axes[-2], axes[-1], axes[-3])
    y = x.transpose(last) @ w.transpose(1, 0)
    back = axes[:-3] + (axes[-1], axes[-3], axes[-2])
    return y.transpose(back)


# ---------------------------------------------------------------------------
# literal per-pixel evaluation
# ---------------------------------------------------------------------------

def _read(x: np.ndarray, ch: int, i: int, j: int) -> float:
    h, w = x.shape[1:]
    if 0 <= i < h and 0 <= j < w:
        return float(x[ch, i, j])
    return 0.0


def sample_xhat(x: np.ndarray, position: tuple[int, int], neighbour: tuple[int, int], kind,
                channel: int = 0) -> float:
    """The difference sample x̂_p seen by neighbour ``neighbour`` of ``position``.

    ``x`` is (C, H, W); out-of-image reads are zero.
    """
    kind = DiffConvKind.parse(kind)
    x = np.asarray(x)
    a, b = neighbour
    if (a, b) == (0, 0):
        raise ValueError("the centre element is weighted directly by w_c, it has no x̂")
    if (a, b) not in NEIGHBOURS:
        raise ValueError(f"{neighbour} is not one of the eight 3x3 neighbours")
    i, j = position
    h, w = x.shape[1:]
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"position {position} outside a {h}x{w} map")
    xc = _read(x, channel, i, j)
    xp = _read(x, channel, i + a, j + b)
    if kind is DiffConvKind.VANILLA:
        return xp
    if kind is DiffConvKind.CDC:
        return xp - xc
    if kind is DiffConvKind.ADC:
        na, nb = next_clockwise((a, b))
        return xp - _read(x, channel, i + na, j + nb)
    xr = _read(x, channel, i + 2 * a, j + 2 * b)
    if kind is DiffConvKind.RDC:
        return xr - xp
    return (xr - xp) + (xc - xp)


def naive_diff_conv(x: np.ndarray, weights: np.ndarray, kind) -> np.ndarray:
    """Pixel-by-pixel evaluation of w_c·x_c + Σ w_p·x̂_p. Slow; used as a reference."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    c_out, c_in = weights.shape[:2]
    _, h, w = x.shape
    y = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for c in range(c_in):
                    acc += weights[o, c, 1, 1] * x[c, i, j]
                    for off in NEIGHBOURS:
                        acc += weights[o, c, off[0] + 1, off[1] + 1] * sample_xhat(x, (i, j), off, kind, c)
                y[o, i, j] = acc
    return y

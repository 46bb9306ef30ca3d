"""Framework-free forward passes of the mask-aware channel attention block
and the adaptive filter bank, plus the bank's 3x3 + high-pass collapse.

Feature maps are ``B x C x H x W`` float64 arrays.  Convolutions here are
cross-correlations (the deep-learning convention) with replicate padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DecodeError, ShapeMismatchError

# --------------------------------------------------------------------------
# Mask-aware adaptive channel attention


@dataclass(frozen=True, eq=False)
class MacaParams:
    """Weights of one attention block for ``C`` channels.

    ``conv_fg``/``conv_bg`` are ``C x C`` 1x1 convolutions applied before
    pooling.  The MLP maps the concatenated pooled vectors (``2C``) through one
    ReLU hidden layer of width ``2C`` to ``(delta_scale, shift)``; the applied
    scale is ``1 + delta_scale`` so an all-zero MLP is the identity.
    """

    conv_fg: np.ndarray
    conv_bg: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    conv_fg_bias: Optional[np.ndarray] = None
    conv_bg_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        c = self.channels
        expect = {
            "conv_fg": (c, c), "conv_bg": (c, c),
            "w1": (2 * c, 2 * c), "b1": (2 * c,),
            "w2": (2 * c, 2 * c), "b2": (2 * c,),
        }
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite values")
            object.__setattr__(self, name, arr)
        for name in ("conv_fg_bias", "conv_bg_bias"):
            arr = getattr(self, name)
            arr = np.zeros(c) if arr is None else np.asarray(arr, dtype=np.float64)
            if arr.shape != (c,):
                raise ShapeMismatchError(f"{name} must have shape ({c},)")
            object.__setattr__(self, name, arr)

    @property
    def channels(self) -> int:
        return np.asarray(self.conv_fg).shape[0]

    @classmethod
    def zero_mlp(cls, channels: int, rng: Optional[np.random.Generator] = None) -> "MacaParams":
        """Random convolutions, all-zero MLP: the block starts as the identity."""
        rng = rng or np.random.default_rng(0)
        c = channels
        return cls(rng.normal(size=(c, c)), rng.normal(size=(c, c)),
                   np.zeros((2 * c, 2 * c)), np.zeros(2 * c),
                   np.zeros((2 * c, 2 * c)), np.zeros(2 * c))

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, scale: float = 0.5) -> "MacaParams":
        c = channels
        n = lambda *s: rng.normal(scale=scale, size=s)  # noqa: E731
        return cls(n(c, c), n(c, c), n(2 * c, 2 * c), n(2 * c), n(2 * c, 2 * c), n(2 * c),
                   n(c), n(c))


def _mask_like(mask, x: np.ndarray) -> np.ndarray:
    m = np.asarray(getattr(mask, "data", mask))
    b, _, h, w = x.shape
    if m.shape == (h, w):
        m = m[None, None]
    elif m.shape == (b, h, w):
        m = m[:, None]
    elif m.shape != (b, 1, h, w):
        raise ShapeMismatchError(f"mask {m.shape} does not match features {x.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("attention mask must be binary")
    return m.astype(np.float64)


def _conv1x1(x, weight, bias):
    return np.einsum("oi,bihw->bohw", weight, x) + bias[None, :, None, None]


def maca_scale_shift(x: np.ndarray, mask, params: MacaParams, pooling: str = "mean"):
    """Per-sample ``(scale, shift)``, each ``B x C``.

    ``pooling="mean"`` averages the masked maps over all ``H * W`` positions;
    ``"masked"`` divides by the number of pixels in each region instead.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeMismatchError(f"features {x.shape} vs {params.channels} channels")
    m = _mask_like(mask, x)
    x_f = x * m
    x_b = x * (1.0 - m)
    c_f = _conv1x1(x_f, params.conv_fg, params.conv_fg_bias)
    c_b = _conv1x1(x_b, params.conv_bg, params.conv_bg_bias)
    if pooling == "mean":
        p_f = c_f.mean(axis=(2, 3))
        p_b = c_b.mean(axis=(2, 3))
    elif pooling == "masked":
        area_f = np.maximum(m.sum(axis=(2, 3)), 1.0)
        area_b = np.maximum((1.0 - m).sum(axis=(2, 3)), 1.0)
        p_f = (c_f * m).sum(axis=(2, 3)) / area_f
        p_b = (c_b * (1.0 - m)).sum(axis=(2, 3)) / area_b
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    hidden = np.maximum(np.concatenate([p_f, p_b], axis=1) @ params.w1.T + params.b1, 0.0)
    out = hidden @ params.w2.T + params.b2
    c = params.channels
    return 1.0 + out[:, :c], out[:, c:]


def maca_forward(x: np.ndarray, mask, params: MacaParams, pooling: str = "mean") -> np.ndarray:
    """``Y = (X * scale + shift) * M + X * (1 - M)``."""
    x = np.asarray(x, dtype=np.float64)
    scale, shift = maca_scale_shift(x, mask, params, pooling)
    m = _mask_like(mask, x)
    x_c = x * scale[:, :, None, None] + shift[:, :, None, None]
    return x_c * m + x * (1.0 - m)


# --------------------------------------------------------------------------
# Adaptive filter bank


def _gaussian3(sigma: float) -> np.ndarray:
    g = np.exp(-np.arange(-1, 2) ** 2 / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


MEMBER_KERNELS = {
    "identity": np.array([[0.0, 0, 0], [0, 1, 0], [0, 0, 0]]),
    "box": np.full((3, 3), 1.0 / 9.0),
    "gaussian": _gaussian3(0.85),
    "sobel_x": np.array([[-1.0, 0, 1], [-2, 0, 2], [-1, 0, 1]]),
    "sobel_y": np.array([[-1.0, -2, -1], [0, 0, 0], [1, 2, 1]]),
    "laplacian4": np.array([[0.0, 1, 0], [1, -4, 1], [0, 1, 0]]),
    "laplacian8": np.array([[1.0, 1, 1], [1, -8, 1], [1, 1, 1]]),
}
MEMBER_NAMES = tuple(MEMBER_KERNELS)

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0])
# identity minus the 5x5 binomial Gaussian; dyadic entries, so the sum is exactly 0
HIGHPASS_5X5 = -np.outer(_BINOMIAL5, _BINOMIAL5) / 256.0
HIGHPASS_5X5[2, 2] += 1.0


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Per-channel weights: ``weights[i, c]`` for member ``i`` and a separate
    ``highpass_weight[c]`` for the 5x5 high-pass filter."""

    weights: np.ndarray
    highpass_weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        hp = np.asarray(self.highpass_weight, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != len(MEMBER_NAMES):
            raise ShapeMismatchError(f"weights must be {len(MEMBER_NAMES)} x C, got {w.shape}")
        if hp.shape != (w.shape[1],):
            raise ShapeMismatchError(f"highpass_weight must have shape ({w.shape[1]},)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "highpass_weight", hp)

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def one_hot(cls, name: str, channels: int, highpass: float = 0.0) -> "FilterBank":
        w = np.zeros((len(MEMBER_NAMES), channels))
        w[MEMBER_NAMES.index(name)] = 1.0
        return cls(w, np.full(channels, highpass))

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator) -> "FilterBank":
        return cls(rng.normal(size=(len(MEMBER_NAMES), channels)), rng.normal(size=channels))


@dataclass(frozen=True, eq=False)
class ReparameterizedFilter:
    merged: np.ndarray  # C x 3 x 3
    highpass_weight: np.ndarray  # C


def _check_features(x: np.ndarray, channels: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeMismatchError(f"features {x.shape} vs {channels} channels")
    return x


def _correlate(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Depthwise correlation of ``B x C x H x W`` with ``C x k x k`` kernels."""
    k = kernels.shape[-1]
    r = k // 2
    h, w = x.shape[2:]
    padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            out += kernels[None, :, i, j, None, None] * padded[:, :, i:i + h, j:j + w]
    return out


def apply_highpass(x: np.ndarray) -> np.ndarray:
    """5x5 high-pass response, evaluated as ``sum k_ij (x_ij - x_centre)``.

    Equal to the plain correlation because the kernel sums to zero, and
    exactly zero on constant input.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[2:]
    padded = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="edge")
    out = np.zeros_like(x)
    for i in range(5):
        for j in range(5):
            if i == 2 and j == 2:
                continue
            out += HIGHPASS_5X5[i, j] * (padded[:, :, i:i + h, j:j + w] - x)
    return out


def apply_adaptive_filter(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    x = _check_features(x, bank.channels)
    out = np.zeros_like(x)
    for i, name in enumerate(MEMBER_NAMES):
        kern = np.broadcast_to(MEMBER_KERNELS[name], (bank.channels, 3, 3))
        out += bank.weights[i][None, :, None, None] * _correlate(x, kern)
    return out + bank.highpass_weight[None, :, None, None] * apply_highpass(x)


def reparameterize(bank: FilterBank) -> ReparameterizedFilter:
    """Fold the 3x3 members into one kernel per channel; keep the high-pass."""
    stack = np.stack([MEMBER_KERNELS[n] for n in MEMBER_NAMES])
    merged = np.einsum("ic,ijk->cjk", bank.weights, stack)
    return ReparameterizedFilter(merged, bank.highpass_weight.copy())


def apply_reparameterized(x: np.ndarray, rep: ReparameterizedFilter) -> np.ndarray:
    x = _check_features(x, rep.merged.shape[0])
    return _correlate(x, rep.merged) + rep.highpass_weight[None, :, None, None] * apply_highpass(x)


# --------------------------------------------------------------------------
# Fixture files: 16-byte header, then float64 features and uint8 mask.
#
#   magic  b"MACA"          4 bytes
#   B C H W                 4 x uint16 little-endian
#   seed                    uint32 little-endian (for random parameters)
#   data                    B*C*H*W float64 little-endian, C-order
#   mask                    H*W uint8 (0 or 1)

FIXTURE_MAGIC = b"MACA"
_HEADER = struct.Struct("<4s4HI")


@dataclass(frozen=True, eq=False)
class KernelFixture:
    x: np.ndarray
    mask: np.ndarray
    seed: int = 0


def write_fixture(path, x: np.ndarray, mask: np.ndarray, seed: int = 0) -> Path:
    x = np.asarray(x, dtype="<f8")
    mask = np.asarray(mask)
    if x.ndim != 4 or mask.shape != x.shape[2:]:
        raise ShapeMismatchError(f"features {x.shape} with mask {mask.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FIXTURE_MAGIC, *x.shape, seed))
        fh.write(np.ascontiguousarray(x).tobytes())
        fh.write(mask.astype(np.uint8).tobytes())
    return path


def read_fixture(path) -> KernelFixture:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DecodeError(f"{path}: truncated header")
    magic, b, c, h, w, seed = _HEADER.unpack_from(raw)
    if magic != FIXTURE_MAGIC:
        raise DecodeError(f"{path}: bad magic {magic!r}")
    n = b * c * h * w
    expected = _HEADER.size + 8 * n + h * w
    if len(raw) != expected:
        raise DecodeError(f"{path}: expected {expected} bytes, found {len(raw)}")
    x = np.frombuffer(raw, dtype="<f8", count=n, offset=_HEADER.size).reshape(b, c, h, w)
    mask = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=_HEADER.size + 8 * n)
    mask = mask.reshape(h, w)
    if not np.all(mask <= 1):
        raise DecodeError(f"{path}: mask is not binary")
    return KernelFixture(x.astype(np.float64), mask.astype(bool), seed)


def run_kernel_checks(fixture: KernelFixture, tol: float = 1e-5):
    """Invariant checks used by the ``maca-check`` command.

    Returns a list of ``(name, passed, detail)``.
    """
    x, mask = fixture.x, fixture.mask
    c = x.shape[1]
    rng = np.random.default_rng(fixture.seed)
    results = []

    y = maca_forward(x, mask, MacaParams.zero_mlp(c, rng))
    results.append(("identity-at-init", bool(np.array_equal(y, x)), "zero MLP gives Y == X"))

    params = MacaParams.random(c, rng)
    y = maca_forward(x, mask, params)
    bg = ~mask
    ok = bool(np.array_equal(y[:, :, bg], x[:, :, bg]))
    results.append(("background-exact", ok, "mask=0 outputs equal inputs bit-exactly"))

    y_empty = maca_forward(x, np.zeros_like(mask), params)
    results.append(("empty-mask-identity", bool(np.array_equal(y_empty, x)), "all-zero mask gives Y == X"))

    if mask.any():
        r, q = np.argwhere(mask)[0]
        x2 = x.copy()
        x2[:, :, r, q] += 1.0
        y2 = maca_forward(x2, mask, params)
        ok = bool(np.array_equal(y2[:, :, bg], y[:, :, bg]))
        results.append(("foreground-perturbation-isolated", ok,
                        "changing a foreground position leaves mask=0 outputs untouched"))

    bank = FilterBank.random(c, rng)
    diff = float(np.abs(apply_reparameterized(x, reparameterize(bank)) - apply_adaptive_filter(x, bank)).max())
    results.append(("af-reparameterization", diff <= tol, f"max |diff| = {diff:.3e}"))

    const = np.full_like(x, 0.37)
    hp = apply_highpass(const)
    results.append(("highpass-zero-dc", bool(np.all(hp == 0.0)), "constant input gives zero response"))
    return results

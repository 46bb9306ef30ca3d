"""Gradient-domain seamless cloning on the 5-point Laplacian.

For every pixel ``p`` of the blend domain the solver enforces::

    |N_p| f_p - sum_{q in N_p, q in domain} f_q
        = sum_{q in N_p, q not in domain} dest_q + sum_{q in N_p} (g_p - g_q)

where ``g`` is the source image supplying the guidance gradients.  The domain
must be surrounded by a one-pixel ring of destination pixels, so ``|N_p|`` is
always 4.  Each channel and each 4-connected component of the domain is an
independent symmetric positive definite system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .errors import (
    EmptyMaskError,
    NoConvergenceError,
    OutOfBoundsError,
    RegionTouchesBorderError,
    ShapeMismatchError,
)
from .imaging import Image, Mask, Region, bbox_of_mask, crop_mask

log = logging.getLogger(__name__)

CONJUGATE_GRADIENT = "conjugate-gradient"
DENSE_DIRECT = "dense-direct"

# 4-connectivity for component labelling.
_CROSS = ndimage.generate_binary_structure(2, 1)
_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class SolverConfig:
    """Linear solver settings.

    ``max_iterations=None`` means ten times the number of unknowns of each
    system.  With ``strict=True`` an unconverged solve raises
    :class:`NoConvergenceError` instead of returning a flagged result.
    """

    method: str = CONJUGATE_GRADIENT
    max_iterations: Optional[int] = None
    tolerance: float = 1e-8
    strict: bool = False

    def __post_init__(self):
        if self.method not in (CONJUGATE_GRADIENT, DENSE_DIRECT):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True, eq=False)
class GuidanceField:
    """Forward differences ``g_p - g_q`` of a source over ``region``.

    The arrays are staggered so that every edge touching the region is
    represented, including the edges that cross into the surrounding ring:

    * ``dx[r, k] = g[top + r, left - 1 + k] - g[top + r, left + k]`` for
      ``k = 0..width``, shape ``(height, width + 1, C)``
    * ``dy[k, c] = g[top - 1 + k, left + c] - g[top + k, left + c]`` for
      ``k = 0..height``, shape ``(height + 1, width, C)``

    Source indices are clamped to the source bounds, which makes any
    difference across the source border zero.
    """

    region: Region
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        h, w = self.region.height, self.region.width
        if self.dx.shape[:2] != (h, w + 1) or self.dy.shape[:2] != (h + 1, w):
            raise ShapeMismatchError("difference arrays do not match the region")
        if self.dx.shape[2] != self.dy.shape[2]:
            raise ShapeMismatchError("dx and dy channel counts differ")

    @property
    def channels(self) -> int:
        return self.dx.shape[2]

    def divergence(self) -> np.ndarray:
        """``sum_q (g_p - g_q)`` for every pixel of the region, shape ``(h, w, C)``."""
        return (self.dx[:, 1:] - self.dx[:, :-1]) + (self.dy[1:] - self.dy[:-1])

    def moved_to(self, region: Region) -> "GuidanceField":
        if (region.height, region.width) != (self.region.height, self.region.width):
            raise ShapeMismatchError("can only move a guidance field to a same-sized region")
        return GuidanceField(region, self.dx, self.dy)

    def scaled(self, factor: float) -> "GuidanceField":
        return GuidanceField(self.region, self.dx * factor, self.dy * factor)

    def __add__(self, other: "GuidanceField") -> "GuidanceField":
        if other.region != self.region:
            raise ShapeMismatchError("guidance fields cover different regions")
        return GuidanceField(self.region, self.dx + other.dx, self.dy + other.dy)


@dataclass(frozen=True, eq=False)
class SolveResult:
    image: Image
    converged: bool
    iterations: int
    residual: float
    raw: np.ndarray  # unclamped solution, same shape as image.data


def build_guidance_field(source: Image, region: Region) -> GuidanceField:
    if not region.fits_in(source.height, source.width):
        raise OutOfBoundsError(f"{region} outside a {source.height}x{source.width} source")
    g = source.data
    rows = np.arange(region.top, region.bottom)
    cols = np.arange(region.left - 1, region.right + 1)
    rows_c = np.clip(rows, 0, source.height - 1)
    cols_c = np.clip(cols, 0, source.width - 1)
    band = g[np.ix_(rows_c, cols_c)]
    dx = band[:, :-1] - band[:, 1:]

    rows = np.arange(region.top - 1, region.bottom + 1)
    cols = np.arange(region.left, region.right)
    band = g[np.ix_(np.clip(rows, 0, source.height - 1), np.clip(cols, 0, source.width - 1))]
    dy = band[:-1] - band[1:]
    return GuidanceField(region, dx, dy)


def conjugate_gradient(matvec, b, diag, tol, max_iter, x0=None):
    """Jacobi-preconditioned CG for an SPD operator.

    Stops when ``||b - A x|| <= tol * ||b||``.  Returns
    ``(x, converged, iterations, relative_residual)``.
    """
    x = np.zeros_like(b) if x0 is None else x0.astype(np.float64, copy=True)
    bnorm = np.sqrt((b * b).sum())
    if bnorm == 0.0:
        return np.zeros_like(b), True, 0, 0.0
    r = b - matvec(x)
    res = np.sqrt((r * r).sum()) / bnorm
    if res <= tol:
        return x, True, 0, res
    z = r / diag
    p = z.copy()
    rz = (r * z).sum()
    for it in range(1, max_iter + 1):
        ap = matvec(p)
        step = rz / (p * ap).sum()
        x += step * p
        r -= step * ap
        res = np.sqrt((r * r).sum()) / bnorm
        if res <= tol:
            return x, True, it, res
        z = r / diag
        rz_next = (r * z).sum()
        p = z + (rz_next / rz) * p
        rz = rz_next
    return x, False, max_iter, res


def _component_system(rows, cols, index, member):
    """Sparse masked Laplacian over the pixels listed in ``rows``/``cols``."""
    n = rows.size
    diag = np.full(n, 4.0)
    r_idx, c_idx, vals = [np.arange(n)], [np.arange(n)], [diag]
    for dr, dc in _NEIGHBOURS:
        nr, nc = rows + dr, cols + dc
        inside = member(nr, nc)
        r_idx.append(np.flatnonzero(inside))
        c_idx.append(index[nr[inside], nc[inside]])
        vals.append(np.full(int(inside.sum()), -1.0))
    a = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))), shape=(n, n)
    )
    return a, diag


def _solve_domain(dest: np.ndarray, domain: np.ndarray, div: np.ndarray, config: SolverConfig):
    """Solve every 4-connected component of ``domain``; ``div`` is full-size."""
    out = dest.copy()
    labels, ncomp = ndimage.label(domain, structure=_CROSS)
    all_rows, all_cols = np.nonzero(labels)
    order = np.argsort(labels[all_rows, all_cols], kind="stable")
    all_rows, all_cols = all_rows[order], all_cols[order]
    bounds = np.cumsum(np.bincount(labels[all_rows, all_cols], minlength=ncomp + 1))
    index = np.full(domain.shape, -1, dtype=np.int64)
    converged, iterations, worst = True, 0, 0.0
    for comp in range(1, ncomp + 1):
        rows = all_rows[bounds[comp - 1]:bounds[comp]]
        cols = all_cols[bounds[comp - 1]:bounds[comp]]
        n = rows.size
        index[rows, cols] = np.arange(n)

        def member(r, c, comp=comp):
            return labels[r, c] == comp

        a, diag = _component_system(rows, cols, index, member)
        rhs = div[rows, cols].copy()
        for dr, dc in _NEIGHBOURS:
            nr, nc = rows + dr, cols + dc
            outside = ~member(nr, nc)
            rhs[outside] += dest[nr[outside], nc[outside]]

        if config.method == DENSE_DIRECT:
            sol = np.linalg.solve(a.toarray(), rhs)
            bn = np.sqrt((rhs * rhs).sum())
            res = float(np.sqrt(((rhs - a @ sol) ** 2).sum()) / bn) if bn > 0 else 0.0
            ok, it = True, 1
        else:
            max_iter = config.max_iterations or 10 * n
            sol = np.empty_like(rhs)
            ok, it, res = True, 0, 0.0
            for ch in range(rhs.shape[1]):
                x, c_ok, c_it, c_res = conjugate_gradient(
                    a.dot, rhs[:, ch], diag, config.tolerance, max_iter
                )
                sol[:, ch] = x
                ok = ok and c_ok
                it, res = max(it, c_it), max(res, c_res)
        out[rows, cols] = sol
        converged = converged and ok
        iterations, worst = max(iterations, it), max(worst, res)
    return out, converged, iterations, worst


def solve_region(
    dest: Image,
    guidance: GuidanceField,
    config: SolverConfig = SolverConfig(),
    domain: Optional[np.ndarray] = None,
) -> SolveResult:
    """Replace the pixels of ``guidance.region`` (optionally restricted to the
    boolean ``domain`` of the same size) by the Poisson solution.

    Pixels outside the solved domain are returned unchanged.  The solution is
    clamped to [0, 1]; ``SolveResult.raw`` keeps the unclamped values.
    """
    region = guidance.region
    if not region.fits_in(dest.height, dest.width):
        raise OutOfBoundsError(f"{region} outside a {dest.height}x{dest.width} destination")
    if not region.has_ring_in(dest.height, dest.width):
        raise RegionTouchesBorderError(f"{region} leaves no boundary ring in the destination")
    if guidance.channels != dest.channels:
        raise ShapeMismatchError(f"guidance has {guidance.channels} channels, destination {dest.channels}")
    if domain is None:
        domain = np.ones((region.height, region.width), dtype=bool)
    domain = np.asarray(domain, dtype=bool)
    if domain.shape != (region.height, region.width):
        raise ShapeMismatchError(f"domain {domain.shape} does not match {region}")
    if not domain.any():
        raise EmptyMaskError("blend domain is empty")

    full = np.zeros(dest.shape[:2], dtype=bool)
    full[region.slices] = domain
    div = np.zeros(dest.shape)
    div[region.slices] = guidance.divergence()
    raw, converged, iterations, residual = _solve_domain(dest.data, full, div, config)
    result = SolveResult(
        image=Image(np.clip(raw, 0.0, 1.0), dest.source_depth),
        converged=converged,
        iterations=iterations,
        residual=residual,
        raw=raw,
    )
    if not converged:
        msg = f"solver stopped at relative residual {residual:.3e} > {config.tolerance:.1e}"
        if config.strict:
            raise NoConvergenceError(msg, result)
        log.warning(msg)
    return result


def seamless_clone(
    src: Image,
    dst: Image,
    mask: Mask,
    offset: Tuple[int, int] = (0, 0),
    config: SolverConfig = SolverConfig(),
) -> SolveResult:
    """Clone the masked part of ``src`` into ``dst`` shifted by ``offset``.

    ``offset`` is ``(rows, cols)`` added to source coordinates to get
    destination coordinates.  Guidance is always the source gradient; only
    destination pixels under the translated mask change.
    """
    if mask.shape != src.shape[:2]:
        raise ShapeMismatchError(f"mask {mask.shape} does not match source {src.shape[:2]}")
    if src.channels != dst.channels:
        raise ShapeMismatchError(f"source has {src.channels} channels, destination {dst.channels}")
    box = bbox_of_mask(mask)
    target = box.shifted(*offset)
    guidance = build_guidance_field(src, box).moved_to(target)
    return solve_region(dst, guidance, config, domain=crop_mask(mask, box).data)

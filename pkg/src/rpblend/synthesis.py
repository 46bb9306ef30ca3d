"""Random Poisson Blending: re-light a real foreground through a random reference.

One synthesis run, for a real image ``I_t`` with foreground mask ``M``:

1. crop the foreground ``F_t`` from the mask's bounding box;
2. draw a reference image ``I_r`` other than ``I_t`` and a random placement
   inside it, and seamlessly clone ``F_t`` (its true mask shape) there,
   giving ``I_p``;
3. crop ``F_p`` from ``I_p`` at the placement and mix
   ``alpha * F_p + (1 - alpha) * F_t``;
4. paste the mix back at the original position, keeping real pixels
   wherever the mask is 0.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    CorpusExhaustedError,
    InvalidAlphaError,
    InvalidRangeError,
    RefTooSmallError,
    ShapeMismatchError,
)
from .imaging import Image, Mask, Region, bbox_of_mask, composite, crop, load_image, paste
from .poisson import SolverConfig, seamless_clone

log = logging.getLogger(__name__)

ALPHA_MIN = 0.6
ALPHA_MAX = 1.0
MAX_REFERENCE_DRAWS = 32
_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, image_id: str, tag) -> int:
    """Per-task seed: ``master XOR blake2b(image_id, tag)`` truncated to 64 bits."""
    digest = hashlib.blake2b(f"{image_id}\x1f{tag}".encode("utf-8"), digest_size=8).digest()
    return (int(master_seed) ^ int.from_bytes(digest, "little")) & _MASK64


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))


@dataclass(frozen=True)
class BlendParams:
    alpha: float
    seed: int
    reference_id: int
    placement: Region
    bbox: Region
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX

    def __post_init__(self):
        if not 0.0 <= self.alpha_min <= self.alpha <= self.alpha_max <= 1.0:
            raise InvalidAlphaError(
                f"need 0 <= {self.alpha_min} <= {self.alpha} <= {self.alpha_max} <= 1"
            )
        if (self.placement.height, self.placement.width) != (self.bbox.height, self.bbox.width):
            raise ShapeMismatchError("placement and foreground bbox differ in size")


@dataclass(frozen=True, eq=False)
class SyntheticResult:
    composite: Image
    mask: Mask
    params: BlendParams
    converged: bool
    candidate_index: int = 0


class ReferenceCorpus:
    """Indexable set of reference images, loaded lazily and cached.

    ``ids`` identify each reference for exclusion of the real image; by
    default they are the resolved file paths.  ``labels`` are the strings
    written to manifests.
    """

    def __init__(self, sources: Sequence[Union[Image, str, Path]], ids=None, labels=None,
                 loader: Callable[[Path], Image] = load_image):
        self._sources = list(sources)
        self._loader = loader
        self._cache = {}
        self._lock = threading.Lock()
        if ids is None:
            ids = [str(Path(s).resolve()) if not isinstance(s, Image) else f"#{i}"
                   for i, s in enumerate(self._sources)]
        if labels is None:
            labels = [str(s) if not isinstance(s, Image) else f"#{i}"
                      for i, s in enumerate(self._sources)]
        self.ids = list(ids)
        self.labels = list(labels)
        if not len(self.ids) == len(self.labels) == len(self._sources):
            raise ValueError("ids and labels must match the number of sources")

    @classmethod
    def from_directory(cls, directory, patterns=("*.png", "*.jpg", "*.jpeg"),
                       loader: Callable[[Path], Image] = load_image) -> "ReferenceCorpus":
        directory = Path(directory)
        paths = sorted({p for pat in patterns for p in directory.glob(pat)}, key=lambda p: p.name)
        return cls(paths, loader=loader)

    def __len__(self):
        return len(self._sources)

    def get(self, index: int) -> Image:
        src = self._sources[index]
        if isinstance(src, Image):
            return src
        with self._lock:
            cached = self._cache.get(index)
        if cached is None:
            cached = self._loader(Path(src))
            with self._lock:
                self._cache.setdefault(index, cached)
        return cached


def sample_placement(rng: np.random.Generator, fg_bbox: Region, reference: Image) -> Region:
    """Uniform top-left offset keeping the region plus a one-pixel ring inside."""
    h, w = fg_bbox.height, fg_bbox.width
    if reference.height < h + 2 or reference.width < w + 2:
        raise RefTooSmallError(
            f"{reference.height}x{reference.width} reference cannot host a {h}x{w} foreground"
        )
    top = int(rng.integers(1, reference.height - h))
    left = int(rng.integers(1, reference.width - w))
    return Region(top, left, h, w)


def sample_alpha(rng: np.random.Generator, alpha_min: float = ALPHA_MIN,
                 alpha_max: float = ALPHA_MAX) -> float:
    if not 0.0 <= alpha_min <= alpha_max <= 1.0:
        raise InvalidRangeError(f"invalid alpha range [{alpha_min}, {alpha_max}]")
    if alpha_min == alpha_max:
        return float(alpha_min)
    return float(alpha_min + (alpha_max - alpha_min) * rng.random())


def mix_foregrounds(f_p: Image, f_t: Image, alpha: float) -> Image:
    """Convex combination ``alpha * f_p + (1 - alpha) * f_t``."""
    if f_p.shape != f_t.shape:
        raise ShapeMismatchError(f"{f_p.shape} vs {f_t.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidAlphaError(f"alpha {alpha} outside [0, 1]")
    if alpha == 1.0:
        return f_p
    if alpha == 0.0:
        return f_t
    mixed = alpha * f_p.data + (1.0 - alpha) * f_t.data
    return Image(np.clip(mixed, 0.0, 1.0), f_t.source_depth)


def _draw_reference(rng, corpus: ReferenceCorpus, real: Image, bbox: Region, exclude):
    allowed = [i for i, rid in enumerate(corpus.ids) if exclude is None or rid != exclude]
    if not allowed:
        raise CorpusExhaustedError("corpus has no reference distinct from the real image")
    for _ in range(MAX_REFERENCE_DRAWS):
        idx = allowed[int(rng.integers(len(allowed)))]
        ref = corpus.get(idx)
        if ref.channels != real.channels:
            log.debug("reference %s has %d channels, need %d", corpus.labels[idx],
                      ref.channels, real.channels)
            continue
        try:
            return idx, ref, sample_placement(rng, bbox, ref)
        except RefTooSmallError:
            continue
    raise CorpusExhaustedError(f"no usable reference after {MAX_REFERENCE_DRAWS} draws")


def random_poisson_blend(
    real: Image,
    mask: Mask,
    corpus: ReferenceCorpus,
    seed: int,
    config: SolverConfig = SolverConfig(),
    *,
    real_id: Optional[str] = None,
    alpha_range: Tuple[float, float] = (ALPHA_MIN, ALPHA_MAX),
    alpha: Optional[float] = None,
    reference_index: Optional[int] = None,
    placement: Optional[Region] = None,
    candidate_index: int = 0,
) -> SyntheticResult:
    """Synthesize one disharmonious composite of ``real``.

    ``real_id`` is excluded from reference draws.  ``alpha``,
    ``reference_index`` and ``placement`` pin the corresponding random choice
    (used for controlled experiments); otherwise everything is drawn from a
    generator keyed by ``seed``.
    """
    if mask.shape != real.shape[:2]:
        raise ShapeMismatchError(f"mask {mask.shape} does not match image {real.shape[:2]}")
    bbox = bbox_of_mask(mask)
    rng = make_rng(seed)

    if reference_index is None:
        ref_idx, ref, where = _draw_reference(rng, corpus, real, bbox, real_id)
    else:
        ref_idx, ref = reference_index, corpus.get(reference_index)
        where = None
    if placement is not None:
        where = placement
    elif where is None:
        where = sample_placement(rng, bbox, ref)

    if alpha is None:
        lo, hi = alpha_range
        a = sample_alpha(rng, lo, hi)
    else:
        a = float(alpha)
        lo = hi = a

    offset = (where.top - bbox.top, where.left - bbox.left)
    blended = seamless_clone(real, ref, mask, offset, config)
    f_p = crop(blended.image, where)
    f_t = crop(real, bbox)
    mixed = mix_foregrounds(f_p, f_t, a)
    out = composite(paste(real, mixed, bbox), real, mask)

    params = BlendParams(alpha=a, seed=int(seed), reference_id=ref_idx, placement=where,
                         bbox=bbox, alpha_min=lo, alpha_max=hi)
    return SyntheticResult(out, mask, params, blended.converged, candidate_index)

"""Dataset construction around the blender.

Mask selection by foreground ratio, N-candidate generation, heuristic flags,
score-based ranking, JSON-Lines manifests and foreground-ratio statistics.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ImageIOError,
    ManifestParseError,
    NoValidMaskError,
    RPBError,
    ScoreFileMismatchError,
)
from .imaging import Image, Mask, Region, foreground_ratio, load_image, load_mask, save_image, save_mask
from .poisson import SolverConfig
from .synthesis import (
    ALPHA_MAX,
    ALPHA_MIN,
    ReferenceCorpus,
    SyntheticResult,
    derive_seed,
    make_rng,
    random_poisson_blend,
)

log = logging.getLogger(__name__)

DEGENERATE_BACKGROUND = "degenerate-background"
EXCESSIVE_COLOR_SHIFT = "excessive-color-shift"
NO_CONVERGENCE = "no-convergence"
REJECTED = "rejected"
FLAGS = (DEGENERATE_BACKGROUND, EXCESSIVE_COLOR_SHIFT, NO_CONVERGENCE, REJECTED)

RATIO_LO = 0.01
RATIO_HI = 0.80
N_CANDIDATES = 5
SHORTLIST = 2
KEEP = 1
BACKGROUND_VARIANCE_MIN = 1e-4
FOREGROUND_SHIFT_MAX = 0.35
HISTOGRAM_BINS = 20

# Published split sizes of the reference dataset, for documentation only.
RPHARMONY_SPLITS = {
    "R-DUTS": {"train": 6999, "test": 778},
    "R-ADE20K": {"train": 5788, "test": 644},
    "RPHarmony": {"train": 12787, "test": 1422},
}

IMAGE_PATTERNS = ("*.png", "*.jpg", "*.jpeg")


@dataclass(frozen=True)
class ManifestEntry:
    real_path: str
    mask_path: str
    composite_path: str
    reference_path: str
    placement: Region
    alpha: float
    seed: int
    candidate_index: int
    score: Optional[float] = None
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        unknown = set(self.flags) - set(FLAGS)
        if unknown:
            raise ValueError(f"unknown flags {sorted(unknown)}")
        object.__setattr__(self, "flags", tuple(sorted(set(self.flags))))
        if self.candidate_index < 0:
            raise ValueError("candidate_index must be non-negative")

    @property
    def rejected(self) -> bool:
        return REJECTED in self.flags

    @property
    def quality_flags(self) -> Tuple[str, ...]:
        return tuple(f for f in self.flags if f != REJECTED)

    def to_dict(self) -> dict:
        return {
            "real_path": self.real_path,
            "mask_path": self.mask_path,
            "composite_path": self.composite_path,
            "reference_path": self.reference_path,
            "placement": self.placement.as_dict(),
            "alpha": self.alpha,
            "seed": self.seed,
            "candidate_index": self.candidate_index,
            "score": self.score,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        p = d["placement"]
        score = d["score"]
        return cls(
            real_path=str(d["real_path"]),
            mask_path=str(d["mask_path"]),
            composite_path=str(d["composite_path"]),
            reference_path=str(d["reference_path"]),
            placement=Region(int(p["top"]), int(p["left"]), int(p["height"]), int(p["width"])),
            alpha=float(d["alpha"]),
            seed=int(d["seed"]),
            candidate_index=int(d["candidate_index"]),
            score=None if score is None else float(score),
            flags=tuple(d["flags"]),
        )


@dataclass(frozen=True)
class ScorerHandle:
    """Where candidate scores come from.

    ``mode="external-file"`` ingests precomputed scores (for example from an
    aesthetic predictor) keyed by composite path; ``"builtin-heuristic"``
    scores each candidate by minus its number of quality flags.
    """

    mode: str = "builtin-heuristic"
    path: Optional[Path] = None
    scores: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "ScorerHandle":
        return cls("external-file", Path(path), load_scores(path))

    def score(self, entry: ManifestEntry) -> float:
        if self.mode == "builtin-heuristic":
            return -float(len(entry.quality_flags))
        try:
            return self.scores[entry.composite_path]
        except KeyError:
            raise ScoreFileMismatchError(
                f"no score for {entry.composite_path} in {self.path}"
            ) from None


def load_scores(path) -> Dict[str, float]:
    """Read ``path,score`` rows (an optional header row is skipped)."""
    scores = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#"):
                    continue
                try:
                    scores[row[0]] = float(row[1])
                except (IndexError, ValueError):
                    if scores:
                        raise ValueError(f"bad score row {row!r} in {path}") from None
    except OSError as exc:
        raise ImageIOError(f"cannot read scores {path}: {exc}") from exc
    return scores


def select_mask_by_ratio(masks: Sequence[Mask], rng: np.random.Generator,
                         lo: float = RATIO_LO, hi: float = RATIO_HI) -> int:
    """Uniformly pick the index of a mask whose foreground ratio is in ``[lo, hi]``."""
    if not masks:
        raise ValueError("no masks to choose from")
    valid = [i for i, m in enumerate(masks) if lo <= foreground_ratio(m) <= hi]
    if not valid:
        raise NoValidMaskError(f"no mask with foreground ratio in [{lo}, {hi}]")
    return valid[int(rng.integers(len(valid)))]


def generate_candidates(
    real: Image,
    mask: Mask,
    corpus: ReferenceCorpus,
    n: int = N_CANDIDATES,
    master_seed: int = 0,
    *,
    real_id: str = "",
    exclude_id: Optional[str] = None,
    config: SolverConfig = SolverConfig(),
    alpha_range: Tuple[float, float] = (ALPHA_MIN, ALPHA_MAX),
    threads: int = 1,
) -> List[SyntheticResult]:
    """Run ``n`` independent blends, candidate ``k`` seeded by
    ``derive_seed(master_seed, real_id, k)``.

    Failed candidates are logged and dropped, so the list can be shorter
    than ``n`` (empty when every candidate failed).
    """
    if n < 1:
        raise ValueError("n must be >= 1")

    def one(k):
        try:
            return random_poisson_blend(
                real, mask, corpus, derive_seed(master_seed, real_id, k), config,
                real_id=exclude_id, alpha_range=alpha_range, candidate_index=k,
            )
        except RPBError as exc:
            log.warning("candidate %d of %s failed: %s", k, real_id or "<image>", exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(k) for k in range(n)]
    kept = [r for r in results if r is not None]
    if not kept:
        log.warning("all %d candidates failed for %s", n, real_id or "<image>")
    return kept


def heuristic_flags(candidate: SyntheticResult, real: Image,
                    v_bg: float = BACKGROUND_VARIANCE_MIN,
                    d_fg: float = FOREGROUND_SHIFT_MAX) -> Tuple[str, ...]:
    """Approximate the manual-review rejection reasons.

    ``degenerate-background``: every channel of the real background has
    variance below ``v_bg`` (solid-colour backdrop).
    ``excessive-color-shift``: mean absolute foreground change exceeds ``d_fg``.
    """
    fg = candidate.mask.data
    flags = []
    bg_pixels = real.data[~fg]
    if bg_pixels.shape[0] == 0 or np.all(bg_pixels.var(axis=0) < v_bg):
        flags.append(DEGENERATE_BACKGROUND)
    if fg.any():
        shift = np.abs(candidate.composite.data[fg] - real.data[fg]).mean()
        if shift > d_fg:
            flags.append(EXCESSIVE_COLOR_SHIFT)
    if not candidate.converged:
        flags.append(NO_CONVERGENCE)
    return tuple(sorted(flags))


def rank_and_keep(entries: Sequence[ManifestEntry], scorer: Optional[ScorerHandle] = None,
                  keep: int = KEEP, shortlist: int = SHORTLIST) -> List[ManifestEntry]:
    """Score and rank the candidates of one real image.

    The top ``max(shortlist, keep)`` by score (ties by lower candidate index)
    form a review shortlist.  Within it unflagged entries are preferred and
    the first ``keep`` are kept; every other entry gets the ``rejected`` flag.
    Entries are returned in input order with ``score`` filled in.
    """
    if keep < 1:
        raise ValueError("keep must be >= 1")
    scorer = scorer or ScorerHandle()
    scored = [replace(e, score=scorer.score(e), flags=e.quality_flags) for e in entries]
    ranked = sorted(range(len(scored)), key=lambda i: (-scored[i].score, scored[i].candidate_index))
    short = ranked[:max(shortlist, keep)]
    short.sort(key=lambda i: (bool(scored[i].quality_flags), -scored[i].score,
                              scored[i].candidate_index))
    chosen = set(short[:keep])
    return [e if i in chosen else replace(e, flags=e.flags + (REJECTED,))
            for i, e in enumerate(scored)]


def write_manifest(entries: Iterable[ManifestEntry], path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in entries:
                fh.write(json.dumps(e.to_dict(), ensure_ascii=False))
                fh.write("\n")
    except OSError as exc:
        raise ImageIOError(f"cannot write manifest {path}: {exc}") from exc
    return path


def read_manifest(path) -> List[ManifestEntry]:
    entries = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ImageIOError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestParseError(str(exc), lineno) from exc
    return entries


def group_entries(entries: Sequence[ManifestEntry]) -> List[List[ManifestEntry]]:
    """Group entries by (real, mask) pair in order of first appearance."""
    groups: Dict[Tuple[str, str], List[ManifestEntry]] = {}
    for e in entries:
        groups.setdefault((e.real_path, e.mask_path), []).append(e)
    return list(groups.values())


def filter_manifest(entries: Sequence[ManifestEntry], scorer: Optional[ScorerHandle] = None,
                    keep: int = KEEP, shortlist: int = SHORTLIST) -> List[ManifestEntry]:
    out = []
    for group in group_entries(entries):
        out.extend(rank_and_keep(group, scorer, keep, shortlist))
    return out


@dataclass
class StatsReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    split_counts: Dict[str, int]
    kept: int
    rejected: int
    ratios: List[float]
    missing: List[str] = field(default_factory=list)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c)])
        return path

    def to_text(self) -> str:
        lines = [
            f"entries: {self.kept + self.rejected}",
            f"kept: {self.kept}",
            f"rejected: {self.rejected}",
        ]
        for split, n in sorted(self.split_counts.items()):
            lines.append(f"split {split}: {n}")
        if self.ratios:
            r = np.asarray(self.ratios)
            lines.append(f"foreground ratio: min {r.min():.4f} mean {r.mean():.4f} max {r.max():.4f}")
        lines.append("foreground ratio histogram:")
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            lines.append(f"  [{lo:.2f}, {hi:.2f}) {int(c)}")
        for m in self.missing:
            lines.append(f"missing: {m}")
        return "\n".join(lines) + "\n"


def ratio_histogram(ratios: Sequence[float], bins: int = HISTOGRAM_BINS):
    """Counts over ``bins`` uniform bins of [0, 1]; 1.0 falls in the last bin."""
    edges = np.arange(bins + 1) / bins
    counts = np.zeros(bins, dtype=np.int64)
    for r in ratios:
        counts[min(int(r * bins), bins - 1)] += 1
    return edges, counts


def _split_of(real_path: str) -> str:
    parent = Path(real_path).parent.name
    return parent or "."


def dataset_stats(entries: Sequence[ManifestEntry], base_dir=".", bins: int = HISTOGRAM_BINS,
                  ratio_of=None) -> StatsReport:
    """Foreground-ratio histogram of kept entries plus split and kept/rejected tallies.

    Mask paths are resolved against ``base_dir``.  Unreadable masks are
    listed in ``missing`` instead of aborting.  ``ratio_of`` overrides how a
    mask path becomes a ratio (mainly for tests).
    """
    base_dir = Path(base_dir)
    ratio_of = ratio_of or (lambda p: foreground_ratio(load_mask(p)))
    ratios, missing, split_counts = [], [], {}
    kept = rejected = 0
    cache = {}
    for e in entries:
        if e.rejected:
            rejected += 1
            continue
        kept += 1
        split = _split_of(e.real_path)
        split_counts[split] = split_counts.get(split, 0) + 1
        mask_path = base_dir / e.mask_path
        if mask_path not in cache:
            try:
                cache[mask_path] = ratio_of(mask_path)
            except RPBError as exc:
                log.warning("stats: %s", exc)
                cache[mask_path] = None
                missing.append(str(e.mask_path))
        if cache[mask_path] is not None:
            ratios.append(cache[mask_path])
    edges, counts = ratio_histogram(ratios, bins)
    return StatsReport(edges, counts, split_counts, kept, rejected, ratios, missing)


def list_images(directory) -> List[Path]:
    directory = Path(directory)
    return sorted({p for pat in IMAGE_PATTERNS for p in directory.glob(pat)}, key=lambda p: p.name)


def masks_for(real_path: Path, mask_dir) -> List[Path]:
    """``<stem>.png`` and ``<stem>_*.png`` in ``mask_dir``, sorted by name."""
    mask_dir = Path(mask_dir)
    stem = real_path.stem
    found = [p for p in mask_dir.glob(f"{stem}.png")]
    found += [p for p in mask_dir.glob(f"{stem}_*.png")
              if p.stem[len(stem) + 1:].isdigit()]
    return sorted(found, key=lambda p: p.name)


@dataclass
class SynthesisOptions:
    candidates: int = N_CANDIDATES
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX
    seed: int = 0
    threads: int = 1
    ratio_lo: float = RATIO_LO
    ratio_hi: float = RATIO_HI
    v_bg: float = BACKGROUND_VARIANCE_MIN
    d_fg: float = FOREGROUND_SHIFT_MAX
    mask_threshold: float = 0.5
    solver: SolverConfig = field(default_factory=SolverConfig)


def _synthesize_one(real_path: Path, mask_dir: Path, corpus: ReferenceCorpus,
                    opts: SynthesisOptions):
    image_id = real_path.name
    real = load_image(real_path)
    mask_paths = masks_for(real_path, mask_dir)
    if not mask_paths:
        log.warning("no mask for %s", real_path)
        return None
    masks = [load_mask(p, opts.mask_threshold) for p in mask_paths]
    try:
        mask_idx = select_mask_by_ratio(
            masks, make_rng(derive_seed(opts.seed, image_id, "mask")), opts.ratio_lo, opts.ratio_hi
        )
    except NoValidMaskError as exc:
        log.warning("%s: %s", real_path, exc)
        return None
    mask = masks[mask_idx]
    if real.channels == 1:
        real = real.to_rgb()
    results = generate_candidates(
        real, mask, corpus, opts.candidates, opts.seed,
        real_id=image_id, exclude_id=str(real_path.resolve()),
        config=opts.solver, alpha_range=(opts.alpha_min, opts.alpha_max),
    )
    return real, mask, mask_idx, results


def synthesize_dataset(real_dir, mask_dir, ref_dir, out_dir,
                       opts: Optional[SynthesisOptions] = None,
                       manifest_name: str = "manifest.jsonl") -> List[ManifestEntry]:
    """Generate candidates for every real image and write PNGs plus a manifest.

    Composites go to ``out_dir/composites/<stem>_<maskidx>_<k>.png`` and the
    selected masks to ``out_dir/masks/<stem>_<maskidx>.png``; manifest paths
    are relative to ``out_dir``.  The output is identical for any
    ``opts.threads``.
    """
    opts = opts or SynthesisOptions()
    out_dir = Path(out_dir)
    (out_dir / "composites").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    reals = list_images(real_dir)
    corpus = ReferenceCorpus.from_directory(
        ref_dir, loader=lambda p: load_image(p).to_rgb()
    )

    def task(path):
        return _synthesize_one(path, Path(mask_dir), corpus, opts)

    if opts.threads > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            outputs = list(pool.map(task, reals))
    else:
        outputs = [task(p) for p in reals]

    entries = []
    for real_path, out in zip(reals, outputs):
        if out is None:
            continue
        real, mask, mask_idx, results = out
        stem = real_path.stem
        mask_rel = f"masks/{stem}_{mask_idx}.png"
        save_mask(mask, out_dir / mask_rel)
        for res in results:
            comp_rel = f"composites/{stem}_{mask_idx}_{res.candidate_index}.png"
            save_image(res.composite, out_dir / comp_rel)
            entries.append(ManifestEntry(
                real_path=str(real_path),
                mask_path=mask_rel,
                composite_path=comp_rel,
                reference_path=corpus.labels[res.params.reference_id],
                placement=res.params.placement,
                alpha=res.params.alpha,
                seed=res.params.seed,
                candidate_index=res.candidate_index,
                score=None,
                flags=heuristic_flags(res, real, opts.v_bg, opts.d_fg),
            ))
    write_manifest(entries, out_dir / manifest_name)
    return entries

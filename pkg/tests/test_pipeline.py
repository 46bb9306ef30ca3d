import itertools
import json

import numpy as np
import pytest

from conftest import blob_mask, smooth_image, write_desk_corpus
from rpblend.errors import ManifestParseError, NoValidMaskError, ScoreFileMismatchError
from rpblend.imaging import Image, Mask, Region, load_image, load_mask
from rpblend.pipeline import (
    DEGENERATE_BACKGROUND,
    EXCESSIVE_COLOR_SHIFT,
    NO_CONVERGENCE,
    REJECTED,
    ManifestEntry,
    ScorerHandle,
    SynthesisOptions,
    dataset_stats,
    filter_manifest,
    generate_candidates,
    heuristic_flags,
    load_scores,
    masks_for,
    rank_and_keep,
    read_manifest,
    select_mask_by_ratio,
    synthesize_dataset,
    write_manifest,
)
from rpblend.synthesis import ReferenceCorpus, SyntheticResult, derive_seed, make_rng, random_poisson_blend


def mask_with_ratio(ratio, h=20, w=50):
    m = np.zeros(h * w, dtype=bool)
    m[: int(round(ratio * h * w))] = True
    return Mask(m.reshape(h, w))


def entry(k, score=None, flags=(), real="r.png"):
    return ManifestEntry(real, "m.png", f"c_{k}.png", "ref.png", Region(1, 1, 2, 2),
                         0.7, 1000 + k, k, score, flags)


class TestSelectMask:
    def test_only_valid_one(self):
        masks = [mask_with_ratio(r) for r in (0.005, 0.5, 0.9)]
        for seed in range(50):
            assert select_mask_by_ratio(masks, make_rng(seed)) == 1

    def test_none_valid(self):
        with pytest.raises(NoValidMaskError):
            select_mask_by_ratio([mask_with_ratio(0.9)] * 3, make_rng(0))

    def test_replay(self):
        masks = [mask_with_ratio(0.1), mask_with_ratio(0.3)]
        picks_a = [select_mask_by_ratio(masks, make_rng(s)) for s in range(20)]
        picks_b = [select_mask_by_ratio(masks, make_rng(s)) for s in range(20)]
        assert picks_a == picks_b
        assert set(picks_a) == {0, 1}


@pytest.fixture
def scene():
    rng = np.random.default_rng(3)
    real = smooth_image(rng, 16, 16)
    mask = blob_mask(rng, 16, 16, margin=2)
    corpus = ReferenceCorpus([smooth_image(rng, 20, 22) for _ in range(4)])
    return real, mask, corpus


class TestGenerate:
    def test_single_equals_direct(self, scene):
        real, mask, corpus = scene
        [one] = generate_candidates(real, mask, corpus, 1, 42, real_id="img")
        direct = random_poisson_blend(real, mask, corpus, derive_seed(42, "img", 0))
        assert one.composite == direct.composite
        assert one.params == direct.params

    def test_five_candidates(self, scene):
        real, mask, corpus = scene
        res = generate_candidates(real, mask, corpus, master_seed=7, real_id="img")
        assert [r.candidate_index for r in res] == [0, 1, 2, 3, 4]
        assert len({r.params.seed for r in res}) == 5

    def test_threads_match_serial(self, scene):
        real, mask, corpus = scene
        serial = generate_candidates(real, mask, corpus, 5, 9, real_id="img", threads=1)
        parallel = generate_candidates(real, mask, corpus, 5, 9, real_id="img", threads=8)
        for a, b in zip(serial, parallel):
            assert a.composite == b.composite and a.params == b.params

    def test_failed_image_gives_empty_list(self, scene):
        real, mask, _ = scene
        tiny = ReferenceCorpus([Image(np.zeros((3, 3, 3)))])
        assert generate_candidates(real, mask, tiny, 3, 0) == []


def _result(composite, mask, converged=True):
    from rpblend.synthesis import BlendParams

    box = Region(0, 0, 1, 1)
    return SyntheticResult(composite, mask, BlendParams(0.8, 0, 0, box, box), converged)


class TestHeuristicFlags:
    def test_solid_background(self):
        data = np.zeros((8, 8, 3))
        m = np.zeros((8, 8), bool)
        m[2:6, 2:6] = True
        data[m] = np.random.default_rng(0).random((16, 3))
        real = Image(data)
        assert DEGENERATE_BACKGROUND in heuristic_flags(_result(real, Mask(m)), real)

    def test_identical_foreground(self, rng):
        real = Image(rng.random((8, 8, 3)))
        m = Mask(rng.random((8, 8)) > 0.5)
        assert heuristic_flags(_result(real, m), real) == ()

    def test_large_shift(self, rng):
        real = Image(rng.random((8, 8, 3)) * 0.5)
        m = np.zeros((8, 8), bool)
        m[1:5, 2:7] = True
        shifted = real.data.copy()
        shifted[m] += 0.5
        cand = _result(Image(shifted), Mask(m))
        # direct loop over foreground pixels
        total, n = 0.0, 0
        for i in range(8):
            for j in range(8):
                if m[i, j]:
                    for c in range(3):
                        total += abs(shifted[i, j, c] - real.data[i, j, c])
                        n += 1
        assert total / n > 0.35
        assert EXCESSIVE_COLOR_SHIFT in heuristic_flags(cand, real)

    def test_no_convergence_flag(self, rng):
        real = Image(rng.random((8, 8, 3)))
        m = Mask(rng.random((8, 8)) > 0.5)
        assert heuristic_flags(_result(real, m, converged=False), real) == (NO_CONVERGENCE,)


class TestRankAndKeep:
    def test_external_scores_shortlist(self):
        scores = [0.9, 0.5, 0.7, 0.1, 0.3]
        entries = [entry(k) for k in range(5)]
        scorer = ScorerHandle("external-file", None, {f"c_{k}.png": s for k, s in enumerate(scores)})
        out = rank_and_keep(entries, scorer, keep=2)
        assert [e.candidate_index for e in out if not e.rejected] == [0, 2]
        out = rank_and_keep(entries, scorer, keep=1)
        assert [e.candidate_index for e in out if not e.rejected] == [0]
        assert [e.score for e in out] == scores

    def test_ties_keep_lowest_index(self):
        scorer = ScorerHandle("external-file", None, {f"c_{k}.png": 0.5 for k in range(5)})
        out = rank_and_keep([entry(k) for k in (3, 1, 4, 0, 2)], scorer)
        assert [e.candidate_index for e in out if not e.rejected] == [0]

    def test_flagged_never_kept_any_order(self):
        scores = {f"c_{k}.png": 0.5 for k in range(5)}
        scorer = ScorerHandle("external-file", None, scores)
        for flagged in range(5):
            base = [entry(k, flags=(DEGENERATE_BACKGROUND,) if k == flagged else ()) for k in range(5)]
            # comparator oracle: the two lowest indices form the shortlist, unflagged first
            short = sorted(range(5))[:2]
            expected = min(k for k in short if k != flagged)
            for perm in itertools.permutations(base):
                kept = [e for e in rank_and_keep(list(perm), scorer) if not e.rejected]
                assert len(kept) == 1
                assert kept[0].candidate_index == expected
                assert DEGENERATE_BACKGROUND not in kept[0].flags

    def test_heuristic_scores(self):
        entries = [entry(0, flags=(EXCESSIVE_COLOR_SHIFT, DEGENERATE_BACKGROUND)),
                   entry(1, flags=(DEGENERATE_BACKGROUND,)), entry(2), entry(3)]
        out = rank_and_keep(entries)
        assert [e.score for e in out] == [-2.0, -1.0, 0.0, 0.0]
        assert [e.candidate_index for e in out if not e.rejected] == [2]
        for e in out:
            if e.rejected:
                assert e.flags  # explanatory flag present

    def test_missing_score(self):
        scorer = ScorerHandle("external-file", None, {"c_0.png": 1.0})
        with pytest.raises(ScoreFileMismatchError):
            rank_and_keep([entry(0), entry(1)], scorer)

    def test_rerank_clears_old_rejection(self):
        first = rank_and_keep([entry(k) for k in range(3)])
        again = rank_and_keep(first)
        assert [e.rejected for e in again] == [e.rejected for e in first]

    def test_filter_groups(self):
        entries = [entry(k, real="a.png") for k in range(5)] + [entry(k, real="b.png") for k in range(5)]
        out = filter_manifest(entries, keep=1)
        assert sum(not e.rejected for e in out) == 2
        assert [e.real_path for e in out] == [e.real_path for e in entries]


class TestManifest:
    def test_empty(self, tmp_path):
        p = write_manifest([], tmp_path / "m.jsonl")
        assert p.read_bytes() == b""
        assert read_manifest(p) == []

    def test_single_round_trip(self, tmp_path):
        e = entry(3, score=0.25, flags=(REJECTED, DEGENERATE_BACKGROUND))
        p = write_manifest([e], tmp_path / "m.jsonl")
        assert read_manifest(p) == [e]
        keys = list(json.loads(p.read_text().splitlines()[0]))
        assert keys == ["real_path", "mask_path", "composite_path", "reference_path", "placement",
                        "alpha", "seed", "candidate_index", "score", "flags"]

    def test_order_preserved(self, tmp_path):
        rng = np.random.default_rng(0)
        entries = [entry(int(k)) for k in rng.integers(0, 5, 1000)]
        entries = [ManifestEntry(f"r{i}.png", e.mask_path, e.composite_path, e.reference_path,
                                 e.placement, float(rng.random()), int(rng.integers(2 ** 63)),
                                 e.candidate_index) for i, e in enumerate(entries)]
        p = write_manifest(entries, tmp_path / "m.jsonl")
        assert read_manifest(p) == entries

    def test_parse_error_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        good = json.dumps(entry(0).to_dict())
        p.write_text(good + "\n" + good + "\n{oops\n", encoding="utf-8")
        with pytest.raises(ManifestParseError) as info:
            read_manifest(p)
        assert info.value.lineno == 3

    def test_unicode(self, tmp_path):
        e = ManifestEntry("räl/图.png", "m.png", "c.png", "r.png", Region(0, 0, 1, 1), 0.6, 1, 0)
        p = write_manifest([e], tmp_path / "u.jsonl")
        assert "图" in p.read_text(encoding="utf-8")
        assert read_manifest(p) == [e]


def test_load_scores(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("path,score\nc_0.png,0.5\nc_1.png,1.25\n")
    assert load_scores(p) == {"c_0.png": 0.5, "c_1.png": 1.25}


class TestStats:
    def test_full_frame_last_bin(self):
        rep = dataset_stats([entry(0)], ratio_of=lambda p: 1.0)
        assert rep.counts[-1] == 1 and rep.counts.sum() == 1

    def test_bins(self):
        ratios = iter([0.25, 0.25, 0.75])
        es = [ManifestEntry("train/r.png", f"m{k}.png", "c.png", "ref", Region(0, 0, 1, 1), 0.7, 0, k)
              for k in range(3)]
        rep = dataset_stats(es, ratio_of=lambda p: next(ratios))
        assert rep.counts[5] == 2 and rep.counts[15] == 1 and rep.counts.sum() == 3
        assert rep.split_counts == {"train": 3}

    def test_missing_mask_reported(self, tmp_path):
        rep = dataset_stats([entry(0)], base_dir=tmp_path)
        assert rep.missing == ["m.png"] and rep.counts.sum() == 0

    def test_csv_and_text(self, tmp_path):
        rep = dataset_stats([entry(0), entry(1, flags=(REJECTED,))], ratio_of=lambda p: 0.5)
        rows = rep.to_csv(tmp_path / "s.csv").read_text().splitlines()
        assert rows[0] == "bin_lo,bin_hi,count"
        assert len(rows) == 21
        assert rows[11] == "0.50,0.55,1"
        text = rep.to_text()
        assert "kept: 1" in text and "rejected: 1" in text


def test_masks_for(tmp_path):
    reals, masks = write_desk_corpus(tmp_path, 3)
    names = [p.name for p in masks_for(reals / "img002.png", masks)]
    assert names == ["img002_0.png", "img002_1.png", "img002_2.png"]


def test_synthesize_small_run(tmp_path):
    reals, masks = write_desk_corpus(tmp_path, 6)
    out = tmp_path / "out"
    entries = synthesize_dataset(reals, masks, reals, out, SynthesisOptions(candidates=3, seed=5))
    assert len(entries) == 18
    for e in entries:
        comp = load_image(out / e.composite_path)
        real = load_image(e.real_path)
        m = load_mask(out / e.mask_path).data
        assert np.array_equal(comp.to_uint8()[~m], real.to_uint8()[~m])
        assert e.reference_path != e.real_path
        assert 0.6 <= e.alpha <= 1.0
    report = dataset_stats(filter_manifest(entries), base_dir=out)
    assert report.kept == 6 and report.rejected == 12
    assert all(0.01 <= r <= 0.80 for r in report.ratios)

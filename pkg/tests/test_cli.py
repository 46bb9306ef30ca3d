import csv
import json

import numpy as np
import pytest
from PIL import Image as PILImage

from conftest import blob_mask, smooth_image, write_desk_corpus
from rpblend.cli import main
from rpblend.imaging import load_image, save_image, save_mask
from rpblend.kernels import write_fixture
from rpblend.pipeline import read_manifest


@pytest.fixture
def pair(tmp_path, rng):
    src = smooth_image(rng, 20, 20)
    dst = smooth_image(rng, 30, 30)
    mask = blob_mask(rng, 20, 20, margin=2)
    return (save_image(src, tmp_path / "src.png"), save_image(dst, tmp_path / "dst.png"),
            save_mask(mask, tmp_path / "mask.png"), mask)


def test_blend(tmp_path, pair, capsys):
    src, dst, mask_path, mask = pair
    out = tmp_path / "out.png"
    assert main(["blend", "--src", str(src), "--dst", str(dst), "--mask", str(mask_path),
                 "--offset", "5,4", "--out", str(out)]) == 0
    res, before = load_image(out), load_image(dst)
    moved = np.zeros((30, 30), bool)
    moved[5:25, 4:24] = mask.data
    assert np.array_equal(res.data[~moved], before.data[~moved])
    assert "iterations=" in capsys.readouterr().out


def test_blend_alpha_and_dense(tmp_path, pair):
    src, dst, mask_path, _ = pair
    out = tmp_path / "a.png"
    assert main(["blend", "--src", str(src), "--dst", str(dst), "--mask", str(mask_path),
                 "--alpha", "0.7", "--solver", "dense-direct", "--out", str(out)]) == 0
    assert load_image(out).shape == (30, 30, 3)


def test_blend_error_exit_code(tmp_path, pair):
    src, dst, mask_path, _ = pair
    assert main(["blend", "--src", str(src), "--dst", str(dst), "--mask", str(mask_path),
                 "--offset", "40,0", "--out", str(tmp_path / "x.png")]) == 2


def test_bad_offset():
    with pytest.raises(SystemExit):
        main(["blend", "--src", "a", "--dst", "b", "--mask", "c", "--offset", "x", "--out", "o"])


def test_synthesize_filter_stats(tmp_path, capsys):
    reals, masks = write_desk_corpus(tmp_path, 4)
    out = tmp_path / "ds"
    assert main(["synthesize", "--reals", str(reals), "--masks", str(masks), "--refs", str(reals),
                 "--out", str(out), "--candidates", "3", "--seed", "11"]) == 0
    manifest = out / "manifest.jsonl"
    entries = read_manifest(manifest)
    assert len(entries) == 12

    scores = tmp_path / "scores.csv"
    with open(scores, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "score"])
        for e in entries:
            w.writerow([e.composite_path, e.candidate_index])
    filtered = tmp_path / "filtered.jsonl"
    assert main(["filter", "--manifest", str(manifest), "--scores", str(scores),
                 "--out", str(filtered)]) == 0
    kept = [e for e in read_manifest(filtered) if not e.rejected]
    assert len(kept) == 4
    assert all(e.candidate_index == 2 for e in kept)

    # stats resolves mask paths next to the manifest
    (out / "filtered.jsonl").write_bytes(filtered.read_bytes())
    capsys.readouterr()
    report = tmp_path / "stats.csv"
    assert main(["stats", "--manifest", str(out / "filtered.jsonl"), "--out", str(report)]) == 0
    rows = report.read_text().splitlines()
    assert rows[0] == "bin_lo,bin_hi,count"
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == 4
    assert report.with_suffix(".png").stat().st_size > 0
    assert "kept: 4" in capsys.readouterr().out


def test_filter_in_place_heuristic(tmp_path):
    reals, masks = write_desk_corpus(tmp_path, 2)
    out = tmp_path / "ds"
    main(["synthesize", "--reals", str(reals), "--masks", str(masks), "--refs", str(reals),
          "--out", str(out), "--candidates", "2"])
    manifest = out / "manifest.jsonl"
    assert main(["filter", "--manifest", str(manifest)]) == 0
    lines = [json.loads(x) for x in manifest.read_text().splitlines()]
    assert sum("rejected" not in d["flags"] for d in lines) == 2


def test_eval(tmp_path, rng, capsys):
    for d in ("pred", "gt", "mask"):
        (tmp_path / d).mkdir()
    for k in range(2):
        gt = smooth_image(rng, 32, 32)
        save_image(gt, tmp_path / "gt" / f"im{k}.png")
        save_image(smooth_image(rng, 32, 32), tmp_path / "pred" / f"im{k}.png")
        save_mask(blob_mask(rng, 32, 32), tmp_path / "mask" / f"im{k}.png")
    out = tmp_path / "metrics.csv"
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                 "--mask", str(tmp_path / "mask"), "--resize", "16", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["name", "psnr", "mse", "fmse", "ssim"]
    assert [r[0] for r in rows[1:]] == ["im0", "im1", "mean"]
    assert float(rows[3][2]) == pytest.approx((float(rows[1][2]) + float(rows[2][2])) / 2, abs=1e-5)
    assert out.with_suffix(".png").exists()
    assert "PSNR" in capsys.readouterr().out


def test_eval_no_common_files(tmp_path):
    for d in ("p", "g", "m"):
        (tmp_path / d).mkdir()
    PILImage.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "p" / "a.png")
    assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"),
                 "--mask", str(tmp_path / "m"), "--out", str(tmp_path / "o.csv"),
                 "--no-figure"]) == 1


def test_maca_check(tmp_path, rng, capsys):
    path = write_fixture(tmp_path / "f.bin", rng.normal(size=(1, 4, 6, 6)), rng.random((6, 6)) > 0.5)
    assert main(["maca-check", "--fixture", str(path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6 and all(line.startswith("PASS") for line in lines)


def test_maca_check_bad_file(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + bytes(20))
    assert main(["maca-check", "--fixture", str(bad)]) == 2

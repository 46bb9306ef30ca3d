import numpy as np
import pytest
from PIL import Image as PILImage
from scipy import ndimage

from rpblend.imaging import Image, Mask

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.append((marker.args[0], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in _ACCEPTANCE:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] {label}")


def smooth_image(rng, h, w, c=3, sigma=2.0):
    """Random low-frequency image spanning most of [0, 1]."""
    noise = rng.random((h, w, c))
    out = np.stack([ndimage.gaussian_filter(noise[:, :, k], sigma) for k in range(c)], axis=2)
    lo, hi = out.min(), out.max()
    out = (out - lo) / (hi - lo) if hi > lo else np.full_like(out, 0.5)
    return Image(0.05 + 0.9 * out)


def blob_mask(rng, h, w, margin=1, blobs=2):
    """Union of random ellipses kept ``margin`` pixels away from the border."""
    yy, xx = np.mgrid[0:h, 0:w]
    m = np.zeros((h, w), dtype=bool)
    inner_h, inner_w = h - 2 * margin, w - 2 * margin
    for _ in range(blobs):
        cy = rng.uniform(margin, margin + inner_h - 1)
        cx = rng.uniform(margin, margin + inner_w - 1)
        ry = rng.uniform(1.0, max(1.5, inner_h / 3))
        rx = rng.uniform(1.0, max(1.5, inner_w / 3))
        m |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    m[:margin] = m[h - margin:] = False
    m[:, :margin] = m[:, w - margin:] = False
    if not m.any():
        m[h // 2, w // 2] = True
    return Mask(m)


def quantized(img: Image) -> Image:
    """Round-trip through 8-bit, as a file would."""
    return Image.from_uint8(img.to_uint8())


def write_desk_corpus(root, n, size=24, seed=0):
    """``n`` real images, each with masks named ``<stem>_<k>.png``."""
    rng = np.random.default_rng(seed)
    reals, masks = root / "reals", root / "masks"
    reals.mkdir(parents=True)
    masks.mkdir()
    for i in range(n):
        img = smooth_image(rng, size, size)
        PILImage.fromarray(img.to_uint8()).save(reals / f"img{i:03d}.png")
        for j in range(1 + i % 3):
            m = blob_mask(rng, size, size, margin=1, blobs=1 + j)
            PILImage.fromarray(m.data.astype(np.uint8) * 255).save(masks / f"img{i:03d}_{j}.png")
    # an extra mask for the first image that is too small to be eligible
    tiny = np.zeros((size, size), np.uint8)
    tiny[5, 5] = 255
    PILImage.fromarray(tiny).save(masks / "img000_9.png")
    return reals, masks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

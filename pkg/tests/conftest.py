import numpy as np
import pytest
import torch

from crownseg.structures import Detection, GroundTruth


def random_blob(rng: np.random.Generator, size: int = 16) -> np.ndarray:
    """A non-empty rectangle-ish mask with a few pixels toggled."""
    y0, x0 = rng.integers(0, size - 2, 2)
    h, w = rng.integers(2, size // 2 + 2, 2)
    m = np.zeros((size, size), bool)
    m[y0:y0 + h, x0:x0 + w] = True
    flips = rng.integers(0, size, (rng.integers(0, 4), 2))
    m[flips[:, 0], flips[:, 1]] ^= True
    if not m.any():
        m[y0, x0] = True
    return m


def jitter(rng, mask):
    """A mask overlapping ``mask`` to a random degree."""
    dy, dx = rng.integers(-2, 3, 2)
    m = np.roll(np.roll(mask, dy, 0), dx, 1)
    if not m.any():
        m = mask.copy()
    return m


def detection_from_mask(mask, label, score):
    ys, xs = np.nonzero(mask)
    return Detection((xs.min(), ys.min(), xs.max() + 1, ys.max() + 1), label, score, mask=mask)


def random_fixture(rng, classes=("a", "b"), max_gt=5, max_pred=5, n_images=None, size=16):
    """Predictions and GT over one to three images, scores on a coarse grid to create ties."""
    n_images = n_images or int(rng.integers(1, 4))
    gt, preds = {}, {}
    for i in range(n_images):
        gts = [GroundTruth(random_blob(rng, size), str(rng.choice(classes))) for _ in range(rng.integers(0, max_gt + 1))]
        ps = []
        for _ in range(rng.integers(0, max_pred + 1)):
            if gts and rng.random() < 0.7:
                src = gts[rng.integers(len(gts))]
                m, lab = jitter(rng, src.mask), src.class_label if rng.random() < 0.8 else str(rng.choice(classes))
            else:
                m, lab = random_blob(rng, size), str(rng.choice(classes))
            ps.append(detection_from_mask(m, lab, float(rng.integers(1, 11)) / 10))
        gt[f"img{i}"] = gts
        preds[f"img{i}"] = ps
    return preds, gt


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from stickerguard import classifier as clf
from stickerguard import scenes


@pytest.fixture(scope="session")
def small_data():
    train, test = scenes.generate_dataset(60, (0.8, 0.2), master_seed=11)
    return train, test


@pytest.fixture(scope="session")
def small_model(small_data):
    """Quick model for unit tests; the acceptance suite trains the full one."""
    train, _ = small_data
    cfg = clf.TrainConfig(epochs=3, n_classes=scenes.N_CLASSES)
    return clf.train([(s.image, s.true_label) for s in train], cfg, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=24, w=24):
    return rng.random((h, w, 3))


ACCEPTANCE = []


def record_criterion(number, ok, detail):
    """Remember one acceptance verdict; the lines are printed after the run."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append((number, line))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)

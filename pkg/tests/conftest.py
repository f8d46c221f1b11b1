import numpy as np
import pytest
from PIL import Image

from pcos_screen.dataset import ImageRecord

ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, desc = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {desc}")


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


@pytest.fixture
def toy_root(tmp_path):
    """2 infected + 3 notinfected distinct grayscale PNGs."""
    root = tmp_path / "data"
    for k in range(2):
        write_png(root / "infected" / f"i{k}.png", np.full((12, 16), 200 + k, np.uint8))
    for k in range(3):
        write_png(root / "notinfected" / f"n{k}.png", np.full((12, 16), 40 + k, np.uint8))
    return root


def fake_records(n_infected, n_not):
    recs = [ImageRecord(f"i{k:05d}", f"/x/infected/{k}.png", "infected", 8, 8, 1) for k in range(n_infected)]
    recs += [ImageRecord(f"n{k:05d}", f"/x/notinfected/{k}.png", "notinfected", 8, 8, 1) for k in range(n_not)]
    return recs

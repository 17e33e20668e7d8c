import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from alds.model import NetworkModel  # noqa: E402

_ACCEPTANCE = []


def record_criterion(number, title, ok, detail=""):
    _ACCEPTANCE.append((number, title, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20211206)


def random_model(rng, shapes, names=None):
    return NetworkModel.from_weights([rng.standard_normal(s) for s in shapes], names=names)


def grouped_low_rank(rng, f, c, k1, k2, groups=3, rank=1, noise=1e-2):
    """Weights whose channel groups each live in their own low-rank subspace."""
    w = np.empty((f, c, k1, k2))
    base, extra = divmod(c, groups)
    start = 0
    for g in range(groups):
        stop = start + base + (1 if g < extra else 0)
        d = (stop - start) * k1 * k2
        block = rng.standard_normal((f, rank)) @ rng.standard_normal((rank, d))
        w[:, start:stop] = block.reshape(f, stop - start, k1, k2)
        start = stop
    return w + noise * rng.standard_normal(w.shape)

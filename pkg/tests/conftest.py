import numpy as np
import pytest

from mloc.embedder import build_embedder
from mloc.siamese import pair_loss


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def embedder64():
    """Fresh built-in embedder in double precision."""
    return build_embedder(seed=3, dtype=np.float64)


def linear_loss(weights):
    """loss = sum(out * weights): gradient w.r.t. the output is ``weights``."""
    def fn(out):
        return float(np.sum(out * weights)), weights.copy()
    return fn


def head_loss(anchor, same, other, lam):
    """Contrastive mixup head on trunk outputs, as a finite_diff_check loss_fn."""
    def fn(Z):
        return pair_loss(Z, np.array(anchor), np.array(same), np.array(other), np.array(lam))
    return fn


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Register a one-line acceptance verdict, echoed in the terminal summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

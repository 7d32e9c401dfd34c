import numpy as np
import pytest

from ringmice.ring import CATEGORICAL, CONTINUOUS, AttrSpace

def onehot_gram(columns, space):
    """Brute-force one-hot XᵀX with intercept, columns in sorted-code order."""
    n = len(columns[0]) if columns else 0
    blocks = [np.ones((n, 1))]
    for i, col in enumerate(columns):
        if space.is_categorical(i):
            codes = np.unique(col)
            blocks.append((np.asarray(col)[:, None] == codes[None, :]).astype(float))
        else:
            blocks.append(np.asarray(col, dtype=float)[:, None])
    X = np.hstack(blocks)
    return X.T @ X

def random_table(rng, n_rows, kinds, n_cat=5):
    space = AttrSpace(tuple(f"a{i}" for i in range(len(kinds))), tuple(kinds))
    cols = []
    for k in kinds:
        if k == CATEGORICAL:
            cols.append(rng.integers(0, n_cat, n_rows))
        else:
            cols.append(rng.normal(size=n_rows) * rng.uniform(0.1, 10))
    return space, cols

def max_rel_err(a, b):
    """Entry-wise relative error scaled by the Cauchy-Schwarz bound of each Gram entry."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.sqrt(np.abs(np.outer(np.diag(b), np.diag(b))))
    scale = np.maximum(np.abs(b), d)
    scale[scale == 0] = 1.0
    return float(np.max(np.abs(a - b) / scale, initial=0.0))

@pytest.fixture
def rng():
    return np.random.default_rng(12345)

ACCEPTANCE_LINES = pytest.StashKey[list]()

@pytest.fixture
def verdict(request, capsys):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2} {title}: {detail}"
        request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert passed, line
    return record

def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)

import mpmath
import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


def central_difference(f, x, rel_step=1e-5):
    """Entrywise central differences of scalar ``f`` at array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        h = rel_step * max(1.0, abs(x[idx]))
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def max_rel_err(analytic, numeric, floor=1e-8):
    """Largest entrywise |a - n| / max(|a|, |n|), ignoring pairs both below ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    keep = scale > floor
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(a - n)[keep] / scale[keep]))


def mp_approx_log_c(p, kappa):
    """The uniform-expansion normalizer evaluated in 40-digit arithmetic."""
    nu = mpmath.mpf(p) / 2 - 1
    r = kappa / nu
    q = mpmath.sqrt(1 + r * r)
    eta = q + mpmath.log(r) - mpmath.log(1 + q)
    log_i = nu * eta - mpmath.log(2 * mpmath.pi * nu) / 2 - mpmath.log(q) / 2
    return (p / mpmath.mpf(2) - 1) * mpmath.log(kappa) - (p / mpmath.mpf(2)) * mpmath.log(2 * mpmath.pi) - log_i


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")

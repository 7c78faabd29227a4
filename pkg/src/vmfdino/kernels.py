"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The public name (``log_bessel_i_series``, ``greedy_groups``, ``knn_predict``)
is bound to whichever implementation ``_accel.USE_NUMBA`` selects. Both
twins stay importable so tests and the benchmark can compare them.
"""

import math

import numpy as np

from vmfdino._accel import njit, pick

# Relative size below which a series term no longer affects a float64 sum.
_SERIES_RTOL = 1e-17
MAX_SERIES_TERMS = 2_000_000


def _peak_index(nu, x):
    # Largest term of sum_m (x/2)^(nu+2m) / (m! Gamma(nu+m+1)).
    half = 0.5 * x
    m = int(math.floor(0.5 * (-nu + math.sqrt(nu * nu + x * x))))
    m = max(m, 0)
    # Nudge onto the exact peak; the closed form can be off by one.
    while (m + 1.0) * (nu + m + 1.0) < half * half:
        m += 1
    while m > 0 and m * (nu + m) > half * half:
        m -= 1
    return m


# ---------------------------------------------------------------------------
# log I_nu(x) by peak-centred power series
# ---------------------------------------------------------------------------


@njit
def _log_bessel_i_series_nb(nu, x):
    half = 0.5 * x
    h2 = half * half
    m0 = int(math.floor(0.5 * (-nu + math.sqrt(nu * nu + x * x))))
    if m0 < 0:
        m0 = 0
    while (m0 + 1.0) * (nu + m0 + 1.0) < h2:
        m0 += 1
    while m0 > 0 and m0 * (nu + m0) > h2:
        m0 -= 1
    log_peak = (nu + 2.0 * m0) * math.log(half) - math.lgamma(m0 + 1.0) - math.lgamma(nu + m0 + 1.0)

    # Kahan-compensated sum of t_m / t_peak minus the peak itself, walking
    # away from the peak; log1p keeps log I_0(x) ~ x^2/4 accurate for tiny x.
    s = 0.0
    comp = 0.0
    used = 1
    converged = False
    term = 1.0
    m = m0
    while used < MAX_SERIES_TERMS:
        ratio = h2 / ((m + 1.0) * (nu + m + 1.0))
        term *= ratio
        m += 1
        used += 1
        yk = term - comp
        tk = s + yk
        comp = (tk - s) - yk
        s = tk
        if ratio < 1.0 and term * ratio / (1.0 - ratio) <= _SERIES_RTOL * s:
            converged = True
            break
    if not converged:
        return math.nan, used

    term = 1.0
    m = m0
    while m > 0:
        if used >= MAX_SERIES_TERMS:
            return math.nan, used
        ratio = m * (nu + m) / h2
        term *= ratio
        m -= 1
        used += 1
        yk = term - comp
        tk = s + yk
        comp = (tk - s) - yk
        s = tk
        if ratio < 1.0 and term * ratio / (1.0 - ratio) <= _SERIES_RTOL * s:
            break
    return log_peak + math.log1p(s), used


def _log_bessel_i_series_np(nu, x):
    half = 0.5 * x
    h2 = half * half
    m0 = _peak_index(nu, x)
    log_peak = (nu + 2.0 * m0) * math.log(half) - math.lgamma(m0 + 1.0) - math.lgamma(nu + m0 + 1.0)

    chunk = int(64 + 16 * math.sqrt(m0 + nu + 1.0))
    pieces = []
    used = 1

    # upward: t_{m+1}/t_m = h2 / ((m+1)(nu+m+1))
    start, log_t = m0, 0.0
    while True:
        m = np.arange(start, start + chunk, dtype=np.float64)
        log_ratio = np.log(h2) - np.log(m + 1.0) - np.log(nu + m + 1.0)
        log_terms = log_t + np.cumsum(log_ratio)
        pieces.append(np.exp(log_terms))
        used += chunk
        last_ratio = math.exp(log_ratio[-1])
        total = math.fsum(np.concatenate(pieces))
        tail = pieces[-1][-1] * last_ratio / (1.0 - last_ratio) if last_ratio < 1.0 else math.inf
        if tail <= _SERIES_RTOL * total:
            break
        if used >= MAX_SERIES_TERMS:
            return math.nan, used
        start += chunk
        log_t = log_terms[-1]

    # downward: t_{m-1}/t_m = m (nu+m) / h2
    if m0 > 0:
        m = np.arange(m0, 0, -1, dtype=np.float64)
        log_ratio = np.log(m) + np.log(nu + m) - np.log(h2)
        pieces.append(np.exp(np.cumsum(log_ratio)))
        used += m.size

    s = math.fsum(np.concatenate(pieces))
    return log_peak + math.log1p(s), used


log_bessel_i_series = pick(_log_bessel_i_series_nb, _log_bessel_i_series_np)


# ---------------------------------------------------------------------------
# greedy first-seed grouping of prototypes
# ---------------------------------------------------------------------------


@njit
def _greedy_groups_nb(cos, threshold):
    k = cos.shape[0]
    labels = np.empty(k, dtype=np.int64)
    seeds = np.empty(k, dtype=np.int64)
    n_groups = 0
    for j in range(k):
        found = -1
        for g in range(n_groups):
            if cos[seeds[g], j] > threshold:
                found = g
                break
        if found < 0:
            seeds[n_groups] = j
            labels[j] = n_groups
            n_groups += 1
        else:
            labels[j] = found
    return labels, seeds[:n_groups].copy()


def _greedy_groups_np(cos, threshold):
    k = cos.shape[0]
    labels = np.empty(k, dtype=np.int64)
    seeds = []
    for j in range(k):
        if seeds:
            hits = np.flatnonzero(cos[seeds, j] > threshold)
            if hits.size:
                labels[j] = hits[0]
                continue
        labels[j] = len(seeds)
        seeds.append(j)
    return labels, np.asarray(seeds, dtype=np.int64)


greedy_groups = pick(_greedy_groups_nb, _greedy_groups_np)


# ---------------------------------------------------------------------------
# k-nearest-neighbour majority vote
# ---------------------------------------------------------------------------


@njit
def _knn_predict_nb(sims, train_labels, k, n_classes):
    n = sims.shape[0]
    out = np.empty(n, dtype=np.int64)
    counts = np.zeros(n_classes, dtype=np.int64)
    mass = np.zeros(n_classes, dtype=np.float64)
    order = np.empty(k, dtype=np.int64)
    top = np.empty(k, dtype=np.float64)
    m = sims.shape[1]
    for i in range(n):
        # bounded insertion keeps the k best in stable descending order:
        # an equal similarity never displaces an earlier index
        filled = 0
        for j in range(m):
            s = sims[i, j]
            if filled == k and not s > top[k - 1]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and s > top[pos - 1]:
                if pos < k:
                    top[pos] = top[pos - 1]
                    order[pos] = order[pos - 1]
                pos -= 1
            top[pos] = s
            order[pos] = j
            if filled < k:
                filled += 1
        counts[:] = 0
        mass[:] = 0.0
        for r in range(k):
            j = order[r]
            c = train_labels[j]
            counts[c] += 1
            mass[c] += sims[i, j]
        best = 0
        for c in range(1, n_classes):
            if counts[c] > counts[best] or (counts[c] == counts[best] and mass[c] > mass[best]):
                best = c
        out[i] = best
    return out


def _knn_predict_np(sims, train_labels, k, n_classes):
    n = sims.shape[0]
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    labels = train_labels[order]
    top = np.take_along_axis(sims, order, axis=1)
    rows = np.repeat(np.arange(n), k)
    counts = np.zeros((n, n_classes), dtype=np.int64)
    mass = np.zeros((n, n_classes))
    np.add.at(counts, (rows, labels.ravel()), 1)
    np.add.at(mass, (rows, labels.ravel()), top.ravel())
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        cand = np.flatnonzero(counts[i] == counts[i].max())
        # strict > keeps the lowest label on exact ties
        out[i] = cand[np.argmax(mass[i, cand])]
    return out


knn_predict = pick(_knn_predict_nb, _knn_predict_np)

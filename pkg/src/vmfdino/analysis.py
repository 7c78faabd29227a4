"""Post-hoc diagnostics for a trained prototype bank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vmfdino import kernels
from vmfdino.errors import DomainError
from vmfdino.head import PrototypeBank, student_logits
from vmfdino.vmf import normalize

MEAN_NORM_FLOOR = 1e-6


@dataclass(frozen=True)
class DuplicateReport:
    threshold: float
    labels: np.ndarray  # group id per prototype
    seeds: np.ndarray  # founding prototype per group
    unique_count: int
    largest_group: int
    largest_group_size: int
    largest_group_centroid: np.ndarray

    @property
    def groups(self):
        return [np.flatnonzero(self.labels == g) for g in range(self.unique_count)]

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.unique_count)


def _check_threshold(t):
    if not 0.0 < t < 1.0:
        raise DomainError(f"cosine threshold must lie in (0, 1), got {t!r}")


def group_centroid(directions, members):
    m = directions[members].mean(axis=0)
    n = np.linalg.norm(m)
    # antipodal members can cancel; fall back to the founding member
    return m / n if n > 1e-12 else directions[members[0]].copy()


def duplicate_sets(bank: PrototypeBank, threshold: float = 0.9) -> DuplicateReport:
    """Group near-duplicate prototype directions.

    Prototypes are visited in index order; each joins the first existing
    group whose founding member has cosine similarity strictly above
    ``threshold`` with it, otherwise it founds a new group.
    """
    _check_threshold(threshold)
    v = bank.directions
    cos = np.ascontiguousarray(v @ v.T)
    labels, seeds = kernels.greedy_groups(cos, float(threshold))
    sizes = np.bincount(labels, minlength=seeds.size)
    big = int(np.argmax(sizes))
    centroid = group_centroid(v, np.flatnonzero(labels == big))
    return DuplicateReport(float(threshold), labels, seeds, int(seeds.size), big, int(sizes[big]), centroid)


def assign_to_prototypes(bank: PrototypeBank, reps, tau: float = 0.1, mode: str = "dino"):
    """Index of the maximum-logit prototype for each representation."""
    return np.argmax(student_logits(np.atleast_2d(reps), bank, tau, mode), axis=1)


@dataclass(frozen=True)
class VoidReport:
    is_void: np.ndarray  # per group
    alignment: np.ndarray  # per group; NaN when undefined
    alignment_defined: bool
    group_counts: np.ndarray  # argmax assignments per group
    data_mean_norm: float


def void_prototype_check(bank: PrototypeBank, data_reps, report: DuplicateReport, tau=0.1, mode="dino") -> VoidReport:
    """Flag duplicate groups that win no argmax and measure their alignment.

    Alignment is the cosine between a group's centroid direction and the
    normalized mean of ``data_reps``. A void prototype set sits opposite the
    data (alignment near -1). When the data mean is shorter than 1e-6 the
    alignment is undefined and reported as NaN.
    """
    reps = np.atleast_2d(np.asarray(data_reps, dtype=np.float64))
    if reps.shape[0] == 0:
        raise DomainError("void check needs at least one data point")
    assign = assign_to_prototypes(bank, reps, tau, mode)
    counts = np.bincount(report.labels[assign], minlength=report.unique_count)
    mean = reps.mean(axis=0)
    mnorm = float(np.linalg.norm(mean))
    defined = mnorm >= MEAN_NORM_FLOOR
    align = np.full(report.unique_count, np.nan)
    if defined:
        ybar = mean / mnorm
        for g, members in enumerate(report.groups):
            align[g] = float(group_centroid(bank.directions, members) @ ybar)
    return VoidReport(counts == 0, align, defined, counts, mnorm)


def utilization_sweep(bank: PrototypeBank, thresholds):
    """One (threshold, unique_count, largest_group_size) row per threshold."""
    rows = []
    for t in thresholds:
        r = duplicate_sets(bank, float(t))
        rows.append(dict(threshold=float(t), unique_count=r.unique_count, largest_group_size=r.largest_group_size))
    return rows


def loo_knn_correct(reps, labels, k=10):
    """Leave-one-out kNN hit/miss per point (cosine similarity, majority vote)."""
    reps = normalize(np.atleast_2d(reps))
    labels = np.asarray(labels, dtype=np.int64)
    if not 1 <= k < reps.shape[0]:
        raise DomainError("k must be in [1, n - 1] for leave-one-out")
    sims = reps @ reps.T
    np.fill_diagonal(sims, -np.inf)
    pred = kernels.knn_predict(np.ascontiguousarray(sims), labels, int(k), int(labels.max()) + 1)
    return pred == labels


def precision_percentile_report(
    bank: PrototypeBank, reps, labels, percentile_edges=(0, 25, 50, 75, 100), tau=0.1, mode="vmf", k=10
):
    """Leave-one-out kNN accuracy bucketed by the magnitude of each point's prototype.

    Each point is assigned to its maximum-logit prototype; points are then
    bucketed by percentile ranges of those magnitudes (lower edge inclusive,
    the last bucket also includes its upper edge).
    """
    mags = bank.magnitudes
    if bank.l2_normalized or np.ptp(mags) == 0:
        raise DomainError(
            "precision buckets need prototypes with differing magnitudes; "
            "an L2-normalized (or constant-magnitude) bank has a single precision"
        )
    edges = np.asarray(percentile_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0) or edges[0] < 0 or edges[-1] > 100:
        raise DomainError("percentile edges must increase within [0, 100]")
    reps = np.atleast_2d(np.asarray(reps, dtype=np.float64))
    assign = assign_to_prototypes(bank, reps, tau, mode)
    point_mag = mags[assign]
    cuts = np.percentile(point_mag, edges)
    correct = loo_knn_correct(reps, labels, k)
    bucket = np.clip(np.searchsorted(cuts, point_mag, side="right") - 1, 0, edges.size - 2)
    rows = []
    for i in range(edges.size - 1):
        sel = bucket == i
        n = int(sel.sum())
        rows.append(
            dict(
                lower_percentile=float(edges[i]),
                upper_percentile=float(edges[i + 1]),
                lower_magnitude=float(cuts[i]),
                upper_magnitude=float(cuts[i + 1]),
                n_points=n,
                knn_accuracy=float(correct[sel].mean()) if n else float("nan"),
            )
        )
    return rows

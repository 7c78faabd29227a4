import itertools

import numpy as np
import pytest

from vmfdino.analysis import (
    assign_to_prototypes,
    duplicate_sets,
    loo_knn_correct,
    precision_percentile_report,
    utilization_sweep,
    void_prototype_check,
)
from vmfdino.errors import DomainError
from vmfdino.head import PrototypeBank
from vmfdino.vmf import VmfComponent, normalize, sample_vmf


def brute_force_groups(v, threshold):
    # first-seed greedy grouping written without shared code
    seeds, labels = [], []
    for j in range(len(v)):
        for g, s in enumerate(seeds):
            if float(np.dot(v[s], v[j])) > threshold:
                labels.append(g)
                break
        else:
            seeds.append(j)
            labels.append(len(seeds) - 1)
    return labels


def bank_of(directions, log_g=None):
    d = normalize(np.asarray(directions, dtype=np.float64))
    return PrototypeBank(d, np.zeros(len(d)) if log_g is None else np.asarray(log_g, dtype=np.float64))


class TestDuplicateSets:
    def test_identical(self):
        r = duplicate_sets(bank_of(np.tile([1.0, 2.0, 3.0, 4.0], (6, 1))), 0.9)
        assert r.unique_count == 1 and r.largest_group_size == 6

    def test_orthogonal(self):
        r = duplicate_sets(bank_of(np.eye(8)), 0.9)
        assert r.unique_count == 8 and r.largest_group_size == 1

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        # clustered directions so groups are non-trivial
        centers = normalize(rng.standard_normal((3, 8)))
        v = normalize(centers[rng.integers(0, 3, 10)] + 0.25 * rng.standard_normal((10, 8)))
        for t in (0.5, 0.8, 0.9):
            r = duplicate_sets(bank_of(v), t)
            assert r.labels.tolist() == brute_force_groups(normalize(v), t)

    def test_partition(self, rng):
        r = duplicate_sets(PrototypeBank.random(40, 4, rng), 0.8)
        assert sorted(np.concatenate(r.groups).tolist()) == list(range(40))
        assert r.group_sizes.sum() == 40
        assert r.largest_group_size == r.group_sizes.max()
        assert abs(np.linalg.norm(r.largest_group_centroid) - 1) < 1e-12

    def test_members_match_their_seed(self, rng):
        bank = PrototypeBank.random(40, 4, rng)
        r = duplicate_sets(bank, 0.7)
        v = bank.directions
        for g, members in enumerate(r.groups):
            assert r.seeds[g] == members[0]
            assert np.all(v[members] @ v[r.seeds[g]] > 0.7)

    def test_permutation_covariance(self):
        rng = np.random.default_rng(4)
        centers = normalize(rng.standard_normal((4, 8)))
        v = normalize(centers[np.repeat(np.arange(4), [1, 2, 3, 4])] + 0.05 * rng.standard_normal((10, 8)))
        base = sorted(duplicate_sets(bank_of(v), 0.9).group_sizes)
        for _ in range(5):
            perm = rng.permutation(10)
            assert sorted(duplicate_sets(bank_of(v[perm]), 0.9).group_sizes) == base

    def test_threshold_domain(self, rng):
        with pytest.raises(DomainError):
            duplicate_sets(PrototypeBank.random(3, 4, rng), 1.0)

    def test_greedy_rule_is_not_monotone_in_general(self):
        # a chain a-b-{c,d}: at 0.8 'a' absorbs 'b' and leaves c, d apart;
        # at 0.9 'b' founds its own group and absorbs both
        ab, bc, phi = np.arccos(0.85), np.arccos(0.92), np.pi / 3
        b_ = np.array([1.0, 0.0, 0.0, 0.0])
        a_ = np.array([np.cos(ab), np.sin(ab), 0.0, 0.0])
        c_ = np.array([np.cos(bc), -np.sin(bc) * np.cos(phi), np.sin(bc) * np.sin(phi), 0.0])
        d_ = np.array([np.cos(bc), -np.sin(bc) * np.cos(phi), -np.sin(bc) * np.sin(phi), 0.0])
        v = np.vstack([a_, b_, c_, d_])
        gram = v @ v.T
        assert gram[0, 2] < 0.8 and gram[2, 3] < 0.8
        counts = [duplicate_sets(bank_of(v), t).unique_count for t in (0.8, 0.9)]
        assert counts[0] > counts[1]


class TestSweep:
    def test_rows(self, rng):
        bank = PrototypeBank.random(30, 4, rng)
        rows = utilization_sweep(bank, [0.8, 0.9, 0.99])
        assert [r["threshold"] for r in rows] == [0.8, 0.9, 0.99]
        for r in rows:
            rep = duplicate_sets(bank, r["threshold"])
            assert r["unique_count"] == rep.unique_count and r["largest_group_size"] == rep.largest_group_size

    def test_monotone_without_chains(self):
        rng = np.random.default_rng(8)
        # tight clumps around orthogonal centres: no near-duplicate chains
        centers = np.eye(8)[:5]
        v = normalize(centers[rng.integers(0, 5, 32)] + 0.02 * rng.standard_normal((32, 8)))
        rows = utilization_sweep(bank_of(v), np.linspace(0.1, 0.999, 40))
        u = [r["unique_count"] for r in rows]
        s = [r["largest_group_size"] for r in rows]
        assert all(a <= b for a, b in zip(u, u[1:]))
        assert all(a >= b for a, b in zip(s, s[1:]))


def void_instance():
    data_dir = normalize(np.array([1.0, 0.5, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0]))
    reps = sample_vmf(VmfComponent(data_dir, 200.0), 300, seed=0)
    near = normalize(data_dir + 0.2 * np.random.default_rng(1).standard_normal((3, 8)))
    dirs = np.vstack([near, -data_dir])
    return bank_of(dirs), reps, data_dir


class TestVoid:
    def test_opposite_prototype(self):
        bank, reps, _ = void_instance()
        rep = duplicate_sets(bank, 0.9)
        out = void_prototype_check(bank, reps, rep)
        g = rep.labels[3]
        assert out.is_void[g]
        assert out.alignment[g] <= -0.99
        assert out.alignment_defined
        # re-checking assignments confirms the void group wins nothing
        assign = assign_to_prototypes(bank, reps)
        assert not np.any(rep.labels[assign] == g)

    def test_aligned_prototype(self):
        d = normalize(np.array([0.0, 1.0, 0.0, 1.0]))
        reps = sample_vmf(VmfComponent(d, 500.0), 200, seed=2)
        bank = bank_of([d, -d, [1.0, 0, 0, 0]])
        rep = duplicate_sets(bank, 0.9)
        out = void_prototype_check(bank, reps, rep)
        assert not out.is_void[rep.labels[0]]
        assert out.alignment[rep.labels[0]] >= 0.99

    def test_undefined_alignment(self):
        reps = np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, -1.0, 0, 0]])
        bank = bank_of(np.eye(4))
        out = void_prototype_check(bank, reps, duplicate_sets(bank, 0.9))
        assert not out.alignment_defined
        assert np.all(np.isnan(out.alignment))
        assert out.data_mean_norm < 1e-6

    def test_empty_data(self):
        bank = bank_of(np.eye(4))
        with pytest.raises(DomainError):
            void_prototype_check(bank, np.zeros((0, 4)), duplicate_sets(bank, 0.9))

    def test_counts_cover_data(self):
        bank, reps, _ = void_instance()
        out = void_prototype_check(bank, reps, duplicate_sets(bank, 0.9))
        assert out.group_counts.sum() == len(reps)


def precision_instance():
    # two strong prototypes hold pure-label clumps, two weak ones mixed labels
    rng = np.random.default_rng(5)
    dirs = np.eye(8)[:4]
    bank = bank_of(dirs, np.log([3.0, 2.5, 0.3, 0.2]))
    reps, labels = [], []
    for k in range(4):
        pts = sample_vmf(VmfComponent(dirs[k], 400.0), 50, rng)
        reps.append(pts)
        labels.append(np.full(50, k) if k < 2 else rng.integers(2, 6, 50))
    return bank, np.concatenate(reps), np.concatenate(labels)


class TestPrecision:
    def test_equal_magnitudes_rejected(self, rng):
        with pytest.raises(DomainError, match="magnitudes"):
            precision_percentile_report(PrototypeBank.random(4, 4, rng, log_magnitude=0.3), np.eye(4), [0, 1, 0, 1])
        with pytest.raises(DomainError):
            precision_percentile_report(PrototypeBank.random(4, 4, rng, l2_normalized=True), np.eye(4), [0, 1, 0, 1])

    def test_accuracy_increases_with_magnitude(self):
        bank, reps, labels = precision_instance()
        rows = precision_percentile_report(bank, reps, labels, (0, 50, 100))
        assert rows[0]["knn_accuracy"] < rows[1]["knn_accuracy"]
        assert rows[1]["knn_accuracy"] == 1.0

    def test_two_buckets_partition(self):
        bank, reps, labels = precision_instance()
        rows = precision_percentile_report(bank, reps, labels, (0, 50, 100))
        assert len(rows) == 2
        assert sum(r["n_points"] for r in rows) == len(reps)

    def test_bad_edges(self):
        bank, reps, labels = precision_instance()
        with pytest.raises(DomainError):
            precision_percentile_report(bank, reps, labels, (0, 60, 50, 100))

    def test_leave_one_out_excludes_self(self):
        reps = np.array([[1.0, 0.0], [0.99, 0.14], [0.0, 1.0]])
        # the lone point of class 1 has only class 0 neighbours once it is left out
        assert loo_knn_correct(reps, [0, 0, 1], k=1).tolist() == [True, True, False]

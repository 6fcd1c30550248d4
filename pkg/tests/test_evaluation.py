"""Permutation matching vs brute force, structural metrics vs hand oracles."""

import itertools

import numpy as np
import pytest

from borelog_refine import evaluation as ev


def perm_oracle(y_a, y_b):
    """Direct pixel-count search: relabel y_b every way, count agreement."""
    best_acc = -1.0
    best_perm = None
    for perm in itertools.permutations(range(4)):
        # perm as in the implementation: label i of y_a <-> label perm[i] of y_b
        lut = np.empty(4, dtype=int)
        for i, j in enumerate(perm):
            lut[j] = i
        acc = float(np.mean(y_a == lut[y_b]))
        if acc > best_acc:
            best_acc = acc
            best_perm = perm
    return best_acc, best_perm


def components_oracle(y, min_size=10):
    """Union-find over the explicit 8-connected grid, per class."""
    h, w = y.shape
    parent = list(range(h * w))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for i in range(h):
        for j in range(w):
            for di, dj in ((0, 1), (1, -1), (1, 0), (1, 1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and y[ni, nj] == y[i, j]:
                    union(i * w + j, ni * w + nj)
    sizes = {}
    for i in range(h * w):
        sizes[find(i)] = sizes.get(find(i), 0) + 1
    return sum(1 for s in sizes.values() if s >= min_size)


class TestPermAgreement:
    def test_identity(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 4, size=(16, 16))
        acc, perm, _ = ev.perm_agreement(y, y)
        assert acc == 1.0
        assert perm == (0, 1, 2, 3)

    def test_any_relabeling_scores_one(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 4, size=(16, 16))
        for perm in itertools.permutations(range(4)):
            relabeled = np.asarray(perm)[y]
            acc, _, _ = ev.perm_agreement(y, relabeled)
            assert acc == 1.0

    def test_matches_brute_force_on_random_pairs(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            y_a = rng.integers(0, 4, size=(16, 16))
            y_b = rng.integers(0, 4, size=(16, 16))
            acc, perm, _ = ev.perm_agreement(y_a, y_b)
            o_acc, o_perm = perm_oracle(y_a, y_b)
            assert acc == pytest.approx(o_acc, abs=0)
            assert perm == o_perm

    def test_symmetry_of_score(self):
        rng = np.random.default_rng(3)
        y_a = rng.integers(0, 4, size=(20, 10))
        y_b = rng.integers(0, 4, size=(20, 10))
        assert ev.perm_agreement(y_a, y_b)[0] == ev.perm_agreement(y_b, y_a)[0]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ev.perm_agreement(np.zeros((2, 2), int), np.zeros((3, 2), int))

    def test_align_to_reference_realizes_score(self):
        rng = np.random.default_rng(4)
        ref = rng.integers(0, 4, size=(16, 16))
        y = rng.integers(0, 4, size=(16, 16))
        acc, _, _ = ev.perm_agreement(ref, y)
        aligned = ev.align_to_reference(y, ref)
        assert float(np.mean(ref == aligned)) == pytest.approx(acc, abs=0)


class TestConfusionMasses:
    def test_diagonal_matrix(self):
        m = np.diag([5, 2, 7, 1])
        assert ev.confusion_masses(m) == (1.0, 0.0)

    def test_uniform_matrix(self):
        m = np.full((4, 4), 3)
        diag, off = ev.confusion_masses(m)
        assert diag == pytest.approx(0.25)
        assert off == pytest.approx(0.75)

    def test_diag_mass_equals_acc_after_alignment(self):
        rng = np.random.default_rng(5)
        ref = rng.integers(0, 4, size=(16, 16))
        y = rng.integers(0, 4, size=(16, 16))
        acc, _, _ = ev.perm_agreement(ref, y)
        m = ev.aligned_confusion(ref, y)
        diag, _ = ev.confusion_masses(m)
        assert diag == pytest.approx(acc, abs=0)

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            ev.confusion_masses(np.zeros((4, 4), int))


class TestCanonicalReorder:
    def test_already_ordered_identity(self):
        seg = np.repeat(np.arange(4), 4).reshape(4, 4).T
        amp = seg * 10.0
        np.testing.assert_array_equal(ev.canonical_reorder(seg, amp), seg)

    def test_two_class_swap(self):
        seg = np.array([[0, 0], [1, 1]])
        amp = np.array([[9.0, 9.0], [1.0, 1.0]])  # class 1 darker than class 0
        out = ev.canonical_reorder(seg, amp)
        np.testing.assert_array_equal(out, np.array([[1, 1], [0, 0]]))

    def test_idempotent(self):
        rng = np.random.default_rng(6)
        seg = rng.integers(0, 4, size=(12, 12))
        amp = rng.normal(size=(12, 12))
        once = ev.canonical_reorder(seg, amp)
        twice = ev.canonical_reorder(once, amp)
        np.testing.assert_array_equal(once, twice)

    def test_empty_classes_sorted_last(self):
        seg = np.array([[3, 3], [1, 1]])  # classes 0, 2 empty
        amp = np.array([[1.0, 1.0], [5.0, 5.0]])
        out = ev.canonical_reorder(seg, amp)
        # class 3 (amp 1) -> 0; class 1 (amp 5) -> 1; empties 0,2 -> 2,3
        np.testing.assert_array_equal(out, np.array([[0, 0], [1, 1]]))

    def test_never_changes_agreement(self):
        rng = np.random.default_rng(7)
        ref = rng.integers(0, 4, size=(16, 16))
        y = rng.integers(0, 4, size=(16, 16))
        amp = rng.normal(size=(16, 16))
        before = ev.perm_agreement(ref, y)[0]
        after = ev.perm_agreement(ref, ev.canonical_reorder(y, amp))[0]
        assert before == after


class TestChangedFraction:
    def test_identical_maps(self):
        y = np.zeros((8, 8), int)
        conf = np.random.default_rng(8).uniform(size=(8, 8))
        frac, low = ev.changed_fraction(y, y, conf)
        assert frac == 0.0
        assert low is None

    def test_all_changed_uniform_confidence(self):
        rng = np.random.default_rng(9)
        a = np.zeros((40, 40), int)
        b = np.ones((40, 40), int)
        conf = rng.uniform(size=(40, 40))
        frac, low = ev.changed_fraction(a, b, conf)
        assert frac == 1.0
        assert low == pytest.approx(0.25, abs=0.01)

    def test_quartile_is_linear_percentile(self):
        conf = np.array([[0.0, 0.2], [0.6, 1.0]])
        a = np.zeros((2, 2), int)
        b = np.ones((2, 2), int)
        _, low = ev.changed_fraction(a, b, conf)
        tau = np.percentile(conf, 25.0)  # 0.15 by linear interpolation
        assert low == pytest.approx(np.mean(conf < tau))


class TestBoundaryLength:
    def test_constant_map(self):
        assert ev.boundary_length(np.zeros((7, 9), int)) == 0

    def test_checkerboard_2x2(self):
        y = np.array([[0, 1], [1, 0]])
        assert ev.boundary_length(y) == 4

    def test_single_horizontal_split(self):
        y = np.zeros((10, 6), int)
        y[5:] = 1
        assert ev.boundary_length(y) == 6

    def test_invariant_under_permutation(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            y = rng.integers(0, 4, size=(12, 9))
            perm = rng.permutation(4)
            assert ev.boundary_length(y) == ev.boundary_length(perm[y])


class TestTotalComponents:
    def test_constant_10x10(self):
        assert ev.total_components(np.zeros((10, 10), int)) == 1

    def test_small_island_discarded(self):
        y = np.zeros((10, 10), int)
        y[3:6, 3:6] = 1  # 9 px < 10
        assert ev.total_components(y) == 1

    def test_diagonal_blobs_joined_by_8_connectivity(self):
        y = np.zeros((12, 12), int)
        y[1:3, 1:6] = 1   # 10 px
        y[3:5, 6:11] = 1  # 10 px, touches only diagonally at (2,5)-(3,6)
        assert ev.total_components(y, min_size=10) == 1 + 1  # background + blob
        assert components_oracle(y, min_size=10) == 2

    def test_matches_union_find_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            y = rng.integers(0, 3, size=(15, 12))
            assert ev.total_components(y, min_size=4) == components_oracle(y, 4)

    def test_invariant_under_permutation(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            y = rng.integers(0, 4, size=(10, 10))
            perm = rng.permutation(4)
            assert ev.total_components(y) == ev.total_components(perm[y])


class TestAggregation:
    def _record(self, well, key, method, acc, kind="broad"):
        return ev.IntervalRecord(
            well_id=well, interval_key=key, kind=kind, method=method,
            acc_vs_pseudo=acc, acc_vs_ae_otsu=0.0, acc_vs_raw_otsu=0.0,
            diag_mass=acc, off_diag_mass=1 - acc, boundary_len=0,
            n_components=1, class_fracs=(0.25,) * 4)

    def test_single_well_single_interval(self):
        recs = [self._record("w1", "w1_0_600", "cgdca", 0.9)]
        summary = ev.aggregate_wells(recs)[0]
        assert summary.mean == pytest.approx(0.9)
        assert summary.std == 0.0
        assert summary.range == 0.0

    def test_two_wells(self):
        recs = [self._record("w1", "a", "m", 0.8),
                self._record("w1", "b", "m", 0.6),
                self._record("w2", "c", "m", 0.9)]
        summary = ev.aggregate_wells(recs)[0]
        assert summary.well_means == {"w1": pytest.approx(0.7),
                                      "w2": pytest.approx(0.9)}
        assert summary.mean == pytest.approx(0.8)
        assert summary.min == pytest.approx(0.7)
        assert summary.max == pytest.approx(0.9)

    def test_pairwise_ties_count_neither(self):
        recs = [self._record("w", "i1", "a", 0.5),
                self._record("w", "i1", "b", 0.5),
                self._record("w", "i2", "a", 0.7),
                self._record("w", "i2", "b", 0.6)]
        wins_a, wins_b, ties = ev.pairwise_wins(recs, "a", "b")
        assert (wins_a, wins_b, ties) == (1, 0, 1)


class TestEvaluateInterval:
    def test_full_record(self):
        rng = np.random.default_rng(13)
        pseudo = rng.integers(0, 4, size=(32, 16))
        refs = {"pseudo": pseudo,
                "ae_otsu": rng.integers(0, 4, size=(32, 16)),
                "raw_otsu": rng.integers(0, 4, size=(32, 16))}
        seg = rng.integers(0, 4, size=(32, 16))
        concat = rng.integers(0, 4, size=(32, 16))
        conf = rng.uniform(size=(32, 16))
        rec = ev.evaluate_interval("cgdca", seg, refs, conf, "w", "w_0_32",
                                   "broad", concat_seg=concat)
        assert 0 <= rec.acc_vs_pseudo <= 1
        assert rec.diag_mass == pytest.approx(rec.acc_vs_pseudo, abs=0)
        assert rec.diag_mass + rec.off_diag_mass == pytest.approx(1.0)
        assert rec.changed_frac is not None
        assert abs(sum(rec.class_fracs) - 1.0) < 1e-12

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condalign.data import (Dataset, ShiftSpec, apply_shift, batches, gen_blobs, gen_moons, load_csv, save_csv,
                            simplex_means, standardize)


def _ids(ds):
    # features carry a unique row id in column 0
    return ds.features[:, 0].astype(int)


def _indexed(n, domain="source"):
    return Dataset(np.column_stack([np.arange(n), np.zeros(n)]), np.eye(2)[np.arange(n) % 2], domain)


class TestMoons:
    def test_noise_free_class0_on_upper_circle(self):
        ds = gen_moons(100, noise_std=0.0, seed=0)
        x0 = ds.features[ds.class_index == 0]
        np.testing.assert_allclose(np.linalg.norm(x0, axis=1), 1.0, atol=1e-12)
        assert np.all(x0[:, 1] >= 0)

    def test_deterministic(self):
        a, b = gen_moons(50, 0.1, seed=4), gen_moons(50, 0.1, seed=4)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_odd_balance(self):
        counts = sorted(gen_moons(101, 0.1, seed=1).labels.sum(0).astype(int))
        assert counts == [50, 51]

    def test_rejects_tiny(self):
        with pytest.raises(ValueError):
            gen_moons(1)


class TestBlobs:
    def test_well_separated_nearest_centroid(self):
        ds = gen_blobs(300, 4, 5, separation=100.0, seed=0, noise_std=1.0)
        means = simplex_means(4, 5, 100.0)
        pred = np.argmin(((ds.features[:, None] - means[None]) ** 2).sum(-1), axis=1)
        assert np.mean(pred == ds.class_index) == 1.0

    def test_shape_and_seed(self):
        a, b = gen_blobs(30, 3, 2, 4.0, seed=2), gen_blobs(30, 3, 2, 4.0, seed=2)
        assert a.labels.shape == (30, 3)
        assert a.features.tobytes() == b.features.tobytes()

    def test_simplex_means_equidistant(self):
        m = simplex_means(5, 6, 3.0)
        d = np.linalg.norm(m[:, None] - m[None], axis=-1)
        np.testing.assert_allclose(d[~np.eye(5, dtype=bool)], 3.0, atol=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            gen_blobs(10, 1, 2, 1.0)
        with pytest.raises(ValueError):
            gen_blobs(10, 2, 2, 0.0)


class TestShift:
    def test_identity(self):
        ds = gen_moons(20, 0.1, seed=0)
        out = apply_shift(ds, ShiftSpec())
        assert out.features.tobytes() == ds.features.tobytes()
        assert out.domain == "target" and ds.domain == "source"

    def test_rotation_pi(self):
        out = apply_shift(Dataset(np.array([[1.0, 0.0]])), ShiftSpec(rotation=np.pi))
        np.testing.assert_allclose(out.features, [[-1.0, 0.0]], atol=1e-12)

    def test_permutation_swaps_columns(self):
        ds = Dataset(np.zeros((3, 2)), np.eye(3))
        out = apply_shift(ds, ShiftSpec(permutation=(1, 0, 2)))
        np.testing.assert_array_equal(out.labels, ds.labels[:, [1, 0, 2]])

    @settings(max_examples=25, deadline=None)
    @given(st.permutations(range(4)), st.integers(0, 1000))
    def test_permutation_preserves_class_counts(self, perm, seed):
        ds = gen_blobs(40, 4, 3, 2.0, seed=seed)
        out = apply_shift(ds, ShiftSpec(permutation=tuple(perm)))
        assert sorted(out.labels.sum(0)) == sorted(ds.labels.sum(0))
        np.testing.assert_array_equal(out.class_index, np.asarray(perm)[ds.class_index])

    def test_scale_translate_noise(self):
        ds = Dataset(np.ones((4, 2)))
        out = apply_shift(ds, ShiftSpec(scale=(2.0, -1.0), translation=(1.0, 1.0)))
        np.testing.assert_array_equal(out.features, np.tile([3.0, 0.0], (4, 1)))
        noisy = apply_shift(ds, ShiftSpec(noise_std=0.5), seed=3)
        assert not np.array_equal(noisy.features, ds.features)

    def test_rotation_needs_2d(self):
        with pytest.raises(ValueError, match="2-D"):
            apply_shift(Dataset(np.ones((2, 3))), ShiftSpec(rotation=0.1))


class TestStandardize:
    def test_examples(self):
        out = standardize(Dataset(np.array([[1.0, 3.0], [5.0, 5.0]])))
        np.testing.assert_allclose(out.features[0], [-1.0, 1.0])
        np.testing.assert_array_equal(out.features[1], [0.0, 0.0])
        const = standardize(Dataset(np.array([[5.0, 5.0, 5.0]])))
        np.testing.assert_array_equal(const.features, [[0.0, 0.0, 0.0]])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=6))
    def test_moments_and_idempotence(self, rows):
        x = np.array(rows)
        out = standardize(Dataset(x)).features
        ok = x.var(axis=1) >= 1e-12
        assert np.all(np.abs(out[ok].mean(1)) <= 1e-12)
        np.testing.assert_allclose(out[ok].var(1), 1.0, atol=1e-9)
        np.testing.assert_allclose(standardize(Dataset(out)).features[ok], out[ok], atol=1e-9)

    def test_needs_two_features(self):
        with pytest.raises(ValueError):
            standardize(Dataset(np.ones((3, 1))))


class TestBatches:
    def test_source_consumed_without_repetition_while_target_cycles(self):
        # 10 source rows, batch 4: each block of 10 consumed indices is a permutation
        stream = batches(_indexed(10), _indexed(4, "target"), 4, seed=0)
        pairs = list(itertools.islice(stream, 5))
        s = np.concatenate([_ids(a) for a, _ in pairs])
        t = np.concatenate([_ids(b) for _, b in pairs])
        assert all(len(a) == 4 and len(b) == 4 for a, b in pairs)
        assert sorted(s[:10]) == list(range(10)) and sorted(s[10:20]) == list(range(10))
        for i in range(0, 20, 4):
            assert sorted(t[i:i + 4]) == list(range(4))

    def test_epoch_union_is_dataset(self):
        stream = batches(_indexed(12), _indexed(5, "target"), 3, seed=1)
        s = np.concatenate([_ids(next(stream)[0]) for _ in range(4)])
        assert sorted(s) == list(range(12))

    def test_reshuffled_each_epoch_and_seeded(self):
        a = [_ids(x) for x, _ in itertools.islice(batches(_indexed(30), _indexed(7), 10, seed=2), 6)]
        b = [_ids(x) for x, _ in itertools.islice(batches(_indexed(30), _indexed(7), 10, seed=2), 6)]
        assert all(np.array_equal(u, v) for u, v in zip(a, b))
        assert not np.array_equal(np.concatenate(a[:3]), np.concatenate(a[3:]))

    def test_invalid(self):
        with pytest.raises(ValueError):
            next(batches(_indexed(3), _indexed(3), 0))


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = gen_blobs(25, 3, 4, 2.0, seed=5)
        save_csv(ds, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv", has_labels=True, k=3)
        np.testing.assert_allclose(back.features, ds.features, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(back.labels, ds.labels)
        save_csv(ds.unlabeled(), tmp_path / "u.csv")
        assert load_csv(tmp_path / "u.csv", has_labels=False).labels is None

    def test_single_row(self, tmp_path):
        (tmp_path / "r.csv").write_text("1.0,2.0,1\n")
        ds = load_csv(tmp_path / "r.csv", has_labels=True, k=3)
        np.testing.assert_array_equal(ds.features, [[1.0, 2.0]])
        np.testing.assert_array_equal(ds.labels, [[0, 1, 0]])

    def test_errors_carry_line_numbers(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("1.0,2.0,0\n1.0,abc,1\n")
        with pytest.raises(ValueError, match=":2:"):
            load_csv(p, has_labels=True, k=2)
        p.write_text("1.0,2.0,0\n1.0,2.0,5\n")
        with pytest.raises(ValueError, match=r":2: label 5 outside"):
            load_csv(p, has_labels=True, k=2)


class TestDatasetValidation:
    def test_rejects_bad_labels_and_values(self):
        with pytest.raises(ValueError):
            Dataset(np.ones((2, 2)), np.array([[0.5, 0.5], [1, 0]]))
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan, 1.0]]))
        with pytest.raises(ValueError):
            Dataset(np.ones((2, 2)), domain="elsewhere")

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condalign import autodiff as ad
from condalign.networks import (GROUPS, Arch, Graph, ParamSet, class_predict, encode, group_of, init_params,
                                joint_predict, load_params, pseudo_label, save_params)


def _zero_heads(params):
    for g in ("class_head", "joint_head"):
        for W, b in params.group(g):
            W[...] = 0.0
            if b is not None:
                b[...] = 0.0
    return params


class TestEncode:
    def test_identity_linear_encoder(self):
        arch = Arch(d_in=3, n_classes=2, widths=(3,), bias=False, activation="none")
        params = init_params(arch)
        params.encoder[0][0][...] = np.eye(3)
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(encode(params, x), x)

    def test_zero_weights_give_bias_rows(self):
        arch = Arch(d_in=2, n_classes=2, widths=(4,), activation="none")
        params = init_params(arch)
        params.encoder[0][0][...] = 0.0
        params.encoder[0][1][...] = [1.0, -2.0, 3.0, 0.5]
        z = encode(params, np.ones((3, 2)))
        np.testing.assert_array_equal(z, np.tile([1.0, -2.0, 3.0, 0.5], (3, 1)))

    def test_two_layer_shape_and_row_by_hand(self):
        arch = Arch(d_in=2, n_classes=2, widths=(5, 3))
        params = init_params(arch, seed=4)
        x = np.random.default_rng(1).normal(size=(4, 2))
        z = encode(params, x)
        assert z.shape == (4, arch.d_feat) == (4, 3)
        (W0, b0), (W1, b1) = params.encoder
        h = x[2] @ W0 + b0
        h = np.where(h > 0, h, 0.1 * h)
        h = h @ W1 + b1
        h = np.where(h > 0, h, 0.1 * h)
        np.testing.assert_allclose(z[2], h, rtol=0, atol=1e-15)

    def test_dimension_mismatch(self):
        params = init_params(Arch(d_in=2, n_classes=2))
        with pytest.raises(ValueError, match="2 columns"):
            encode(params, np.ones((3, 5)))

    def test_tape_graph_matches_numpy(self):
        params = init_params(Arch(d_in=2, n_classes=3, widths=(6, 4)), seed=2)
        x = np.random.default_rng(2).normal(size=(7, 2))
        g = Graph(params)
        z = g.encode(g.input(x))
        np.testing.assert_allclose(z.value, encode(params, x), atol=1e-14)
        np.testing.assert_allclose(g.joint_logits(z).value, joint_predict(params, z.value).logits, atol=1e-14)


class TestHeads:
    def test_zero_logits_uniform(self):
        params = _zero_heads(init_params(Arch(d_in=2, n_classes=10)))
        p = class_predict(params, np.ones((2, 64)))
        np.testing.assert_allclose(p.probs, 0.1, atol=1e-15)
        params3 = _zero_heads(init_params(Arch(d_in=2, n_classes=3)))
        np.testing.assert_allclose(joint_predict(params3, np.ones((1, 64))).probs, 1 / 6, atol=1e-15)

    def test_argmax_of_logits(self):
        params = _zero_heads(init_params(Arch(d_in=2, n_classes=3, widths=(3,))))
        params.class_head[0][0][...] = np.eye(3)
        assert class_predict(params, np.array([[10.0, 0.0, 0.0]])).argmax()[0] == 0

    @pytest.mark.parametrize("k", [2, 3, 10])
    def test_joint_output_length(self, k):
        params = init_params(Arch(d_in=3, n_classes=k), seed=k)
        p = joint_predict(params, encode(params, np.ones((4, 3))))
        assert p.probs.shape == (4, 2 * k)
        assert np.all(p.probs >= 0)
        np.testing.assert_allclose(p.probs.sum(1), 1.0, atol=1e-9)

    def test_probs_sum_to_one_random(self):
        for seed in range(5):
            params = init_params(Arch(d_in=2, n_classes=4), seed=seed)
            z = encode(params, np.random.default_rng(seed).normal(size=(10, 2)) * 5)
            np.testing.assert_allclose(class_predict(params, z).probs.sum(1), 1.0, atol=1e-9)


class TestPseudoLabel:
    def test_argmax(self):
        np.testing.assert_array_equal(pseudo_label([0.1, 0.7, 0.2]), [0, 1, 0])

    def test_ties_go_to_lowest_index(self):
        np.testing.assert_array_equal(pseudo_label([0.5, 0.5]), [1, 0])
        np.testing.assert_array_equal(pseudo_label(np.full(4, 0.25)), [1, 0, 0, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=8).filter(lambda v: sum(v) > 0))
    def test_idempotent_and_monotone_invariant(self, v):
        p = np.array(v) / sum(v)
        y = pseudo_label(p)
        np.testing.assert_array_equal(pseudo_label(y), y)
        np.testing.assert_array_equal(pseudo_label(np.exp(3 * p) + 1), y)


class TestParamSet:
    def test_groups_partition_parameters(self):
        params = init_params(Arch(d_in=2, n_classes=3, widths=(8, 8)))
        names = [n for n, _ in params.named()]
        assert len(names) == len(set(names))
        assert {group_of(n) for n in names} == set(GROUPS)
        ids = [id(a) for _, a in params.named()]
        assert len(ids) == len(set(ids))
        assert params.joint_head[0][0].shape[1] == 2 * 3

    def test_init_bounds_and_determinism(self):
        arch = Arch(d_in=2, n_classes=2)
        p1, p2 = init_params(arch, seed=9), init_params(arch, seed=9)
        for (n, a), (_, b) in zip(p1.named(), p2.named()):
            assert a.tobytes() == b.tobytes()
        W = p1.encoder[1][0]
        assert np.abs(W).max() <= np.sqrt(6 / (64 + 64))

    def test_save_load_round_trip(self, tmp_path):
        params = init_params(Arch(d_in=3, n_classes=4, widths=(5, 2), bias=False), seed=1)
        path = tmp_path / "p.caln"
        save_params(params, path)
        blob = path.read_bytes()
        assert blob[:5] == b"CALN1"
        loaded = load_params(path)
        assert loaded.arch == params.arch
        for (n, a), (m, b) in zip(params.named(), loaded.named()):
            assert n == m and a.tobytes() == b.tobytes()

    def test_load_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"XXXXX" + bytes(16))
        with pytest.raises(ValueError, match="CALN1"):
            load_params(path)

    def test_frozen_groups_get_zero_gradient(self):
        params = init_params(Arch(d_in=2, n_classes=2, widths=(4,)))
        g = Graph(params, frozen=("class_head",))
        loss = g.class_logits(g.encode(g.input(np.ones((3, 2))))).sum()
        grads = g.tape.backward(loss)
        assert all(np.all(grads[n] == 0) for n in grads if n.startswith("class_head"))
        assert any(np.any(grads[n] != 0) for n in grads if n.startswith("encoder"))

    def test_arch_validation(self):
        with pytest.raises(ValueError):
            Arch(d_in=2, n_classes=1)
        with pytest.raises(ValueError):
            Arch(d_in=2, n_classes=2, activation="tanh")

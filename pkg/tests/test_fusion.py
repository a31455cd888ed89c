import numpy as np
import pytest

from clinsum import tensor as T
from clinsum.fusion import (FusionParams, attention_weights, conditioned_kv, fuse, fusion_forward,
                            modality_attention, modality_lambdas, project_qkv)
from clinsum.tensor import Tensor

WIDTHS = {"visual": 6, "knowledge": 7}


def make(rng, l=5, d=8, widths=WIDTHS):
    params = FusionParams.init(d, widths, rng)
    H = Tensor(rng.normal(size=(l, d)))
    ev = {m: Tensor(rng.normal(size=(1, w))) for m, w in widths.items()}
    return params, H, ev


def oracle(H, ev, params):
    """Plain numpy recomputation of the adapter, independent of the tape code."""
    sig = lambda x: 1 / (1 + np.exp(-x))
    P = {k: v.values for k, v in params.named_tensors().items()}
    Hn = H.values
    Q, K, V = Hn @ P["W_Q"], Hn @ P["W_K"], Hn @ P["W_V"]
    out = Hn.copy()
    for m in params.modalities:
        if m not in ev:
            continue
        E = ev[m].values
        eu_k, eu_v = E @ P[f"{m}.U_k"], E @ P[f"{m}.U_v"]
        lk = sig(K @ P[f"{m}.W_k1"] + eu_k @ P[f"{m}.W_k2"])
        lv = sig(V @ P[f"{m}.W_v1"] + eu_v @ P[f"{m}.W_v2"])
        Kh = (1 - lk) * K + lk * eu_k
        Vh = (1 - lv) * V + lv * eu_v
        s = Q @ Kh.T / np.sqrt(Hn.shape[1])
        w = np.exp(s - s.max(axis=1, keepdims=True))
        Hm = (w / w.sum(axis=1, keepdims=True)) @ Vh
        g = np.hstack([Hn, Hm]) @ P[f"{m}.W_g"] + P[f"{m}.b_g"]
        out = out + g * Hm
    return out


class TestProjectQKV:
    def test_identity_weights(self, rng):
        params, H, _ = make(rng)
        for w in (params.W_Q, params.W_K, params.W_V):
            w.values[...] = np.eye(8)
        assert all(np.array_equal(x.values, H.values) for x in project_qkv(H, params))

    def test_zero_hidden(self, rng):
        params, _, _ = make(rng)
        assert all(not x.values.any() for x in project_qkv(Tensor(np.zeros((3, 8))), params))

    def test_random_matches_matmul(self, rng):
        params, _, _ = make(rng, d=4)
        H = Tensor(rng.normal(size=(3, 4)))
        Q, K, V = project_qkv(H, params)
        for got, W in ((Q, params.W_Q), (K, params.W_K), (V, params.W_V)):
            expect = [[sum(H.values[i, k] * W.values[k, j] for k in range(4)) for j in range(4)] for i in range(3)]
            assert np.allclose(got.values, expect, atol=1e-12)

    def test_shape_mismatch(self, rng):
        params, _, _ = make(rng)
        with pytest.raises(T.ShapeError):
            project_qkv(Tensor(np.zeros((3, 5))), params)


class TestLambdas:
    def test_zero_gate_weights_half(self, rng):
        params, H, ev = make(rng)
        mp = params.modalities["visual"]
        for w in (mp.W_k1, mp.W_k2, mp.W_v1, mp.W_v2):
            w.values[...] = 0
        _, K, V = project_qkv(H, params)
        lk, lv = modality_lambdas(K, V, ev["visual"], params, "visual")
        assert np.all(lk.values == 0.5) and np.all(lv.values == 0.5)

    def test_zero_evidence_and_key_gate(self, rng):
        params, H, _ = make(rng)
        params.modalities["knowledge"].W_k1.values[...] = 0
        _, K, V = project_qkv(H, params)
        lk, _ = modality_lambdas(K, V, Tensor(np.zeros((1, 7))), params, "knowledge")
        assert np.all(lk.values == 0.5)

    def test_random_matches_recomputation(self, rng):
        params, H, ev = make(rng)
        _, K, V = project_qkv(H, params)
        lk, lv = modality_lambdas(K, V, ev["visual"], params, "visual")
        mp = params.modalities["visual"]
        pre = K.values @ mp.W_k1.values + (ev["visual"].values @ mp.U_k.values @ mp.W_k2.values)[0, 0]
        assert lk.shape == (5, 1)
        assert np.allclose(lk.values, 1 / (1 + np.exp(-pre)), atol=1e-14)
        assert np.all((lk.values > 0) & (lk.values < 1) & (lv.values > 0) & (lv.values < 1))

    def test_evidence_width_checked(self, rng):
        params, H, _ = make(rng)
        _, K, V = project_qkv(H, params)
        with pytest.raises(T.ShapeError):
            modality_lambdas(K, V, Tensor(np.zeros((1, 3))), params, "visual")


class TestConditionedKV:
    def setup_case(self, rng):
        params, H, ev = make(rng)
        _, K, V = project_qkv(H, params)
        return params, K, V, ev["visual"]

    def test_lambda_zero_keeps_text(self, rng):
        params, K, V, E = self.setup_case(rng)
        z = Tensor(np.zeros((5, 1)))
        Kh, Vh = conditioned_kv(K, V, E, z, z, params, "visual")
        assert np.array_equal(Kh.values, K.values) and np.array_equal(Vh.values, V.values)

    def test_lambda_one_takes_evidence(self, rng):
        params, K, V, E = self.setup_case(rng)
        o = Tensor(np.ones((5, 1)))
        Kh, _ = conditioned_kv(K, V, E, o, o, params, "visual")
        eu = E.values @ params.modalities["visual"].U_k.values
        assert np.allclose(Kh.values, np.repeat(eu, 5, axis=0), atol=1e-15)

    def test_half_lambda_zero_keys(self, rng):
        params, K, V, E = self.setup_case(rng)
        half = Tensor(np.full((5, 1), 0.5))
        Kh, _ = conditioned_kv(Tensor(np.zeros_like(K.values)), V, E, half, half, params, "visual")
        eu = E.values @ params.modalities["visual"].U_k.values
        assert np.allclose(Kh.values, 0.5 * np.repeat(eu, 5, axis=0), atol=1e-15)


class TestAttention:
    def test_single_row(self, rng):
        V = Tensor(rng.normal(size=(1, 4)))
        out = modality_attention(Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))), V)
        assert np.allclose(out.values, V.values, atol=1e-15)

    def test_zero_query_uniform(self, rng):
        V = Tensor(rng.normal(size=(3, 4)))
        out = modality_attention(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(3, 4))), V)
        assert np.allclose(out.values, np.tile(V.values.mean(axis=0), (3, 1)), atol=1e-14)

    def test_random_recomputation(self, rng):
        Q, K, V = (rng.normal(size=(3, 4)) for _ in range(3))
        s = Q @ K.T / 2.0
        w = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
        out = modality_attention(Tensor(Q), Tensor(K), Tensor(V)).values
        assert np.allclose(out, w @ V, atol=1e-13)
        assert np.allclose(attention_weights(Tensor(Q), Tensor(K)).values.sum(axis=1), 1, atol=1e-12)


class TestFuse:
    def test_no_modalities(self, rng):
        params, H, _ = make(rng)
        assert fuse(H, {}, params) is H
        assert fusion_forward(H, {}, params) is H

    def test_zero_gates_identity(self, rng):
        params, H, ev = make(rng)
        params.zero_gates()
        assert np.array_equal(fusion_forward(H, ev, params).values, H.values)

    def test_both_modalities_vs_oracle(self, rng):
        params, H, ev = make(rng)
        assert np.allclose(fusion_forward(H, ev, params).values, oracle(H, ev, params), atol=1e-12)

    def test_single_modality_vs_oracle(self, rng):
        params, H, ev = make(rng)
        only = {"knowledge": ev["knowledge"]}
        assert np.allclose(fusion_forward(H, only, params).values, oracle(H, only, params), atol=1e-12)

    @pytest.mark.parametrize("l", [1, 5])
    @pytest.mark.parametrize("d", [4, 8])
    def test_output_shape(self, rng, l, d):
        params, H, ev = make(rng, l=l, d=d)
        assert fusion_forward(H, ev, params).shape == (l, d)

    def test_sigmoid_gate_switch(self, rng):
        params, H, ev = make(rng)
        lin = fusion_forward(H, ev, params).values
        params.gate_activation = "sigmoid"
        assert not np.allclose(fusion_forward(H, ev, params).values, lin)

    def test_unknown_modality(self, rng):
        params, H, _ = make(rng)
        with pytest.raises(ValueError):
            fusion_forward(H, {"audio": np.zeros((1, 3))}, params)
        with pytest.raises(ValueError):
            FusionParams.init(8, {"audio": 3}, rng)


class TestFusionProperties:
    def test_gradient_fidelity(self, rng):
        params, H, ev = make(rng)
        W = Tensor(rng.normal(size=(5, 8)))
        rep = T.check_gradients(lambda: T.sum_all(T.mul(fusion_forward(H, ev, params), W)),
                                params.parameters(), eps=1e-5, tol=1e-4)
        assert rep.passed, rep
        assert rep.n_checked == sum(p.values.size for p in params.parameters())

    def test_gradient_reaches_hidden_states(self, rng):
        params, _, ev = make(rng)
        H = Tensor(rng.normal(size=(5, 8)), requires_grad=True, name="H")
        rep = T.check_gradients(lambda: T.sum_all(fusion_forward(H, ev, params)), [H])
        assert rep.passed

    def test_permutation_equivariance(self, rng):
        params, H, ev = make(rng)
        perm = rng.permutation(5)
        out = fusion_forward(H, ev, params).values
        out_p = fusion_forward(Tensor(H.values[perm]), ev, params).values
        assert np.allclose(out[perm], out_p, atol=1e-12)

    def test_identity_holds_for_any_evidence(self, rng):
        for _ in range(10):
            params, H, _ = make(rng)
            params.zero_gates()
            ev = {"visual": Tensor(rng.normal(scale=50, size=(1, 6))), "knowledge": Tensor(np.zeros((1, 7)))}
            assert np.max(np.abs(fusion_forward(H, ev, params).values - H.values)) <= 1e-12

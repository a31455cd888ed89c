"""Micro-scale self-checks run by ``clinsum verify``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .corpus import split_corpus, tokenize
from .fusion import FusionParams, attention_weights, fusion_forward, modality_lambdas, project_qkv
from .knowledge import DkdConfig, distill
from .metrics import bleu, jaccard, meteor_lite, rouge_l, rouge_n
from .model import ModelConfig, SummarizerModel, joint_loss
from .synthetic import generate_synthetic
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _fusion_case(rng, l=5, d=8, d_v=6, d_kn=7):
    params = FusionParams.init(d, {"visual": d_v, "knowledge": d_kn}, rng)
    H = Tensor(rng.normal(size=(l, d)))
    ev = {"visual": Tensor(rng.normal(size=(1, d_v))), "knowledge": Tensor(rng.normal(size=(1, d_kn)))}
    return params, H, ev


def check_primitive_gradients() -> str:
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="a")
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="b")
    g = Tensor(rng.normal(size=(1, 3)) + 1.0, requires_grad=True, name="g")

    def f():
        x = T.matmul(a, b)
        x = T.layer_norm(x, g, T.scale(g, 0.5))
        y = T.softmax_rows(T.concat_features(x, T.sigmoid_map(x)))
        z = T.mul(T.relu(T.add(y, Tensor([[0.05]]))), T.broadcast_row(T.mean_pool_rows(y), 3))
        return T.add(T.sum_all(z), T.cross_entropy(T.matmul(a, b), [0, 2, 1]))

    rep = T.check_gradients(f, [a, b, g], eps=1e-5, tol=1e-4)
    assert rep.passed, f"max_rel_err={rep.max_rel_err:.3g} at {rep.worst}"
    return f"max_rel_err={rep.max_rel_err:.2e}"


def check_fusion_gradients() -> str:
    params, H, ev = _fusion_case(np.random.default_rng(2))
    rep = T.check_gradients(lambda: T.sum_all(fusion_forward(H, ev, params)), params.parameters(), 1e-5, 1e-4)
    assert rep.passed, f"max_rel_err={rep.max_rel_err:.3g} at {rep.worst}"
    return f"max_rel_err={rep.max_rel_err:.2e} over {rep.n_checked} entries"


def check_fusion_identities() -> str:
    rng = np.random.default_rng(3)
    for _ in range(20):
        params, H, ev = _fusion_case(rng)
        Q, K, V = project_qkv(H, params)
        for m in ("visual", "knowledge"):
            lk, lv = modality_lambdas(K, V, ev[m], params, m)
            assert np.all((lk.values > 0) & (lk.values < 1)) and np.all((lv.values > 0) & (lv.values < 1))
        assert np.allclose(attention_weights(Q, K).values.sum(axis=1), 1.0, atol=1e-9, rtol=0)
        params.zero_gates()
        assert np.max(np.abs(fusion_forward(H, ev, params).values - H.values)) <= 1e-12
    return "20 random instances"


def check_model_gradients() -> str:
    cfg = ModelConfig(d_model=8, n_heads=2, n_encoder_layers=2, n_decoder_layers=1, d_ff=16,
                      vocab_size=12, n_departments=3, fusion_placement={2: {"visual", "knowledge"}},
                      max_src_len=16, max_tgt_len=8, d_v=5, d_kn=6, seed=4)
    model = SummarizerModel(cfg)
    rng = np.random.default_rng(4)
    src, tgt = rng.integers(4, 12, 7).tolist(), [1] + rng.integers(4, 12, 4).tolist() + [2]
    E_v, E_kn = rng.normal(size=(1, 5)), rng.normal(size=(1, 6))

    def f():
        dl, cl = model.forward(src, tgt, E_v, E_kn)
        return joint_loss(dl, tgt[1:], cl, 1, cfg)[0]

    rep = T.check_gradients(f, model.parameters(), 1e-5, 1e-3, sample_fraction=0.05, rng=rng)
    assert rep.passed, f"max_rel_err={rep.max_rel_err:.3g} at {rep.worst}"
    return f"max_rel_err={rep.max_rel_err:.2e} over {rep.n_checked} sampled entries"


def check_loss_composition() -> str:
    cfg = ModelConfig(d_model=8, n_heads=1, n_encoder_layers=1, n_decoder_layers=1, d_ff=8,
                      vocab_size=10, n_departments=3, fusion_placement={}, max_src_len=8, max_tgt_len=8)
    rng = np.random.default_rng(5)
    for _ in range(20):
        dl = Tensor(rng.normal(size=(4, 10)))
        cl = Tensor(rng.normal(size=(1, 3)))
        tgt = rng.integers(0, 10, 4).tolist()
        L, CL, GL = joint_loss(dl, tgt, cl, int(rng.integers(3)), cfg)
        assert L.item() == 0.2 * CL.item() + 0.8 * GL.item()
    return "20 random logit sets"


def check_metric_oracles() -> str:
    s = lambda x: x.split()
    b = bleu([s("the cat")], [s("the cat sat on the mat")])
    assert b["b1"] == 1.0 and b["b2"] == 1.0 and abs(b["bp"] - math.exp(-2)) < 1e-12
    assert abs(rouge_n(s("a b c"), s("a b d"), 1)["f1"] - 2 / 3) < 1e-12
    assert abs(rouge_l(s("a c b"), s("a b c"))["f1"] - 2 / 3) < 1e-12
    assert abs(meteor_lite(s("the cat sat"), s("the cat sat")) - (1 - 0.5 / 27)) < 1e-12
    assert jaccard(s("a b c"), s("a b d")) == 0.5
    same = s("patient reports rash and itching")
    assert bleu([same], [same])["bleu"] == 1.0 and rouge_l(same, same)["f1"] == 1.0
    return "hand-computed fixtures"


def check_dkd() -> str:
    data = generate_synthetic(20, 4, seed=6)
    dumps = [distill(d.context(), data.triples).dumps(d.id) for d in data.corpus]
    again = [distill(d.context(), data.triples).dumps(d.id) for d in data.corpus]
    assert dumps == again
    for d in data.corpus:
        ctx = distill(d.context(), data.triples, DkdConfig())
        assert len(ctx.triples) <= 35 and len({t.key for t in ctx.triples}) == len(ctx.triples)
    return f"{len(dumps)} dialogues"


def check_split() -> str:
    data = generate_synthetic(100, 4, seed=7)
    for seed in range(5):
        tr, va, te = split_corpus(data.corpus, (0.8, 0.05, 0.15), seed)
        assert (len(tr), len(va), len(te)) == (80, 5, 15)
        assert sorted(d.id for d in tr + va + te) == sorted(d.id for d in data.corpus)
    return "5 seeds"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("primitive gradients", check_primitive_gradients),
    ("fusion gradients", check_fusion_gradients),
    ("fusion identities", check_fusion_identities),
    ("end-to-end gradients", check_model_gradients),
    ("loss composition", check_loss_composition),
    ("metric oracles", check_metric_oracles),
    ("knowledge distillation bounds", check_dkd),
    ("split fidelity", check_split),
]


def run_checks(mutate: str | None = None) -> list[CheckResult]:
    """Run every check; ``mutate`` names a primitive whose adjoint is deliberately corrupted."""
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            if mutate is not None:
                with T.corrupted_rule(mutate):
                    detail = fn()
            else:
                detail = fn()
            ok = True
        except AssertionError as exc:
            ok, detail = False, str(exc) or "assertion failed"
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results

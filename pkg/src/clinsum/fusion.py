"""Contextualized multi-modality fusion adapter.

Given encoder hidden states ``H`` (l x d) and one pooled evidence row per
modality, the adapter builds evidence-conditioned keys/values, attends over
them with the text queries, and merges each attended stream back into ``H``
through a compound gate::

    Q, K, V   = H W_Q, H W_K, H W_V
    lam_k     = sigmoid(K W_k1 + (E U_k) W_k2)          (l x 1, same for lam_v)
    K_hat     = (1 - lam_k) * K + lam_k * (E U_k)        (same for V_hat)
    H_m       = softmax(Q K_hat^T / sqrt(d)) V_hat
    g_m       = [H ; H_m] W_g + b_g
    H_out     = H + sum_m g_m * H_m
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODALITIES = ("visual", "knowledge")

InitFn = Callable[[str, tuple[int, int], int], Tensor]


def uniform_init(rng: np.random.Generator) -> InitFn:
    """Initializer drawing U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from ``rng``."""
    def init(name: str, shape: tuple[int, int], fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=name)
    return init


@dataclass
class ModalityParams:
    U_k: Tensor      # d_m x d
    U_v: Tensor      # d_m x d
    W_k1: Tensor     # d x 1
    W_k2: Tensor     # d x 1
    W_v1: Tensor     # d x 1
    W_v2: Tensor     # d x 1
    W_g: Tensor      # 2d x d
    b_g: Tensor      # 1 x d

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class FusionParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    modalities: dict[str, ModalityParams] = field(default_factory=dict)
    gate_activation: str = "linear"

    @property
    def d(self) -> int:
        return self.W_Q.rows

    @classmethod
    def init(
        cls,
        d: int,
        widths: Mapping[str, int],
        init: InitFn | np.random.Generator,
        prefix: str = "fusion",
        gate_activation: str = "linear",
    ) -> "FusionParams":
        """Fresh parameters for ``d``-wide hidden states and the given evidence widths."""
        if isinstance(init, np.random.Generator):
            init = uniform_init(init)
        unknown = set(widths) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}; expected a subset of {MODALITIES}")
        if gate_activation not in ("linear", "sigmoid"):
            raise ValueError("gate_activation must be 'linear' or 'sigmoid'")
        mods = {}
        # fixed modality order keeps the parameter list stable
        for m in MODALITIES:
            if m not in widths:
                continue
            dm, p = widths[m], f"{prefix}.{m}"
            mods[m] = ModalityParams(
                U_k=init(f"{p}.U_k", (dm, d), dm),
                U_v=init(f"{p}.U_v", (dm, d), dm),
                W_k1=init(f"{p}.W_k1", (d, 1), d),
                W_k2=init(f"{p}.W_k2", (d, 1), d),
                W_v1=init(f"{p}.W_v1", (d, 1), d),
                W_v2=init(f"{p}.W_v2", (d, 1), d),
                W_g=init(f"{p}.W_g", (2 * d, d), 2 * d),
                b_g=init(f"{p}.b_g", (1, d), 2 * d),
            )
        return cls(
            W_Q=init(f"{prefix}.W_Q", (d, d), d),
            W_K=init(f"{prefix}.W_K", (d, d), d),
            W_V=init(f"{prefix}.W_V", (d, d), d),
            modalities=mods,
            gate_activation=gate_activation,
        )

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V}
        for m, mp in self.modalities.items():
            out.update({f"{m}.{k}": v for k, v in mp.tensors().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def zero_gates(self) -> None:
        """Set every compound-gate weight and bias to zero (makes the block an identity)."""
        for mp in self.modalities.values():
            mp.W_g.values[...] = 0.0
            mp.b_g.values[...] = 0.0


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise T.ShapeError(msg)


def project_qkv(H: Tensor, params: FusionParams) -> tuple[Tensor, Tensor, Tensor]:
    _check(H.cols == params.d, f"hidden states are {H.shape}, adapter expects width {params.d}")
    return T.matmul(H, params.W_Q), T.matmul(H, params.W_K), T.matmul(H, params.W_V)


def _evidence_proj(E: Tensor, U: Tensor) -> Tensor:
    _check(E.shape == (1, U.rows), f"evidence is {E.shape}, projection expects 1x{U.rows}")
    return T.matmul(E, U)


def modality_lambdas(K: Tensor, V: Tensor, E: Tensor, params: FusionParams, modality: str) -> tuple[Tensor, Tensor]:
    """Per-position mixing weights (l x 1) for keys and values, strictly in (0, 1)."""
    mp = params.modalities[modality]
    _check(K.shape == V.shape and K.cols == params.d, f"K {K.shape} / V {V.shape} do not match width {params.d}")
    lam_k = T.sigmoid_map(T.add(T.matmul(K, mp.W_k1), T.matmul(_evidence_proj(E, mp.U_k), mp.W_k2)))
    lam_v = T.sigmoid_map(T.add(T.matmul(V, mp.W_v1), T.matmul(_evidence_proj(E, mp.U_v), mp.W_v2)))
    return lam_k, lam_v


def conditioned_kv(
    K: Tensor, V: Tensor, E: Tensor, lam_k: Tensor, lam_v: Tensor, params: FusionParams, modality: str
) -> tuple[Tensor, Tensor]:
    mp = params.modalities[modality]
    _check(lam_k.shape == (K.rows, 1) and lam_v.shape == (V.rows, 1),
           f"lambdas must be {K.rows}x1, got {lam_k.shape} and {lam_v.shape}")
    one = Tensor(np.ones((1, 1)))

    def mix(X: Tensor, lam: Tensor, U: Tensor) -> Tensor:
        return T.add(T.mul(T.sub(one, lam), X), T.mul(lam, _evidence_proj(E, U)))

    return mix(K, lam_k, mp.U_k), mix(V, lam_v, mp.U_v)


def attention_weights(Q: Tensor, K_hat: Tensor) -> Tensor:
    _check(Q.cols == K_hat.cols, f"Q {Q.shape} and K_hat {K_hat.shape} widths differ")
    return T.softmax_rows(T.scale(T.matmul(Q, T.transpose(K_hat)), 1.0 / math.sqrt(K_hat.cols)))


def modality_attention(Q: Tensor, K_hat: Tensor, V_hat: Tensor) -> Tensor:
    _check(K_hat.shape == V_hat.shape, f"K_hat {K_hat.shape} and V_hat {V_hat.shape} differ")
    return T.matmul(attention_weights(Q, K_hat), V_hat)


def fuse(H: Tensor, attended: Mapping[str, Tensor], params: FusionParams) -> Tensor:
    out = H
    for m in MODALITIES:
        if m not in attended:
            continue
        Hm = attended[m]
        _check(Hm.shape == H.shape, f"{m} attention output {Hm.shape} does not match H {H.shape}")
        mp = params.modalities[m]
        gate = T.add(T.matmul(T.concat_features(H, Hm), mp.W_g), mp.b_g)
        if params.gate_activation == "sigmoid":
            gate = T.sigmoid_map(gate)
        out = T.add(out, T.mul(gate, Hm))
    return out


def _as_row(E) -> Tensor:
    return E if isinstance(E, Tensor) else Tensor(np.asarray(E, dtype=np.float64).reshape(1, -1))


def fusion_forward(H: Tensor, evidence: Mapping[str, object], params: FusionParams) -> Tensor:
    """Full adapter; modalities without evidence or without parameters are skipped."""
    extra = set(evidence) - set(MODALITIES)
    if extra:
        raise ValueError(f"unknown evidence modalities {sorted(extra)}")
    active = [m for m in MODALITIES if m in evidence and m in params.modalities]
    if not active:
        return H
    Q, K, V = project_qkv(H, params)
    attended = {}
    for m in active:
        E = _as_row(evidence[m])
        lam_k, lam_v = modality_lambdas(K, V, E, params, m)
        K_hat, V_hat = conditioned_kv(K, V, E, lam_k, lam_v, params, m)
        attended[m] = modality_attention(Q, K_hat, V_hat)
    return fuse(H, attended, params)

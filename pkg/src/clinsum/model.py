"""Multi-task encoder-decoder summarizer with fusion adapters.

The encoder stacks post-norm transformer layers; after the layers named in
``ModelConfig.fusion_placement`` a :mod:`clinsum.fusion` adapter injects the
visual and/or knowledge evidence. The fused encoding feeds a department
classifier (mean-pooled, one hidden ReLU layer) and a causal decoder that
cross-attends to it.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, PAD, UNK, Vocabulary
from .fusion import MODALITIES, FusionParams, fusion_forward
from .tensor import Tensor

NEG_INF = -1e30


class ConfigError(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


def _default_placement() -> dict[int, frozenset[str]]:
    return {3: frozenset({"knowledge"}), 4: frozenset({"visual"})}


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    n_encoder_layers: int = 6
    n_decoder_layers: int = 2
    d_ff: int = 64
    vocab_size: int = 64
    n_departments: int = 9
    fusion_placement: dict[int, frozenset[str]] = field(default_factory=_default_placement)
    fusion_position: str = "ffn"        # "ffn": after the layer output, "attn": after self-attention
    gate_activation: str = "linear"
    max_src_len: int = 360
    max_tgt_len: int = 64
    alpha_cl: float = 0.2
    alpha_gl: float = 0.8
    d_v: int = 786
    d_kn: int = 786
    learning_rate: float = 5e-5
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    target_field: str = "summary"

    def __post_init__(self):
        self.fusion_placement = {
            int(k): frozenset(v) for k, v in dict(self.fusion_placement).items() if v
        }
        self.validate()

    def validate(self) -> None:
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        for name in ("n_encoder_layers", "n_decoder_layers", "d_ff", "vocab_size",
                     "n_departments", "max_src_len", "max_tgt_len", "d_v", "d_kn",
                     "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.alpha_cl + self.alpha_gl != 1.0:
            raise ConfigError(f"alpha_cl + alpha_gl must equal 1, got {self.alpha_cl} + {self.alpha_gl}")
        for layer, mods in self.fusion_placement.items():
            if not 1 <= layer <= self.n_encoder_layers:
                raise ConfigError(f"fusion layer {layer} outside [1, {self.n_encoder_layers}]")
            bad = set(mods) - set(MODALITIES)
            if bad:
                raise ConfigError(f"unknown modalities {sorted(bad)} at layer {layer}")
        if self.fusion_position not in ("ffn", "attn"):
            raise ConfigError("fusion_position must be 'ffn' or 'attn'")
        if self.gate_activation not in ("linear", "sigmoid"):
            raise ConfigError("gate_activation must be 'linear' or 'sigmoid'")
        if self.target_field not in ("summary", "mcs", "doctor_impression"):
            raise ConfigError(f"unknown target_field {self.target_field!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fusion_placement"] = {str(k): sorted(v) for k, v in sorted(self.fusion_placement.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        return cls(**dict(d))

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), **changes})


def sinusoidal_table(n_pos: int, d: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class SummarizerModel:
    """Parameters plus the forward computations of the multi-task network.

    Each parameter is initialised from a generator keyed by ``(seed, name)``,
    so adding or removing fusion sites never perturbs the other weights.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None,
                 departments: Sequence[str] | None = None):
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ConfigError(f"config.vocab_size={config.vocab_size} but vocabulary has {len(vocab)} tokens")
        if departments is not None and len(departments) != config.n_departments:
            raise ConfigError(f"config.n_departments={config.n_departments} but {len(departments)} labels given")
        self.config = config
        self.vocab = vocab
        self.departments = list(departments) if departments is not None else None
        self.params: dict[str, Tensor] = {}
        self.fusion: dict[int, FusionParams] = {}
        self.pos_table = sinusoidal_table(max(config.max_src_len, config.max_tgt_len), config.d_model)
        self._build()

    # ------------------------------------------------------------ parameters

    def _init(self, name: str, shape: tuple[int, int], fan_in: int) -> Tensor:
        rng = np.random.default_rng([self.config.seed, zlib.crc32(name.encode())])
        bound = 1.0 / math.sqrt(fan_in)
        t = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _const(self, name: str, value: float, shape: tuple[int, int]) -> Tensor:
        t = Tensor(np.full(shape, value), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _attn_params(self, p: str) -> None:
        c = self.config
        dh = c.d_model // c.n_heads
        for h in range(c.n_heads):
            for w in ("W_q", "W_k", "W_v"):
                self._init(f"{p}.h{h}.{w}", (c.d_model, dh), c.d_model)
        self._init(f"{p}.W_o", (c.d_model, c.d_model), c.d_model)
        self._init(f"{p}.b_o", (1, c.d_model), c.d_model)

    def _norm_params(self, p: str) -> None:
        self._const(f"{p}.gamma", 1.0, (1, self.config.d_model))
        self._const(f"{p}.beta", 0.0, (1, self.config.d_model))

    def _ffn_params(self, p: str) -> None:
        c = self.config
        self._init(f"{p}.W1", (c.d_model, c.d_ff), c.d_model)
        self._init(f"{p}.b1", (1, c.d_ff), c.d_model)
        self._init(f"{p}.W2", (c.d_ff, c.d_model), c.d_ff)
        self._init(f"{p}.b2", (1, c.d_model), c.d_ff)

    def _build(self) -> None:
        c = self.config
        self._init("tok_emb", (c.vocab_size, c.d_model), c.d_model)
        for i in range(1, c.n_encoder_layers + 1):
            p = f"enc{i}"
            self._attn_params(f"{p}.attn")
            self._norm_params(f"{p}.ln1")
            self._ffn_params(f"{p}.ffn")
            self._norm_params(f"{p}.ln2")
            mods = c.fusion_placement.get(i)
            if mods:
                widths = {m: (c.d_v if m == "visual" else c.d_kn) for m in mods}
                site = FusionParams.init(c.d_model, widths, self._init, prefix=f"fusion{i}",
                                         gate_activation=c.gate_activation)
                self.fusion[i] = site
        self._init("dept.W1", (c.d_model, c.d_model), c.d_model)
        self._init("dept.b1", (1, c.d_model), c.d_model)
        self._init("dept.W2", (c.d_model, c.n_departments), c.d_model)
        self._init("dept.b2", (1, c.n_departments), c.d_model)
        for i in range(1, c.n_decoder_layers + 1):
            p = f"dec{i}"
            self._attn_params(f"{p}.self")
            self._norm_params(f"{p}.ln1")
            self._attn_params(f"{p}.cross")
            self._norm_params(f"{p}.ln2")
            self._ffn_params(f"{p}.ffn")
            self._norm_params(f"{p}.ln3")
        self._init("out.W", (c.d_model, c.vocab_size), c.d_model)
        self._init("out.b", (1, c.vocab_size), c.d_model)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))

    def fusion_parameters(self) -> list[Tensor]:
        return [t for site in self.fusion.values() for t in site.parameters()]

    # ------------------------------------------------------------ building blocks

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _mha(self, p: str, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        c = self.config
        dh = c.d_model // c.n_heads
        heads = []
        for h in range(c.n_heads):
            q = T.matmul(x_q, self._p(f"{p}.h{h}.W_q"))
            k = T.matmul(x_kv, self._p(f"{p}.h{h}.W_k"))
            v = T.matmul(x_kv, self._p(f"{p}.h{h}.W_v"))
            scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
            if mask is not None:
                scores = T.add(scores, Tensor(mask))
            heads.append(T.matmul(T.softmax_rows(scores), v))
        cat = heads[0]
        for hd in heads[1:]:
            cat = T.concat_features(cat, hd)
        return T.add(T.matmul(cat, self._p(f"{p}.W_o")), self._p(f"{p}.b_o"))

    def _ffn(self, p: str, x: Tensor) -> Tensor:
        h = T.relu(T.add(T.matmul(x, self._p(f"{p}.W1")), self._p(f"{p}.b1")))
        return T.add(T.matmul(h, self._p(f"{p}.W2")), self._p(f"{p}.b2"))

    def _norm(self, p: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self._p(f"{p}.gamma"), self._p(f"{p}.beta"))

    def _embed(self, ids: Sequence[int]) -> Tensor:
        c = self.config
        ids = [i if 0 <= i < c.vocab_size else UNK for i in ids]
        x = T.scale(T.embedding(self._p("tok_emb"), ids), math.sqrt(c.d_model))
        return T.add(x, Tensor(self.pos_table[: len(ids)]))

    # ------------------------------------------------------------ forward passes

    def encode(self, src_tokens: Sequence[int], E_v=None, E_kn=None, use_fusion: bool = True) -> Tensor:
        """Encoder states (l x d_model) with evidence fused at the configured layers."""
        c = self.config
        if not 1 <= len(src_tokens) <= c.max_src_len:
            raise SequenceTooLong(f"source length {len(src_tokens)} outside [1, {c.max_src_len}]")
        evidence = {}
        if E_v is not None:
            evidence["visual"] = E_v
        if E_kn is not None:
            evidence["knowledge"] = E_kn
        x = self._embed(src_tokens)
        for i in range(1, c.n_encoder_layers + 1):
            p = f"enc{i}"
            site = self.fusion.get(i) if use_fusion else None
            x = self._norm(f"{p}.ln1", T.add(x, self._mha(f"{p}.attn", x, x)))
            if site is not None and c.fusion_position == "attn":
                x = fusion_forward(x, evidence, site)
            x = self._norm(f"{p}.ln2", T.add(x, self._ffn(f"{p}.ffn", x)))
            if site is not None and c.fusion_position == "ffn":
                x = fusion_forward(x, evidence, site)
        return x

    def classify_department(self, H: Tensor) -> Tensor:
        pooled = T.mean_pool_rows(H)
        h = T.relu(T.add(T.matmul(pooled, self._p("dept.W1")), self._p("dept.b1")))
        return T.add(T.matmul(h, self._p("dept.W2")), self._p("dept.b2"))

    def decode_train(self, dec_input: Sequence[int], H: Tensor) -> Tensor:
        """Logits (t x vocab) for each decoder input position under a causal mask."""
        c = self.config
        t = len(dec_input)
        if not 1 <= t <= c.max_tgt_len:
            raise SequenceTooLong(f"target length {t} outside [1, {c.max_tgt_len}]")
        mask = np.triu(np.full((t, t), NEG_INF), k=1)
        x = self._embed(dec_input)
        for i in range(1, c.n_decoder_layers + 1):
            p = f"dec{i}"
            x = self._norm(f"{p}.ln1", T.add(x, self._mha(f"{p}.self", x, x, mask)))
            x = self._norm(f"{p}.ln2", T.add(x, self._mha(f"{p}.cross", x, H)))
            x = self._norm(f"{p}.ln3", T.add(x, self._ffn(f"{p}.ffn", x)))
        return T.add(T.matmul(x, self._p("out.W")), self._p("out.b"))

    def forward(self, src: Sequence[int], tgt: Sequence[int], E_v=None, E_kn=None):
        """(decoder logits, department logits) under teacher forcing on ``tgt``."""
        H = self.encode(src, E_v, E_kn)
        return self.decode_train(tgt[:-1], H), self.classify_department(H)

    # ------------------------------------------------------------ inference

    def _next_logprobs(self, prefix: Sequence[int], H: Tensor) -> np.ndarray:
        z = self.decode_train(prefix, H).values[-1].copy()
        z[PAD] = NEG_INF
        z[BOS] = NEG_INF
        z = z - z.max()
        return z - np.log(np.exp(z).sum())

    def generate(self, src_tokens: Sequence[int], E_v=None, E_kn=None, strategy: str = "greedy",
                 beam_size: int = 1, max_tgt_len: int | None = None) -> list[int]:
        """Decode from BOS until EOS or ``max_tgt_len`` generated tokens (EOS not returned)."""
        limit = max_tgt_len if max_tgt_len is not None else self.config.max_tgt_len - 1
        limit = min(limit, self.config.max_tgt_len - 1)
        with T.no_grad():
            H = self.encode(src_tokens, E_v, E_kn)
            if strategy == "greedy":
                return self._greedy(H, limit)
            if strategy == "beam":
                return self._beam(H, limit, beam_size)
        raise ValueError(f"unknown decoding strategy {strategy!r}")

    def _greedy(self, H: Tensor, limit: int) -> list[int]:
        seq = [BOS]
        for _ in range(limit):
            nxt = int(np.argmax(self._next_logprobs(seq, H)))
            if nxt == EOS:
                break
            seq.append(nxt)
        return seq[1:]

    def _beam(self, H: Tensor, limit: int, k: int) -> list[int]:
        if k < 1:
            raise ValueError("beam size must be >= 1")

        def rank(h):
            toks, total, _ = h
            return (-total / (len(toks) - 1), toks)

        beams = [((BOS,), 0.0, False)]
        for _ in range(limit):
            pool = [h for h in beams if h[2]]
            for toks, total, done in beams:
                if done:
                    continue
                lp = self._next_logprobs(toks, H)
                for tok in np.argsort(-lp, kind="stable")[:k]:
                    pool.append((toks + (int(tok),), total + float(lp[tok]), int(tok) == EOS))
            beams = sorted(pool, key=rank)[:k]
            if all(h[2] for h in beams):
                break
        toks = beams[0][0][1:]
        return list(toks[:-1] if toks and toks[-1] == EOS else toks)


def joint_loss(dec_logits: Tensor, tgt_out: Sequence[int], dept_logits: Tensor, dept_label: int,
               config: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(L, CL, GL) with L = alpha_cl * CL + alpha_gl * GL; PAD targets are ignored."""
    if not 0 <= dept_label < dept_logits.cols:
        raise IndexError(f"department label {dept_label} outside [0, {dept_logits.cols})")
    CL = T.cross_entropy(dept_logits, [dept_label])
    GL = T.cross_entropy(dec_logits, tgt_out, ignore_index=PAD)
    L = T.add(T.scale(CL, config.alpha_cl), T.scale(GL, config.alpha_gl))
    return L, CL, GL


def combine_losses(cl: float, gl: float, config: ModelConfig) -> float:
    return config.alpha_cl * cl + config.alpha_gl * gl

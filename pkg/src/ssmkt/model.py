"""Knowledge-tracing models: Rasch embeddings, a Mamba stack or an attention
stack, and a sigmoid prediction head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit

from . import tensor as T
from .mamba import BlockConfig, FFNSublayer, MambaBlock
from .nn import Linear, Module, make_rng, normal, parameter
from .tensor import Tensor

PROB_EPS = 1e-7


@dataclass
class ModelConfig:
    n_questions: int
    n_concepts: int
    d_model: int = 128
    n_layers: int = 5
    expand: int = 2
    n_state: int = 16
    conv_kernel: int = 4
    dt_rank: int | None = None
    use_ffn: bool = True
    use_rasch: bool = True
    ffn_placement: str = "block"
    lam: float = 1e-5
    max_seq_len: int = 200
    freeze_A: bool = False
    use_skip: bool = False
    head_concat_question: bool = False
    dropout: float = 0.0
    scan: str = "parallel"
    arch: str = "mamba"
    dtype: str = "float64"

    def __post_init__(self):
        if self.ffn_placement not in ("block", "final"):
            raise ValueError(f"ffn_placement must be 'block' or 'final', got {self.ffn_placement!r}")
        if self.arch not in ("mamba", "attention"):
            raise ValueError(f"unknown arch {self.arch!r}")

    def block(self) -> BlockConfig:
        return BlockConfig(self.d_model, self.expand, self.conv_kernel, self.n_state,
                           self.dt_rank, self.use_skip, self.freeze_A, self.scan)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**parse_config_text(text, cls))


def parse_config_text(text: str, cls) -> dict:
    """Parse ``key = value`` lines into typed kwargs for dataclass ``cls``."""
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, str(types[key]))
    return out


def _coerce(value: str, type_name: str):
    if value == "None":
        return None
    if "bool" in type_name:
        if value not in ("True", "False", "true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {value!r}")
        return value in ("True", "true", "1")
    if "int" in type_name:
        return int(value)
    if "float" in type_name:
        return float(value)
    return value


def kt_loss(p: Tensor, r, mask, difficulty: Tensor | None = None, lam: float = 0.0) -> Tensor:
    """Summed binary cross-entropy over valid positions plus lam * ||difficulty||^2."""
    r = np.asarray(r, dtype=p.dtype)
    mask = np.asarray(mask, dtype=p.dtype)
    pc = T.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    ll = T.log(pc) * Tensor(r * mask) + T.log(1.0 - pc) * Tensor((1.0 - r) * mask)
    loss = -T.sum_(ll)
    if difficulty is not None and lam:
        loss = loss + T.sum_(difficulty * difficulty) * lam
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss {float(loss.data)} "
                                 f"(p range [{float(p.data.min())}, {float(p.data.max())}])")
    return loss


class CausalSelfAttention(Module):
    """Single-head scaled dot-product attention with a causal mask."""

    def __init__(self, d_model: int, rng, dtype=np.float64):
        self.query = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.key = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.value = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.proj = Linear(d_model, d_model, rng, bias=False, dtype=dtype)

    def attend(self, x: Tensor) -> Tensor:
        n = x.shape[-2]
        q, k, v = self.query(x), self.key(x), self.value(x)
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(x.shape[-1]))
        causal = np.tril(np.ones((n, n), dtype=bool))
        weights = T.softmax(T.masked_fill(scores, causal, -np.inf))
        return T.matmul(weights, v)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.attend(x))


class AttentionBlock(Module):
    def __init__(self, d_model: int, rng, dtype=np.float64):
        self.attn = CausalSelfAttention(d_model, rng, dtype)
        self.norm_weight = parameter(np.ones(d_model), dtype)
        self.norm_bias = parameter(np.zeros(d_model), dtype)

    def forward(self, x: Tensor, trace=None) -> Tensor:
        return T.layer_norm(self.attn(x) + x, self.norm_weight, self.norm_bias)


class KTModel(Module):
    """Shared embedding, input assembly and head; subclasses supply ``blocks``."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        dtype = np.dtype(config.dtype)
        self._dtype = dtype
        rng = make_rng(seed)
        D, nc, nq = config.d_model, config.n_concepts, config.n_questions
        self.concept_emb = normal(rng, (nc, D), dtype=dtype)
        self.response_emb = normal(rng, (2, D), dtype=dtype)
        if config.use_rasch:
            self.concept_var = normal(rng, (nc, D), dtype=dtype)
            self.response_var = normal(rng, (nc, 2, D), dtype=dtype)
            self.difficulty = parameter(np.zeros(nq), dtype)
        else:
            self.concept_var = self.response_var = self.difficulty = None
        self.start = normal(rng, (D,), dtype=dtype)
        self.blocks = self._make_blocks(rng, dtype)
        n_ffn = 0
        if config.use_ffn:
            n_ffn = config.n_layers if config.ffn_placement == "block" else 1
        self.ffns = [FFNSublayer(D, rng, dtype) for _ in range(n_ffn)]
        head_in = 2 * D if config.head_concat_question else D
        self.head = Linear(head_in, 1, rng, dtype=dtype)
        self._drop_rng = make_rng(np.random.SeedSequence(seed).spawn(1)[0])

    def _make_blocks(self, rng, dtype) -> list:
        raise NotImplementedError

    # -- embeddings --------------------------------------------------------
    def _check_ids(self, q, c, r):
        cfg = self.config
        for name, ids, n in (("question", q, cfg.n_questions), ("concept", c, cfg.n_concepts), ("response", r, 2)):
            bad = np.argwhere((ids < 0) | (ids >= n))
            if bad.size:
                pos = tuple(int(i) for i in bad[0])
                raise IndexError(f"{name} id {int(ids[pos])} out of range [0, {n}) at position {pos}")

    def rasch_embed(self, q, c, r) -> tuple[Tensor, Tensor]:
        """Question and response embeddings, each (..., T, D)."""
        q, c, r = (np.asarray(a, dtype=np.int64) for a in (q, c, r))
        self._check_ids(q, c, r)
        Qe = T.embedding(self.concept_emb, c)
        Re = T.embedding(self.response_emb, r)
        if self.config.use_rasch:
            mu = T.embedding(T.reshape(self.difficulty, (-1, 1)), q)
            Qe = Qe + mu * T.embedding(self.concept_var, c)
            pair = T.reshape(self.response_var, (-1, self.config.d_model))
            Re = Re + mu * T.embedding(pair, c * 2 + r)
        return Qe, Re

    def build_inputs(self, Qe: Tensor, Re: Tensor) -> Tensor:
        """input_t = Q_t + R_{t-1}, with a learned start vector standing in for R_{-1}."""
        first = T.reshape(self.start, (1,) * (Re.ndim - 1) + (-1,)) + np.zeros(Re.shape[:-2] + (1, 1), self._dtype)
        return Qe + T.shift_right(Re, first, axis=-2)

    # -- forward -----------------------------------------------------------
    def features(self, q, c, r, trace: list | None = None) -> tuple[Tensor, Tensor]:
        Qe, Re = self.rasch_embed(q, c, r)
        h = T.dropout(self.build_inputs(Qe, Re), self.config.dropout, self._drop_rng, self.training)
        per_block = self.config.ffn_placement == "block"
        for i, block in enumerate(self.blocks):
            h = block(h, trace=trace)
            if per_block and self.ffns:
                h = self.ffns[i](h)
        if not per_block and self.ffns:
            h = self.ffns[0](h)
        return h, Qe

    def forward(self, q, c, r, trace: list | None = None) -> Tensor:
        """Probability of a correct answer at every step, shape (..., T)."""
        f, Qe = self.features(q, c, r, trace)
        if self.config.head_concat_question:
            f = T.concat([f, Qe], axis=-1)
        logits = self.head(f)
        return T.sigmoid(T.reshape(logits, logits.shape[:-1]))

    def predict(self, q, c, r) -> np.ndarray:
        was = self.training
        self.eval()
        with T.no_grad():
            p = self.forward(q, c, r).data
        self.train(was)
        return p

    def loss(self, p: Tensor, r, mask) -> Tensor:
        return kt_loss(p, r, mask, self.difficulty, self.config.lam)


class Mamba4KT(KTModel):
    def _make_blocks(self, rng, dtype):
        bc = self.config.block()
        return [MambaBlock(bc, rng, dtype) for _ in range(self.config.n_layers)]

    # -- recurrent inference ----------------------------------------------
    def init_state(self, batch_shape=()):
        return {"blocks": [b.init_state(batch_shape) for b in self.blocks], "prev": None}

    def state_scalars(self, state) -> int:
        n = sum(b.state_scalars(s) for b, s in zip(self.blocks, state["blocks"]))
        return n + (state["prev"].size if state["prev"] is not None else 0)

    def _embed_np(self, q, c, r):
        cfg = self.config
        Qe = self.concept_emb.data[c]
        Re = self.response_emb.data[r]
        if cfg.use_rasch:
            mu = self.difficulty.data[q][..., None]
            Qe = Qe + mu * self.concept_var.data[c]
            Re = Re + mu * self.response_var.data[c, r]
        return Qe, Re

    def step(self, state, q_t, c_t, r_t):
        """Consume one interaction; returns (state, p_t) where p_t ignores r_t.

        ``r_t`` is only folded into the state for the next step, so the
        prediction for step t is made before its response is seen.
        """
        q_t, c_t, r_t = (np.asarray(a, dtype=np.int64) for a in (q_t, c_t, r_t))
        self._check_ids(q_t, c_t, r_t)
        Qe, Re = self._embed_np(q_t, c_t, r_t)
        prev = state["prev"] if state["prev"] is not None else np.broadcast_to(self.start.data, Qe.shape)
        h = Qe + prev
        per_block = self.config.ffn_placement == "block"
        new_blocks = []
        for i, (block, s) in enumerate(zip(self.blocks, state["blocks"])):
            s, h = block.step(s, h)
            new_blocks.append(s)
            if per_block and self.ffns:
                h = self.ffns[i].step(h)
        if not per_block and self.ffns:
            h = self.ffns[0].step(h)
        if self.config.head_concat_question:
            h = np.concatenate([h, Qe], axis=-1)
        p = expit(self.head.step(h)[..., 0])
        return {"blocks": new_blocks, "prev": Re}, p


class AttentionKT(KTModel):
    """Same embeddings and head with causal self-attention blocks in place of Mamba."""

    def _make_blocks(self, rng, dtype):
        return [AttentionBlock(self.config.d_model, rng, dtype) for _ in range(self.config.n_layers)]


def build_model(config: ModelConfig, seed: int = 0) -> KTModel:
    return (Mamba4KT if config.arch == "mamba" else AttentionKT)(config, seed)

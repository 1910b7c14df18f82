"""Mamba block (expand, causal conv, SiLU, S6, SiLU gate, project, post-norm) and FFN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

from . import tensor as T
from .nn import Linear, Module, parameter, uniform_fan_in
from .ssm import S6, S6Config
from .tensor import Tensor


def _silu(x):
    return x * expit(x)


def _layer_norm_np(x, w=None, b=None, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    out = xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    if w is not None:
        out = out * w
    if b is not None:
        out = out + b
    return out


@dataclass
class BlockConfig:
    d_model: int
    expand: int = 2
    conv_kernel: int = 4
    n_state: int = 16
    dt_rank: int | None = None
    use_skip: bool = False
    freeze_A: bool = False
    scan: str = "parallel"

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def s6(self) -> S6Config:
        return S6Config(self.d_inner, self.n_state, self.dt_rank, self.use_skip,
                        self.freeze_A, self.scan)


class FFN(Module):
    """Position-wise GELU(H W1 + b1) W2 + b2 with a 4x hidden width."""

    def __init__(self, d_model: int, rng, dtype=np.float64):
        self.lin1 = Linear(d_model, 4 * d_model, rng, dtype=dtype)
        self.lin2 = Linear(4 * d_model, d_model, rng, dtype=dtype)

    def forward(self, h: Tensor) -> Tensor:
        return self.lin2(T.gelu(self.lin1(h)))

    def step(self, h: np.ndarray) -> np.ndarray:
        pre = self.lin1.step(h)
        return self.lin2.step(pre * 0.5 * (1.0 + erf(pre / np.sqrt(2.0))))


class FFNSublayer(Module):
    """LayerNorm(FFN(H) + H); the norm has no affine parameters."""

    def __init__(self, d_model: int, rng, dtype=np.float64):
        self.ffn = FFN(d_model, rng, dtype)

    def forward(self, h: Tensor) -> Tensor:
        return T.layer_norm(self.ffn(h) + h)

    def step(self, h: np.ndarray) -> np.ndarray:
        return _layer_norm_np(self.ffn.step(h) + h)


class MambaBlock(Module):
    def __init__(self, config: BlockConfig, rng, dtype=np.float64):
        self.config = config
        d, di, k = config.d_model, config.d_inner, config.conv_kernel
        self.in_x = Linear(d, di, rng, bias=False, dtype=dtype)
        self.in_z = Linear(d, di, rng, bias=False, dtype=dtype)
        self.conv_weight = uniform_fan_in(rng, (di, k), k, dtype)
        self.conv_bias = uniform_fan_in(rng, (di,), k, dtype)
        self.s6 = S6(config.s6(), rng, dtype)
        self.out = Linear(di, d, rng, bias=False, dtype=dtype)
        self.norm_weight = parameter(np.ones(d), dtype)
        self.norm_bias = parameter(np.zeros(d), dtype)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        xc = T.silu(T.causal_conv1d(self.in_x(x), self.conv_weight, self.conv_bias))
        z = T.silu(self.in_z(x))
        y = self.out(self.s6(xc, trace=trace) * z)
        return T.layer_norm(y + x, self.norm_weight, self.norm_bias)

    # -- recurrent inference ----------------------------------------------
    def init_state(self, batch_shape=()):
        c = self.config
        conv = np.zeros(tuple(batch_shape) + (c.conv_kernel - 1, c.d_inner), dtype=self.out.weight.dtype)
        return {"conv": conv, "h": self.s6.init_state(batch_shape)}

    def state_scalars(self, state) -> int:
        return state["conv"].size + state["h"].size

    def step(self, state, x_t: np.ndarray):
        w = self.conv_weight.data
        xi = self.in_x.step(x_t)
        conv = state["conv"]
        k = w.shape[1]
        acc = xi * w[:, 0]
        for j in range(1, k):
            acc = acc + conv[..., k - 1 - j, :] * w[:, j]
        acc = acc + self.conv_bias.data
        if k > 1:
            conv = np.concatenate([conv[..., 1:, :], xi[..., None, :]], axis=-2)
        xc = _silu(acc)
        z = _silu(self.in_z.step(x_t))
        h, y = self.s6.step(state["h"], xc)
        out = _layer_norm_np(self.out.step(y * z) + x_t, self.norm_weight.data, self.norm_bias.data)
        return {"conv": conv, "h": h}, out

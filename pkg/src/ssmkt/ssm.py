"""Selective state-space layer (S6) with zero-order-hold discretisation.

Shapes follow the (..., T, channels) convention; the per-step discrete
parameters carry an extra state axis, (..., T, d_inner, n_state).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, parameter, uniform_fan_in
from .tensor import Tensor, record

SERIES_THRESHOLD = 1e-6


# ---------------------------------------------------------------------------
# linear recurrence h_t = a_t * h_{t-1} + b_t, h_{-1} = 0, along axis 0


def combine(second, first):
    """Compose two affine maps: apply ``first`` then ``second``."""
    a2, b2 = second
    a1, b1 = first
    return a2 * a1, a2 * b1 + b2


def recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.empty_like(b)
    state = np.zeros_like(b[0])
    for t in range(a.shape[0]):
        state = a[t] * state + b[t]
        h[t] = state
    return h


def recurrence_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Work-efficient (Blelloch) scan of the affine maps (a_t, b_t).

    Up-sweep builds subtree compositions in place, the down-sweep turns them
    into exclusive prefixes, and one elementwise step makes them inclusive.
    The reduction tree depends only on T, so results are deterministic.
    """
    n_steps = a.shape[0]
    n = 1 << max(n_steps - 1, 0).bit_length()
    A = np.ones((n,) + a.shape[1:], dtype=a.dtype)
    B = np.zeros((n,) + b.shape[1:], dtype=b.dtype)
    A[:n_steps] = a
    B[:n_steps] = b

    stride = 1
    while stride < n:
        left = slice(stride - 1, n, 2 * stride)
        right = slice(2 * stride - 1, n, 2 * stride)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[right] * A[left]
        stride *= 2

    A[n - 1] = 1.0
    B[n - 1] = 0.0
    stride = n // 2
    while stride >= 1:
        left = slice(stride - 1, n, 2 * stride)
        right = slice(2 * stride - 1, n, 2 * stride)
        total_a = A[left].copy()
        total_b = B[left].copy()
        A[left] = A[right]
        B[left] = B[right]
        B[right] = total_a * B[right] + total_b
        A[right] = total_a * A[right]
        stride //= 2

    return a * B[:n_steps] + b


_RECURRENCES = {"parallel": recurrence_parallel, "sequential": recurrence_sequential}


def linear_scan(a: Tensor, b: Tensor, method: str = "parallel", axis: int = -3) -> Tensor:
    """Differentiable scan of h_t = a_t * h_{t-1} + b_t along ``axis``.

    The adjoint is the same recurrence run backwards in time,
    lam_t = g_t + a_{t+1} * lam_{t+1}, evaluated with the same method.
    """
    if a.shape != b.shape:
        raise T.ShapeError("linear_scan", a.shape, b.shape)
    run = _RECURRENCES[method]
    ad = np.moveaxis(a.data, axis, 0)
    h = run(ad, np.moveaxis(b.data, axis, 0))

    def bw(g):
        g = np.moveaxis(g, axis, 0)
        a_next = np.zeros_like(ad)
        a_next[:-1] = ad[1:]
        lam = run(a_next[::-1], g[::-1])[::-1]
        h_prev = np.zeros_like(h)
        h_prev[1:] = h[:-1]
        ga = np.moveaxis(lam * h_prev, 0, axis) if a.requires_grad else None
        gb = np.moveaxis(lam, 0, axis) if b.requires_grad else None
        return ga, gb

    return record(np.moveaxis(h, 0, axis), (a, b), bw, (ad, h))


# ---------------------------------------------------------------------------
# discretisation


def zoh_factor(u: Tensor) -> Tensor:
    """expm1(u)/u elementwise, with the series 1 + u/2 for |u| < 1e-6."""
    ud = u.data
    small = np.abs(ud) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, ud)
    e = np.expm1(safe)
    out = np.where(small, 1.0 + 0.5 * ud, e / safe)

    def bw(g):
        # d/du expm1(u)/u = (u e^u - expm1(u)) / u^2 ; series 1/2 + u/3
        d = np.where(small, 0.5 + ud / 3.0, (safe * (e + 1.0) - e) / (safe * safe))
        return (g * d,)

    return record(out, (u,), bw, (u,))


def discretize(A: Tensor, B: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order hold for diagonal A.

    A: (d, n) negative, B: (..., T, n), delta: (..., T, d) positive.
    Returns Abar = exp(delta*a) and Bbar = ((exp(delta*a) - 1)/a) * B,
    both (..., T, d, n).
    """
    if delta.shape[-1] != A.shape[0] or B.shape[-1] != A.shape[1]:
        raise T.ShapeError("discretize", A.shape, B.shape, delta.shape)
    dt = T.reshape(delta, delta.shape + (1,))
    u = dt * A
    Abar = T.exp(u)
    Bbar = dt * zoh_factor(u) * T.reshape(B, B.shape[:-1] + (1, B.shape[-1]))
    for name, arr in (("Abar", Abar.data), ("Bbar", Bbar.data)):
        if not np.all(np.isfinite(arr)):
            steps = np.argwhere(~np.isfinite(arr))[:, -3]
            raise FloatingPointError(f"non-finite {name} at timestep {int(steps[0])}")
    return Abar, Bbar


def discretize_np(a: np.ndarray, b: np.ndarray, delta: np.ndarray):
    """Numpy discretisation for a single step: a (d, n), b (..., n), delta (..., d)."""
    u = delta[..., None] * a
    small = np.abs(u) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, u)
    factor = np.where(small, 1.0 + 0.5 * u, np.expm1(safe) / safe)
    return np.exp(u), delta[..., None] * factor * b[..., None, :]


# ---------------------------------------------------------------------------
# scans


def _scan(Abar, Bbar, C, x, D, method):
    bx = Bbar * T.reshape(x, x.shape + (1,))
    h = linear_scan(Abar, bx, method)
    y = T.sum_(h * T.reshape(C, C.shape[:-1] + (1, C.shape[-1])), axis=-1)
    if D is not None:
        y = y + x * D
    return y, h


def scan_sequential(Abar: Tensor, Bbar: Tensor, C: Tensor, x: Tensor, D: Tensor | None = None) -> Tensor:
    """y_t = C_t . h_t with h_t = Abar_t h_{t-1} + Bbar_t x_t, left to right."""
    return _scan(Abar, Bbar, C, x, D, "sequential")[0]


def scan_parallel(Abar: Tensor, Bbar: Tensor, C: Tensor, x: Tensor, D: Tensor | None = None) -> Tensor:
    """Same output as :func:`scan_sequential`, via the tree scan."""
    return _scan(Abar, Bbar, C, x, D, "parallel")[0]


# ---------------------------------------------------------------------------
# layer


@dataclass
class S6Config:
    d_inner: int
    n_state: int = 16
    dt_rank: int | None = None
    use_skip: bool = False
    freeze_A: bool = False
    scan: str = "parallel"
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        if self.d_inner < 1 or self.n_state < 1:
            raise ValueError("d_inner and n_state must be >= 1")
        if self.dt_rank is None:
            self.dt_rank = math.ceil(self.d_inner / 16)
        if self.scan not in _RECURRENCES:
            raise ValueError(f"unknown scan method {self.scan!r}")


class S6(Module):
    """Selective SSM: input-dependent (delta, B, C), diagonal A = -exp(A_log)."""

    def __init__(self, config: S6Config, rng, dtype=np.float64):
        self.config = config
        d, n, r = config.d_inner, config.n_state, config.dt_rank
        # S4D-real: A[c, k] = -(k + 1)
        self.A_log = parameter(np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1))), dtype)
        self.A_log.requires_grad = not config.freeze_A
        self.W_dt_down = uniform_fan_in(rng, (d, r), d, dtype)
        self.W_dt_up = uniform_fan_in(rng, (r, d), r, dtype)
        dt = np.exp(rng.uniform(math.log(config.dt_min), math.log(config.dt_max), size=d))
        self.dt_bias = parameter(dt + np.log(-np.expm1(-dt)), dtype)  # softplus^-1
        self.W_B = uniform_fan_in(rng, (d, n), d, dtype)
        self.W_C = uniform_fan_in(rng, (d, n), d, dtype)
        self.D = parameter(np.ones(d), dtype) if config.use_skip else None

    def A(self) -> Tensor:
        return -T.exp(self.A_log)

    def selective_params(self, x: Tensor):
        # row-local projections keep recurrent step() bitwise equal to forward()
        low = T.rowwise_matmul(x, self.W_dt_down)
        delta = T.softplus(T.rowwise_matmul(low, self.W_dt_up) + self.dt_bias)
        return delta, T.rowwise_matmul(x, self.W_B), T.rowwise_matmul(x, self.W_C)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        delta, B, C = self.selective_params(x)
        Abar, Bbar = discretize(self.A(), B, delta)
        y, _ = _scan(Abar, Bbar, C, x, self.D, self.config.scan)
        if trace is not None:
            trace.append({"Abar": Abar.data, "Bbar": Bbar.data, "C": C.data,
                          "x": x.data, "y": y.data, "delta": delta.data,
                          "D": None if self.D is None else self.D.data})
        return y

    # -- recurrent inference ----------------------------------------------
    def init_state(self, batch_shape=()) -> np.ndarray:
        c = self.config
        return np.zeros(tuple(batch_shape) + (c.d_inner, c.n_state), dtype=self.A_log.dtype)

    def step(self, h: np.ndarray, x_t: np.ndarray):
        """Advance one token: x_t (..., d_inner) -> (h', y_t)."""
        with T.no_grad():
            delta, B, C = self.selective_params(Tensor(x_t[..., None, :]))
        delta, B, C = delta.data[..., 0, :], B.data[..., 0, :], C.data[..., 0, :]
        a = -np.exp(self.A_log.data)
        abar, bbar = discretize_np(a, B, delta)
        h = abar * h + bbar * x_t[..., None]
        y = (h * C[..., None, :]).sum(axis=-1)
        if self.D is not None:
            y = y + x_t * self.D.data
        return h, y

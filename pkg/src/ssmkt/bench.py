"""Sequence-length scaling harness: tape scalars, parameters and wall time.

Memory is measured as the tape's saved-scalar count for one training step on
a single sequence, which is deterministic and allocator-independent.  Wall
times are the median of ``repeats`` runs after ``warmup`` discarded runs.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import KTModel, ModelConfig, build_model
from .optim import Adam

CSV_HEADER = "model,T,train_step_s,infer_step_s,tape_scalars,params"


@dataclass
class BenchRecord:
    model: str
    T: int
    train_step_s: float | None
    infer_step_s: float | None
    tape_scalars: int
    params: int
    state_scalars: int | None = None  # recurrent inference state (mamba only)

    def csv_row(self) -> str:
        def f(v):
            return "" if v is None else f"{v:.6f}"
        return f"{self.model},{self.T},{f(self.train_step_s)},{f(self.infer_step_s)},{self.tape_scalars},{self.params}"


def bench_config(arch: str, d_model: int = 128, n_layers: int = 5, n_questions: int = 100,
                 n_concepts: int = 10, dtype: str = "float64") -> ModelConfig:
    return ModelConfig(n_questions=n_questions, n_concepts=n_concepts, d_model=d_model, n_layers=n_layers,
                       arch=arch, dtype=dtype, max_seq_len=0)


def random_sequence(config: ModelConfig, n_steps: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    q = rng.integers(0, config.n_questions, (1, n_steps))
    c = q % config.n_concepts
    r = rng.integers(0, 2, (1, n_steps))
    return q, c, r


def tape_scalars(model: KTModel, q, c, r) -> int:
    """Scalars retained for backward by one forward pass plus loss."""
    with T.recording() as tape:
        p = model(q, c, r)
        model.loss(p, r, np.ones(r.shape, dtype=bool))
        return tape.saved_scalars


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def recurrent_inference(model, q, c, r) -> tuple[np.ndarray, int]:
    """Predict a whole sequence one step at a time; returns (p, final state scalars)."""
    state = model.init_state(q.shape[:-1])
    out = np.empty(q.shape, dtype=model._dtype)
    for t in range(q.shape[-1]):
        state, out[..., t] = model.step(state, q[..., t], c[..., t], r[..., t])
    return out, model.state_scalars(state)


def bench_one(arch: str, n_steps: int, d_model: int = 128, n_layers: int = 5, repeats: int = 5,
              warmup: int = 2, timing: bool = True, seed: int = 0, dtype: str = "float64") -> BenchRecord:
    config = bench_config(arch, d_model, n_layers, dtype=dtype)
    model = build_model(config, seed)
    q, c, r = random_sequence(config, n_steps, seed)
    scalars = tape_scalars(model, q, c, r)
    state_n = recurrent_inference(model, q, c, r)[1] if arch == "mamba" else None

    train_s = infer_s = None
    if timing:
        opt = Adam(model.trainable(), lr=0.0)
        mask = np.ones(r.shape, dtype=bool)

        def train_step():
            with T.recording():
                loss = model.loss(model(q, c, r), r, mask)
                T.backward(loss)
            opt.step()
            opt.zero_grad()

        if arch == "mamba":
            def infer():
                recurrent_inference(model, q, c, r)
        else:
            def infer():
                model.predict(q, c, r)
        train_s = _median_time(train_step, repeats, warmup)
        infer_s = _median_time(infer, repeats, warmup)
    return BenchRecord(arch, n_steps, train_s, infer_s, scalars, model.num_parameters(), state_n)


def run_bench(models=("mamba", "attention"), seqlens=(128, 256, 512), d_model: int = 128, n_layers: int = 5,
              repeats: int = 5, warmup: int = 2, timing: bool = True, dtype: str = "float64") -> list[BenchRecord]:
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    return [bench_one(m, n, d_model, n_layers, repeats, warmup, timing, dtype=dtype)
            for m in models for n in seqlens]


def scalar_ratio(records, model: str, t_lo: int, t_hi: int) -> float:
    by_t = {r.T: r.tape_scalars for r in records if r.model == model}
    return by_t[t_hi] / by_t[t_lo]


def write_csv(records, path) -> Path:
    path = Path(path)
    path.write_text(CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in records))
    return path


def read_csv(path) -> list[BenchRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: expected header {CSV_HEADER!r}")
    out = []
    for line in lines[1:]:
        m, n, tr, inf, sc, pa = line.split(",")
        out.append(BenchRecord(m, int(n), float(tr) if tr else None, float(inf) if inf else None, int(sc), int(pa)))
    return out


def format_table(records) -> str:
    head = f"{'model':<10}{'T':>6}{'train_step_s':>14}{'infer_step_s':>14}{'tape_scalars':>15}{'params':>10}{'state':>8}"
    rows = [head, "-" * len(head)]
    for r in records:
        tr = "-" if r.train_step_s is None else f"{r.train_step_s:.4f}"
        inf = "-" if r.infer_step_s is None else f"{r.infer_step_s:.4f}"
        st = "-" if r.state_scalars is None else str(r.state_scalars)
        rows.append(f"{r.model:<10}{r.T:>6}{tr:>14}{inf:>14}{r.tape_scalars:>15}{r.params:>10}{st:>8}")
    return "\n".join(rows)

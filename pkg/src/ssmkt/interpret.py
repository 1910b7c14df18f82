"""Hidden-attention view of a selective scan.

Unrolling h_t = Abar_t h_{t-1} + Bbar_t x_t gives, per channel m,

    y[i, m] = sum_{j <= i} alpha[m, i, j] * x[j, m]
    alpha[m, i, j] = C_i . (prod_{k=j+1..i} Abar_k[m]) Bbar_j[m]

with the empty product (identity) on the diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_ALPHA_SCALARS = 256 * 1024 * 1024
UNDEFINED_EPS = 1e-12


class TraceError(ValueError):
    pass


def materialize_alpha(Abar: np.ndarray, Bbar: np.ndarray, C: np.ndarray, skip: np.ndarray | None = None,
                      force: bool = False) -> np.ndarray:
    """Influence tensor alpha of shape (M, T, T) from one sequence's trace.

    Abar, Bbar: (T, M, N); C: (T, N).  Entries with j > i are exactly zero.
    Row i is built right to left with a running suffix product, so each
    product is extended by one factor rather than recomputed.  A per-channel
    ``skip`` term (y += skip * x) lands on the diagonal.
    """
    if Abar.shape != Bbar.shape or Abar.ndim != 3 or C.shape != (Abar.shape[0], Abar.shape[2]):
        raise TraceError(f"trace shapes disagree: Abar {Abar.shape}, Bbar {Bbar.shape}, C {C.shape}")
    n_steps, M, _ = Abar.shape
    if M * n_steps * n_steps > MAX_ALPHA_SCALARS and not force:
        raise MemoryError(f"alpha would hold {M * n_steps * n_steps} scalars (M={M}, T={n_steps}); "
                          "pass force=True to materialize anyway")
    alpha = np.zeros((M, n_steps, n_steps), dtype=np.result_type(Abar, Bbar, C))
    for i in range(n_steps):
        suffix = np.ones_like(Abar[0])  # (M, N)
        ci = C[i]
        for j in range(i, -1, -1):
            alpha[:, i, j] = (suffix * Bbar[j]) @ ci
            suffix = suffix * Abar[j]
    if skip is not None:
        idx = np.arange(n_steps)
        alpha[:, idx, idx] += np.asarray(skip)[:, None]
    return alpha


def reconstruct(alpha: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum_j alpha[m, i, j] x[j, m] -> (T, M)."""
    return np.einsum("mij,jm->im", alpha, x)


@dataclass
class SequenceWeights:
    gamma: np.ndarray    # (M, T, T); zero outside j < i and on undefined rows
    defined: np.ndarray  # (M, T) bool
    self_influence: np.ndarray  # (M, T), alpha[m, i, i]


def sequence_weights(alpha: np.ndarray, eps: float = UNDEFINED_EPS) -> SequenceWeights:
    """Normalise each row over its strict past: gamma[m,i,j] = alpha[m,i,j] / sum_{k<i} alpha[m,i,k].

    Row 0 has no past and rows whose denominator is below ``eps`` in
    magnitude are flagged undefined instead of divided.
    """
    M, n, _ = alpha.shape
    past = np.tril(alpha, k=-1)
    denom = past.sum(axis=-1)
    defined = np.abs(denom) >= eps
    defined[:, 0] = False
    safe = np.where(defined, denom, 1.0)
    gamma = np.where(defined[..., None], past / safe[..., None], 0.0)
    diag = np.diagonal(alpha, axis1=1, axis2=2).copy()
    return SequenceWeights(gamma, defined, diag)


@dataclass
class ExerciseWeights:
    target: int
    beta: np.ndarray   # (target,)
    gamma: np.ndarray  # (target,)

    def top_k(self, k: int = 5) -> list[tuple[int, float]]:
        order = np.argsort(-self.gamma, kind="stable")[:k]
        return [(int(j), float(self.gamma[j])) for j in order]


def exercise_weights(alpha: np.ndarray, i: int) -> ExerciseWeights:
    """Channel-summed influence beta_j on step i, softmax-normalised over j < i."""
    if not 1 <= i < alpha.shape[1]:
        raise ValueError(f"target step must be in [1, {alpha.shape[1] - 1}], got {i}")
    beta = alpha[:, i, :i].sum(axis=0)
    z = np.exp(beta - beta.max())
    return ExerciseWeights(i, beta, z / z.sum())


# ---------------------------------------------------------------------------
# export


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_grid_csv(weights: SequenceWeights, channel: int, path) -> Path:
    """Header ``j0..j{T-1}``; row i holds gamma[i, j] for j < i, blank elsewhere.

    Undefined rows (including i = 0) are written with every field blank.
    """
    path = Path(path)
    g = weights.gamma[channel]
    n = g.shape[0]
    lines = [",".join(f"j{j}" for j in range(n))]
    for i in range(n):
        if weights.defined[channel, i]:
            lines.append(",".join(_fmt(g[i, j]) if j < i else "" for j in range(n)))
        else:
            lines.append("," * (n - 1))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_grid_csv(path) -> np.ndarray:
    """Inverse of :func:`write_grid_csv`; blanks come back as NaN."""
    rows = Path(path).read_text().splitlines()[1:]
    return np.array([[float(v) if v else np.nan for v in r.split(",")] for r in rows])


def _diverging(v: float, vmax: float) -> str:
    # blue (negative) - white - red (positive)
    t = 0.0 if vmax == 0 else max(-1.0, min(1.0, v / vmax))
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
    else:
        r, g, b = int(255 * (1 + t)), int(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_heatmap_svg(grid: np.ndarray, labels: list[str], path, title: str = "") -> Path:
    """Lower-triangular heatmap; NaN cells are left empty. Signed values use a diverging scale."""
    path = Path(path)
    n = grid.shape[0]
    cell, margin = 18, 70
    size = margin + n * cell + 10
    finite = grid[np.isfinite(grid)]
    vmax = float(np.abs(finite).max()) if finite.size else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20}" '
             f'font-family="sans-serif" font-size="9">']
    if title:
        parts.append(f'<text x="{margin}" y="14" font-size="12">{_esc(title)}</text>')
    top = margin
    for i in range(n):
        for j in range(grid.shape[1]):
            v = grid[i, j]
            if not np.isfinite(v):
                continue
            parts.append(f'<rect x="{margin + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_diverging(float(v), vmax)}"><title>{_fmt(float(v))}</title></rect>')
    for k, lab in enumerate(labels):
        parts.append(f'<text x="{margin - 4}" y="{top + k * cell + cell * 0.7}" text-anchor="end">{_esc(lab)}</text>')
        cx, cy = margin + k * cell + cell * 0.6, top - 4
        parts.append(f'<text x="{cx}" y="{cy}" transform="rotate(-60 {cx} {cy})">{_esc(lab)}</text>')
    parts.append(f'<text x="{margin}" y="{size + 14}">scale: |max| = {_fmt(vmax)} (blue negative, red positive)</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path


def exercise_labels(concepts, responses) -> list[str]:
    """``concept(response)`` labels, e.g. 59(1) for a correct answer on concept 59."""
    return [f"{c}({int(r)})" for c, r in zip(concepts, responses)]


def write_exercise_table(weights: ExerciseWeights, labels: list[str], path, k: int = 5) -> Path:
    path = Path(path)
    lines = ["rank,step,label,beta,gamma"]
    for rank, (j, g) in enumerate(weights.top_k(k), start=1):
        lines.append(f"{rank},{j},{labels[j]},{_fmt(weights.beta[j])},{_fmt(g)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_exercise_svg(weights: ExerciseWeights, labels: list[str], path) -> Path:
    return write_heatmap_svg_row(weights.gamma, labels[: weights.target], path,
                                 title=f"influence on step {weights.target} ({labels[weights.target]})")


def write_heatmap_svg_row(values: np.ndarray, labels: list[str], path, title: str = "") -> Path:
    path = Path(path)
    cell, margin = 22, 40
    width = margin + len(values) * cell + 20
    vmax = float(np.abs(values).max()) if len(values) else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{margin + cell + 60}" '
             f'font-family="sans-serif" font-size="9">']
    if title:
        parts.append(f'<text x="4" y="14" font-size="12">{_esc(title)}</text>')
    for j, v in enumerate(values):
        x = margin + j * cell
        parts.append(f'<rect x="{x}" y="{margin}" width="{cell}" height="{cell}" '
                     f'fill="{_diverging(float(v), vmax)}"><title>{_fmt(float(v))}</title></rect>')
        cx, cy = x + cell * 0.5, margin + cell + 10
        parts.append(f'<text x="{cx}" y="{cy}" transform="rotate(60 {cx} {cy})">{_esc(labels[j])}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path


def layer_trace(model, q, c, r, layer: int = -1) -> dict:
    """Run one sequence through ``model`` and return the S6 trace of ``layer``."""
    from . import tensor as T

    trace: list = []
    q, c, r = (np.asarray(a)[None, :] for a in (q, c, r))
    with T.no_grad():
        model.forward(q, c, r, trace=trace)
    if not trace:
        raise TraceError("model produced no S6 trace (attention models have none)")
    step = trace[layer]
    return {k: (v[0] if k != "D" else v) for k, v in step.items()}

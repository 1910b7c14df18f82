"""Mini-batch Adam training with early stopping and run-directory persistence."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import iterate_batches
from .metrics import fmt_metric, masked_metrics
from .model import KTModel, ModelConfig, build_model, parse_config_text
from .nn import split_rng
from .optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.manifest"
METRICS_LOG = "metrics.log"
TIMING_LOG = "timing.log"
CONFIG = "config.txt"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    clip_norm: float = 5.0


@dataclass
class TrainResult:
    model: KTModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_auc: float | None = None


def evaluate(model: KTModel, sequences, batch_size: int = 64) -> dict:
    preds, labels, masks = [], [], []
    for batch in iterate_batches(sequences, batch_size):
        p = model.predict(batch.questions, batch.concepts, batch.responses)
        preds.append(p[batch.mask])
        labels.append(batch.responses[batch.mask])
    if not preds:
        return {"auc": None, "acc": None, "n": 0}
    p, y = np.concatenate(preds), np.concatenate(labels)
    return masked_metrics(p, y, np.ones_like(y, dtype=bool))


def _metrics_line(epoch, train_loss, metrics) -> str:
    return (f"epoch={epoch} train_loss={train_loss:.6f} "
            f"val_auc={fmt_metric(metrics['auc'])} val_acc={fmt_metric(metrics['acc'])}\n")


def _better(new, best) -> bool:
    return new is not None and (best is None or new > best)


def train(train_seqs, val_seqs, model_config: ModelConfig, config: TrainConfig | None = None,
          out_dir=None) -> TrainResult:
    """Fit a model; with ``out_dir`` the best checkpoint and logs are written there.

    Stops once neither the best validation AUC nor the best ACC has improved
    for ``patience`` consecutive epochs.
    """
    config = config or TrainConfig()
    if not train_seqs:
        raise ValueError("training set is empty")
    init_rng, data_rng = split_rng(config.seed, 2)
    model = build_model(model_config, seed=int(init_rng.integers(2**31)))
    params = dict(model.named_parameters())
    trainable = [n for n, p in params.items() if p.requires_grad]
    opt = Adam([params[n] for n in trainable], lr=config.lr, names=trainable)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG).write_text(model_config.to_text() + "".join(
            f"train.{k} = {v}\n" for k, v in asdict(config).items()))
        (out / METRICS_LOG).write_text("")
        (out / TIMING_LOG).write_text("")
        save_checkpoint(model.state_dict(), out / CHECKPOINT)

    result = TrainResult(model)
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    best_acc = None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for batch in iterate_batches(train_seqs, config.batch_size, data_rng):
            with T.recording():
                p = model(batch.questions, batch.concepts, batch.responses)
                loss = model.loss(p, batch.responses, batch.mask)
                T.backward(loss)
            clip_grad_norm(opt.params, config.clip_norm)
            opt.step()
            opt.zero_grad()
            total += float(loss.data)
            count += int(batch.mask.sum())
        train_loss = total / max(count, 1)
        metrics = evaluate(model, val_seqs, config.batch_size)
        wall = time.perf_counter() - t0
        result.history.append({"epoch": epoch, "train_loss": train_loss, **metrics, "wall_seconds": wall})
        log.info("epoch %d loss %.4f val_auc %s val_acc %s (%.1fs)", epoch, train_loss,
                 fmt_metric(metrics["auc"]), fmt_metric(metrics["acc"]), wall)

        improved = False
        if _better(metrics["auc"], result.best_auc) or (result.best_auc is None and epoch == 1):
            result.best_auc = metrics["auc"]
            result.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
            improved = True
            if out is not None:
                save_checkpoint(best_state, out / CHECKPOINT)
        if _better(metrics["acc"], best_acc):
            best_acc = metrics["acc"]
            improved = True
        if out is not None:
            with open(out / METRICS_LOG, "a") as fh:
                fh.write(_metrics_line(epoch, train_loss, metrics))
            with open(out / TIMING_LOG, "a") as fh:
                fh.write(f"epoch={epoch} wall_seconds={wall:.3f}\n")
        stale = 0 if improved else stale + 1
        if stale >= config.patience:
            break

    model.load_state_dict(best_state)
    return result


def load_run(run_dir) -> tuple[KTModel, ModelConfig, TrainConfig]:
    run_dir = Path(run_dir)
    text = (run_dir / CONFIG).read_text()
    model_lines = [l for l in text.splitlines() if not l.startswith("train.")]
    train_lines = [l[len("train."):] for l in text.splitlines() if l.startswith("train.")]
    mcfg = ModelConfig(**parse_config_text("\n".join(model_lines), ModelConfig))
    tcfg = TrainConfig(**parse_config_text("\n".join(train_lines), TrainConfig))
    model = build_model(mcfg)
    model.load_state_dict(load_checkpoint(run_dir / CHECKPOINT))
    return model, mcfg, tcfg

"""Losses and the two-step multi-task training loop.

Per batch, every shortcut head takes a step on its own cross-entropy, then the
robust branch (with the shared stack and embeddings) takes a step on the loss
of the fused scores ``A_i = sum_n p_r[i] * p_s_n[i]``. The shortcut branches
read detached shared features, so their losses never reach the shared stack.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .data import Dataset, McqaInstance, derive_rng
from .model import (Batch, ModelConfig, branch_logits, branch_names, encode, head, make_batch,
                    shared_names)

logger = logging.getLogger(__name__)

LOSS_VARIANTS = ("e", "e1", "e2")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, params: dict[str, np.ndarray], epoch: int):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.1
    loss_variant: str = "e"
    detach_shortcut: bool = True
    seed: int = 0
    optimizer: str = "sgd"
    augment: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size > 0 and learning_rate > 0 required")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    robust: float
    shortcut: list[float]
    weights: list[float]
    total: float


# ---------------------------------------------------------------------------
# probability-level losses


def fuse(p_r, p_s: Sequence) -> dm.Tensor:
    """Adjusted scores ``A = sum_n p_r * p_s_n`` (not normalised)."""
    p_r = dm.as_tensor(p_r)
    if not p_s:
        raise ValueError("fuse needs at least one shortcut distribution")
    total = None
    for q in p_s:
        q = dm.as_tensor(q)
        if q.shape != p_r.shape:
            raise dm.ShapeError(f"fuse: {p_r.shape} vs {q.shape}")
        term = dm.mul(p_r, q)
        total = term if total is None else dm.add(total, term)
    return total


def _batched(x) -> dm.Tensor:
    x = dm.as_tensor(x)
    return x if x.value.ndim == 2 else dm.reshape(x, (1, -1))


def mean_ce(scores, gold) -> dm.Tensor:
    """Mean over rows of ``-log softmax(scores)[gold]``."""
    return dm.mean_all(dm.cross_entropy(dm.softmax(_batched(scores)), np.atleast_1d(gold)))


def shortcut_weights(shortcut_losses: Sequence[float]) -> np.ndarray:
    """``w_n = softmax(L^s)_n``; used as constants."""
    return dm.softmax(np.asarray(shortcut_losses, dtype=float)).value


def loss_e_from_probs(p_r, p_s: Sequence, gold) -> dm.Tensor:
    return mean_ce(fuse(p_r, p_s), gold)


def loss_e1_from_probs(p_r, p_s: Sequence, gold) -> dm.Tensor:
    total = None
    for q in p_s:
        term = mean_ce(dm.mul(dm.as_tensor(p_r), dm.as_tensor(q)), gold)
        total = term if total is None else dm.add(total, term)
    return total


def loss_e2_from_probs(p_r, p_s: Sequence, gold, weights: Sequence[float]) -> dm.Tensor:
    if len(weights) != len(p_s):
        raise ValueError("one weight per shortcut branch")
    total = None
    for q, w in zip(p_s, weights):
        term = dm.scale(mean_ce(dm.mul(dm.as_tensor(p_r), dm.as_tensor(q)), gold), float(w))
        total = term if total is None else dm.add(total, term)
    return total


def robust_loss_from_probs(variant: str, p_r, p_s: Sequence, gold, weights=None) -> dm.Tensor:
    if variant == "e":
        return loss_e_from_probs(p_r, p_s, gold)
    if variant == "e1":
        return loss_e1_from_probs(p_r, p_s, gold)
    if variant == "e2":
        if weights is None:
            raise ValueError("L^e2 needs the shortcut weights")
        return loss_e2_from_probs(p_r, p_s, gold, weights)
    raise ValueError(f"unknown loss variant {variant!r}")


def loss_e_expansion(p_r: np.ndarray, p_s: Sequence[np.ndarray], gold) -> float:
    """Closed form ``log sum_i exp(A_i) - A_gold`` of the fused loss, batch mean."""
    p_r = np.atleast_2d(p_r)
    A = sum(p_r * np.atleast_2d(q) for q in p_s)
    gold = np.atleast_1d(gold)
    return float(np.mean(dm.log_sum_exp(A) - A[np.arange(len(gold)), gold]))


def loss_e1_expansion(p_r: np.ndarray, p_s: Sequence[np.ndarray], gold) -> float:
    """``sum_n log sum_i exp(p_r p_s_n) - sum_n p_r[gold] p_s_n[gold]``, batch mean."""
    p_r = np.atleast_2d(p_r)
    gold = np.atleast_1d(gold)
    rows = np.arange(len(gold))
    lse = sum(dm.log_sum_exp(p_r * np.atleast_2d(q)) for q in p_s)
    picked = sum((p_r * np.atleast_2d(q))[rows, gold] for q in p_s)
    return float(np.mean(lse - picked))


# ---------------------------------------------------------------------------
# model-level losses


def shortcut_logits(params, cfg: ModelConfig, batch: Batch, n: int) -> dm.Tensor:
    """Branch ``n`` logits computed on detached shared features."""
    feats = dm.detach(encode(params, cfg, batch.view(cfg.views[n])))
    return head(params, cfg, n, feats, batch.K)


def loss_shortcut(n: int, batch: Batch, params, cfg: ModelConfig) -> dm.Tensor:
    if n < 1 or n > cfg.n_shortcut:
        raise ValueError(f"shortcut branch index must be in 1..{cfg.n_shortcut}")
    return mean_ce(shortcut_logits(params, cfg, batch, n), batch.answer)


def _shortcut_probs(params, cfg: ModelConfig, batch: Batch, detach: bool) -> list[dm.Tensor]:
    out = []
    for n in range(1, cfg.n_shortcut + 1):
        p = dm.softmax(shortcut_logits(params, cfg, batch, n))
        out.append(dm.detach(p) if detach else p)
    return out


def robust_loss(batch: Batch, params, cfg: ModelConfig, variant: str = "e", detach: bool = True
                ) -> tuple[dm.Tensor, list[float], list[float]]:
    """Robust-branch loss plus the shortcut losses and weights it used."""
    if cfg.n_shortcut < 1:
        raise ValueError("the fused loss needs at least one shortcut branch")
    p_r = dm.softmax(branch_logits(params, cfg, batch, 0))
    p_s = _shortcut_probs(params, cfg, batch, detach)
    rows = np.arange(len(batch))
    ls = [float(np.mean(-np.log(np.maximum(q.value[rows, batch.answer], dm.PROB_FLOOR)))) for q in p_s]
    w = list(shortcut_weights(ls))
    return robust_loss_from_probs(variant, p_r, p_s, batch.answer, w), ls, w


def loss_e(batch: Batch, params, cfg: ModelConfig, detach: bool = True) -> dm.Tensor:
    return robust_loss(batch, params, cfg, "e", detach)[0]


def loss_e1(batch: Batch, params, cfg: ModelConfig, detach: bool = True) -> dm.Tensor:
    return robust_loss(batch, params, cfg, "e1", detach)[0]


def loss_e2(batch: Batch, params, cfg: ModelConfig, detach: bool = True) -> dm.Tensor:
    return robust_loss(batch, params, cfg, "e2", detach)[0]


def loss_all(batch: Batch, params, cfg: ModelConfig, variant: str = "e") -> LossBreakdown:
    robust, _, w = robust_loss(batch, params, cfg, variant)
    ls = [loss_shortcut(n, batch, params, cfg).item() for n in range(1, cfg.n_shortcut + 1)]
    return LossBreakdown(robust.item(), ls, w, robust.item() + sum(ls))


def loss_ct(batch: Batch, params, cfg: ModelConfig) -> dm.Tensor:
    return mean_ce(branch_logits(params, cfg, batch, 0), batch.answer)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    loss_all: float
    robust: float
    shortcut: list[float]
    weights: list[float]
    train_acc: float
    dev_acc: float | None


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    incidents: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        n = max((len(r.shortcut) for r in self.records), default=0)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss_all", "robust"] + [f"ls_{i + 1}" for i in range(n)]
                        + [f"w_{i + 1}" for i in range(n)] + ["train_acc", "dev_acc"])
        for r in self.records:
            writer.writerow([r.epoch, f"{r.loss_all:.10g}", f"{r.robust:.10g}"]
                            + [f"{v:.10g}" for v in r.shortcut] + [f"{v:.10g}" for v in r.weights]
                            + [f"{r.train_acc:.6f}", "" if r.dev_acc is None else f"{r.dev_acc:.6f}"])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


class _Updater:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.adam = dm.Adam(cfg.learning_rate) if cfg.optimizer == "adam" else None

    def __call__(self, params, grads, incidents):
        if self.adam is not None:
            return self.adam.step(params, grads, incidents)
        return dm.param_step(params, grads, self.cfg.learning_rate, incidents)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = derive_rng(seed, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict_robust(params, cfg: ModelConfig, instances: Sequence[McqaInstance], chunk: int = 512) -> np.ndarray:
    """Robust-branch probabilities for a list of instances: (n, K)."""
    out = []
    for s in range(0, len(instances), chunk):
        out.append(dm.softmax(branch_logits(params, cfg, make_batch(instances[s:s + chunk]), 0)).value)
    return np.concatenate(out) if out else np.zeros((0, cfg.K))


def accuracy(params, cfg: ModelConfig, instances: Sequence[McqaInstance]) -> float:
    if not instances:
        return float("nan")
    probs = predict_robust(params, cfg, instances)
    return float(np.mean(probs.argmax(axis=1) == np.array([i.answer for i in instances])))


def _check(value: float, params, epoch: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch}", {k: v.copy() for k, v in params.items()}, epoch)


def train(params: dict[str, np.ndarray], cfg: ModelConfig, train_set: Sequence[McqaInstance],
          tcfg: TrainConfig, dev_set: Sequence[McqaInstance] | None = None
          ) -> tuple[dict[str, np.ndarray], History]:
    """Multi-task training: shortcut heads first, then the robust step, per batch."""
    tcfg.validate()
    if cfg.n_shortcut < 1:
        raise ValueError("multi-task training needs at least one shortcut branch; use train_baseline_ct")
    instances = list(train_set)
    params = {k: v.copy() for k, v in params.items()}
    history = History()
    update = _Updater(tcfg)
    robust_names = shared_names(cfg) + branch_names(cfg, 0)
    if not tcfg.detach_shortcut:
        for n in range(1, cfg.n_shortcut + 1):
            robust_names += branch_names(cfg, n)
    for epoch in range(tcfg.epochs):
        sums = np.zeros(2 + 2 * cfg.n_shortcut)
        count = 0
        for idx in _batches(len(instances), tcfg.batch_size, tcfg.seed, epoch):
            batch = make_batch([instances[i] for i in idx])
            ls_vals = []
            for n in range(1, cfg.n_shortcut + 1):
                val, grads, _ = dm.value_and_grads(lambda p: loss_shortcut(n, batch, p, cfg), params,
                                                   branch_names(cfg, n))
                _check(val, params, epoch)
                params = update(params, grads, history.incidents)
                ls_vals.append(val)
            holder = {}

            def objective(p):
                loss, _, w = robust_loss(batch, p, cfg, tcfg.loss_variant, tcfg.detach_shortcut)
                holder["w"] = w
                return loss

            val, grads, _ = dm.value_and_grads(objective, params, robust_names)
            _check(val, params, epoch)
            params = update(params, grads, history.incidents)
            sums += np.array([val + sum(ls_vals), val] + ls_vals + list(holder["w"])) * len(idx)
            count += len(idx)
        m = sums / max(count, 1)
        N = cfg.n_shortcut
        history.records.append(EpochRecord(
            epoch + 1, float(m[0]), float(m[1]), [float(x) for x in m[2:2 + N]],
            [float(x) for x in m[2 + N:]], accuracy(params, cfg, instances),
            accuracy(params, cfg, list(dev_set)) if dev_set else None,
        ))
        logger.info("epoch %d loss_all=%.4f train_acc=%.3f", epoch + 1, m[0], history.records[-1].train_acc)
    return params, history


def train_baseline_ct(params: dict[str, np.ndarray], cfg: ModelConfig, train_set: Sequence[McqaInstance],
                      tcfg: TrainConfig, dev_set: Sequence[McqaInstance] | None = None
                      ) -> tuple[dict[str, np.ndarray], History]:
    """Conventional single-branch cross-entropy training of branch 0."""
    tcfg.validate()
    instances = list(train_set)
    params = {k: v.copy() for k, v in params.items()}
    history = History()
    update = _Updater(tcfg)
    names = shared_names(cfg) + branch_names(cfg, 0)
    for epoch in range(tcfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(instances), tcfg.batch_size, tcfg.seed, epoch):
            batch = make_batch([instances[i] for i in idx])
            val, grads, _ = dm.value_and_grads(lambda p: loss_ct(batch, p, cfg), params, names)
            _check(val, params, epoch)
            params = update(params, grads, history.incidents)
            total += val * len(idx)
            count += len(idx)
        mean = total / max(count, 1)
        history.records.append(EpochRecord(
            epoch + 1, mean, mean, [], [], accuracy(params, cfg, instances),
            accuracy(params, cfg, list(dev_set)) if dev_set else None,
        ))
    return params, history


def merge_datasets(datasets: Sequence[Dataset]) -> list[McqaInstance]:
    return [inst for ds in datasets for inst in ds.instances]

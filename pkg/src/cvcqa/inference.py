"""Counterfactual decision rules and the c-adaptor.

Two rules are provided on top of a trained multi-branch model:

* input-variable control, ``sum_n p_r * c_s - sum_n c_r * c_s`` with constant
  ``c`` vectors, which ranks options exactly as the robust branch does;
* mediator control, ``sum_n (p_r - c_r_n) * p_s_n``, where ``c_r_n`` is either
  a constant, a distance between the two distributions, or the output of a
  small learned adaptor.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .data import McqaInstance, derive_rng
from .model import ModelConfig, branch_logits, make_batch, muted_logits

logger = logging.getLogger(__name__)

C_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
ADAPTOR_MODES = ("full", "no_distance", "no_probs")


class Method(str, Enum):
    CT = "CT"
    CVC_IV = "CVC_IV"
    CVC_MV_CONST = "CVC_MV_const"
    CVC_MV_ADAPTOR = "CVC_MV_adaptor"
    CVC_MV_JS = "CVC_MV_js"
    CVC_MV_EUC = "CVC_MV_euc"


@dataclass
class InferenceMethod:
    kind: Method = Method.CVC_IV
    c_s: float = 0.5
    c_r: float = 0.5

    def __post_init__(self) -> None:
        self.kind = Method(self.kind)
        check_constant(self.c_s, "c_s")
        check_constant(self.c_r, "c_r")

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def needs_shortcut(self) -> bool:
        return self.kind not in (Method.CT, Method.CVC_IV)


def check_constant(c, name: str = "c") -> None:
    arr = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {c!r}")


def _per_branch(c, n: int, name: str) -> list[np.ndarray]:
    """A list or tuple gives one value per branch; anything else is shared."""
    items = list(c) if isinstance(c, (list, tuple)) else [c] * n
    if len(items) != n:
        raise ValueError(f"{name}: expected {n} per-branch values, got {len(items)}")
    for item in items:
        check_constant(item, name)
    return [np.asarray(item, dtype=float) for item in items]


# ---------------------------------------------------------------------------
# decision rules on probability arrays


def fused_scores(p_r: np.ndarray, p_s: Sequence[np.ndarray]) -> np.ndarray:
    p_r = np.asarray(p_r, dtype=float)
    return sum(p_r * np.asarray(q, dtype=float) for q in p_s)


def cvc_iv_scores(p_r: np.ndarray, c_s=0.5, c_r=0.5, n_branches: int = 1) -> np.ndarray:
    """``sum_n p_r * c_s_n - sum_n c_r_n * c_s_n`` for constants in [0, 1]."""
    p_r = np.asarray(p_r, dtype=float)
    cs = _per_branch(c_s, n_branches, "c_s")
    cr = _per_branch(c_r, n_branches, "c_r")
    return sum(p_r * s for s in cs) - sum(r * s for r, s in zip(cr, cs)) + np.zeros_like(p_r)


def cvc_mv_scores(p_r: np.ndarray, p_s: Sequence[np.ndarray], c_r) -> np.ndarray:
    """``sum_n (p_r - c_r_n) * p_s_n``; ``c_r`` is a scalar, a K-vector or a row array per branch."""
    p_r = np.asarray(p_r, dtype=float)
    cr = _per_branch(c_r, len(p_s), "c_r")
    return sum((p_r - c) * np.asarray(q, dtype=float) for c, q in zip(cr, p_s))


def js_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return dm.js_divergence(np.atleast_2d(p), np.atleast_2d(q)).value.reshape(-1)


def c_variants(p_r: np.ndarray, p_s: np.ndarray, variant: str) -> np.ndarray:
    """Distance-based subtraction constant broadcast to every class."""
    p_r, p_s = np.atleast_2d(p_r), np.atleast_2d(p_s)
    if p_r.shape != p_s.shape:
        raise dm.ShapeError(f"{p_r.shape} vs {p_s.shape}")
    if variant == "js":
        d = js_rows(p_r, p_s)
    elif variant == "euc":
        d = np.sum((p_r - p_s) ** 2, axis=1) / 2.0
    else:
        raise ValueError(f"unknown c variant {variant!r}; expected 'js' or 'euc'")
    return np.repeat(d[:, None], p_r.shape[1], axis=1)


def decide(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(np.atleast_2d(scores), axis=1)


# ---------------------------------------------------------------------------
# model predictions


@dataclass
class Predictions:
    p_r: np.ndarray
    p_s: list[np.ndarray]
    gold: np.ndarray

    @property
    def fused(self) -> np.ndarray:
        return fused_scores(self.p_r, self.p_s)

    def __len__(self) -> int:
        return len(self.gold)


def predict_np(params, cfg: ModelConfig, instances: Sequence[McqaInstance] | McqaInstance,
               chunk: int = 512) -> Predictions:
    """Robust and shortcut probabilities under each branch's own view."""
    if isinstance(instances, McqaInstance):
        instances = [instances]
    frames = [[] for _ in range(cfg.n_shortcut + 1)]
    for s in range(0, len(instances), chunk):
        batch = make_batch(instances[s:s + chunk])
        for n in range(cfg.n_shortcut + 1):
            frames[n].append(dm.softmax(branch_logits(params, cfg, batch, n)).value)
    probs = [np.concatenate(f) if f else np.zeros((0, cfg.K)) for f in frames]
    gold = np.array([i.answer for i in instances], dtype=np.int64)
    return Predictions(probs[0], probs[1:], gold)


def predict_all_muted(params, cfg: ModelConfig, instances: Sequence[McqaInstance] | McqaInstance
                      ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Every branch on the all-null probe: ``(a_r*, [a_s*_n])`` as probabilities."""
    if isinstance(instances, McqaInstance):
        instances = [instances]
    batch = make_batch(list(instances))
    out = [dm.softmax(muted_logits(params, cfg, batch, n)).value for n in range(cfg.n_shortcut + 1)]
    return out[0], out[1:]


# ---------------------------------------------------------------------------
# c-adaptor


@dataclass
class CAdaptorConfig:
    hidden: int = 16
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    optimizer: str = "adam"
    mode: str = "full"
    scalar_output: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ADAPTOR_MODES:
            raise ValueError(f"adaptor mode must be one of {ADAPTOR_MODES}")
        if self.hidden <= 0 or self.batch_size <= 0 or self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError("adaptor hyperparameters must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


@dataclass
class CAdaptorParams:
    K: int
    n_shortcut: int
    config: CAdaptorConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self, n: int) -> list[str]:
        return [f"c{n}.W1", f"c{n}.b1", f"c{n}.W2", f"c{n}.b2"]

    def to_json(self) -> dict:
        return {"K": self.K, "n_shortcut": self.n_shortcut, "config": asdict(self.config),
                "arrays": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                           for k, v in sorted(self.arrays.items())}}

    @classmethod
    def from_json(cls, obj: dict) -> "CAdaptorParams":
        arrays = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in obj["arrays"].items()}
        return cls(obj["K"], obj["n_shortcut"], CAdaptorConfig(**obj["config"]), arrays)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CAdaptorParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_adaptor(K: int, n_shortcut: int, acfg: CAdaptorConfig | None = None) -> CAdaptorParams:
    """Random first layer; zero output layer and biases, so ``c`` starts at 0.5."""
    acfg = acfg or CAdaptorConfig()
    acfg.validate()
    rng = derive_rng(acfg.seed, K, n_shortcut)
    width = 2 * K + 1
    out_dim = 1 if acfg.scalar_output else K
    arrays = {}
    for n in range(1, n_shortcut + 1):
        bound = 1.0 / np.sqrt(width)
        arrays[f"c{n}.W1"] = rng.uniform(-bound, bound, size=(acfg.hidden, width))
        arrays[f"c{n}.b1"] = np.zeros(acfg.hidden)
        arrays[f"c{n}.W2"] = np.zeros((out_dim, acfg.hidden))
        arrays[f"c{n}.b2"] = np.zeros(out_dim)
    return CAdaptorParams(K, n_shortcut, acfg, arrays)


def adaptor_inputs(p_r: np.ndarray, p_s: np.ndarray, mode: str = "full") -> np.ndarray:
    """Rows of ``[p_r ; p_s ; JS(p_r || p_s)]`` with ablated parts zeroed."""
    p_r, p_s = np.atleast_2d(p_r), np.atleast_2d(p_s)
    if p_r.shape != p_s.shape:
        raise dm.ShapeError(f"adaptor inputs {p_r.shape} vs {p_s.shape}")
    js = js_rows(p_r, p_s)[:, None]
    if mode == "no_distance":
        js = np.zeros_like(js)
    elif mode == "no_probs":
        p_r, p_s = np.zeros_like(p_r), np.zeros_like(p_s)
    elif mode != "full":
        raise ValueError(f"unknown adaptor mode {mode!r}")
    return np.concatenate([p_r, p_s, js], axis=1)


def _adaptor_graph(x: np.ndarray, arrays, n: int, K: int) -> dm.Tensor:
    h = dm.tanh_act(dm.affine(dm.Tensor(x), arrays[f"c{n}.W1"], arrays[f"c{n}.b1"]))
    c = dm.sigmoid(dm.affine(h, arrays[f"c{n}.W2"], arrays[f"c{n}.b2"]))
    if c.shape[1] == 1:
        c = dm.concat([c] * K)
    return c


def c_adaptor_forward(p_r: np.ndarray, p_s: np.ndarray, adaptor: CAdaptorParams, n: int = 1) -> np.ndarray:
    """``c_r_n`` rows in [0, 1]^K for the given distributions."""
    if not 1 <= n <= adaptor.n_shortcut:
        raise ValueError(f"adaptor has no branch {n}")
    x = adaptor_inputs(p_r, p_s, adaptor.config.mode)
    if x.shape[1] != 2 * adaptor.K + 1:
        raise dm.ShapeError(f"adaptor expects K={adaptor.K}")
    arrays = {k: dm.Tensor(v) for k, v in adaptor.arrays.items()}
    return _adaptor_graph(x, arrays, n, adaptor.K).value


def _adaptor_loss(arrays, xs: list[np.ndarray], p_r: np.ndarray, p_s: list[np.ndarray], gold: np.ndarray,
                  K: int) -> dm.Tensor:
    p_r_t = dm.Tensor(p_r)
    scores = None
    for n, (x, q) in enumerate(zip(xs, p_s), start=1):
        c = _adaptor_graph(x, arrays, n, K)
        term = dm.mul(dm.sub(p_r_t, c), dm.Tensor(q))
        scores = term if scores is None else dm.add(scores, term)
    return dm.mean_all(dm.cross_entropy(dm.softmax(scores), gold))


def train_c_adaptor(preds: Predictions, acfg: CAdaptorConfig | None = None,
                    adaptor: CAdaptorParams | None = None) -> tuple[CAdaptorParams, list[float]]:
    """Fit the adaptor on frozen-model predictions with cross-entropy on the mediator scores.

    Only adaptor weights are updated; the model enters through fixed
    probabilities, so its parameters cannot change.
    """
    acfg = acfg or (adaptor.config if adaptor else CAdaptorConfig())
    acfg.validate()
    K = preds.p_r.shape[1]
    N = len(preds.p_s)
    if N < 1:
        raise ValueError("the adaptor needs a model with at least one shortcut branch")
    adaptor = adaptor or init_adaptor(K, N, acfg)
    arrays = {k: v.copy() for k, v in adaptor.arrays.items()}
    xs_all = [adaptor_inputs(preds.p_r, q, acfg.mode) for q in preds.p_s]
    opt = dm.Adam(acfg.learning_rate) if acfg.optimizer == "adam" else None
    losses = []
    incidents: list[str] = []
    for epoch in range(acfg.epochs):
        order = derive_rng(acfg.seed, 7919, epoch).permutation(len(preds))
        total = 0.0
        for s in range(0, len(order), acfg.batch_size):
            idx = order[s:s + acfg.batch_size]
            val, grads, _ = dm.value_and_grads(
                lambda a: _adaptor_loss(a, [x[idx] for x in xs_all], preds.p_r[idx],
                                        [q[idx] for q in preds.p_s], preds.gold[idx], K),
                arrays)
            if not np.isfinite(val):
                raise FloatingPointError(f"non-finite adaptor loss at epoch {epoch}")
            arrays = opt.step(arrays, grads, incidents) if opt else dm.param_step(
                arrays, grads, acfg.learning_rate, incidents)
            total += val * len(idx)
        losses.append(total / max(len(order), 1))
    return CAdaptorParams(K, N, acfg, arrays), losses


# ---------------------------------------------------------------------------
# evaluation


def method_scores(preds: Predictions, method: InferenceMethod, adaptor: CAdaptorParams | None = None
                  ) -> np.ndarray:
    """Decision scores of ``method`` for every instance in ``preds``."""
    kind = method.kind
    N = len(preds.p_s)
    if method.needs_shortcut and N < 1:
        raise ValueError(f"{method.name} needs a model with shortcut branches")
    if kind == Method.CT:
        return preds.p_r.copy()
    if kind == Method.CVC_IV:
        return cvc_iv_scores(preds.p_r, method.c_s, method.c_r, max(N, 1))
    if kind == Method.CVC_MV_CONST:
        return cvc_mv_scores(preds.p_r, preds.p_s, method.c_r)
    if kind == Method.CVC_MV_ADAPTOR:
        if adaptor is None:
            raise ValueError("CVC_MV_adaptor needs a trained adaptor")
        if adaptor.n_shortcut != N or adaptor.K != preds.p_r.shape[1]:
            raise ValueError("adaptor shape does not match the model")
        cs = [c_adaptor_forward(preds.p_r, q, adaptor, n) for n, q in enumerate(preds.p_s, start=1)]
        return sum((preds.p_r - c) * q for c, q in zip(cs, preds.p_s))
    if kind in (Method.CVC_MV_JS, Method.CVC_MV_EUC):
        variant = "js" if kind == Method.CVC_MV_JS else "euc"
        return sum((preds.p_r - c_variants(preds.p_r, q, variant)) * q for q in preds.p_s)
    raise ValueError(f"unsupported method {kind}")


@dataclass
class EvalResult:
    method: str
    accuracy: float
    records: list[dict]

    @property
    def n(self) -> int:
        return len(self.records)


def evaluate_predictions(preds: Predictions, instances: Sequence[McqaInstance], method: InferenceMethod,
                         adaptor: CAdaptorParams | None = None) -> EvalResult:
    scores = method_scores(preds, method, adaptor)
    pred = decide(scores) if len(preds) else np.zeros(0, dtype=int)
    records = [
        {"index": i, "method": method.name, "scores": [float(v) for v in scores[i]], "prediction": int(pred[i]),
         "gold": int(preds.gold[i]), "shortcut_flag": bool(inst.shortcut_flag), "provenance": inst.provenance}
        for i, inst in enumerate(instances)
    ]
    acc = float(np.mean(pred == preds.gold)) if len(preds) else float("nan")
    return EvalResult(method.name, acc, records)


def evaluate(params, cfg: ModelConfig, instances: Sequence[McqaInstance], method: InferenceMethod,
             adaptor: CAdaptorParams | None = None) -> EvalResult:
    if method.needs_shortcut and cfg.n_shortcut < 1:
        raise ValueError(f"{method.name} needs a model with shortcut branches")
    instances = list(instances)
    return evaluate_predictions(predict_np(params, cfg, instances), instances, method, adaptor)


def tune_c_r(preds: Predictions, grid: Sequence[float] = C_GRID) -> tuple[float, dict[float, float]]:
    """Grid point with the best mediator-control accuracy; earliest grid point wins ties."""
    table = {}
    for c in grid:
        scores = cvc_mv_scores(preds.p_r, preds.p_s, c)
        table[float(c)] = float(np.mean(decide(scores) == preds.gold))
    best = max(table, key=lambda c: (table[c], -list(table).index(c)))
    return best, table


def write_predictions(result: EvalResult, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

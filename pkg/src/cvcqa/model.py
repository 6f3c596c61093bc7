"""Multi-branch option scorer with a shared bottom stack.

Each option is scored from ``[mean(P); mean(Q); mean(option_k)]`` pushed
through the shared affine/tanh stack, then through one branch's top layers
and a scalar classifier. Branch 0 is the robust branch and always sees the
full input; branches ``1..N`` see their own muted view.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .data import FULL, NULL, NO_Q, McqaInstance, VariableView

CHECKPOINT_FORMAT = "cvcqa-checkpoint"


@dataclass
class ModelConfig:
    vocab_size: int = 600
    K: int = 4
    embed_dim: int = 32
    n_layers: int = 6
    n_shared: int | None = None
    hidden: int = 64
    shortcut_views: list[VariableView] = field(default_factory=lambda: [NO_Q])
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_shared is None:
            self.n_shared = min(round(5 * self.n_layers / 6), self.n_layers - 1)
        self.shortcut_views = [VariableView.parse(v) if isinstance(v, str) else v for v in self.shortcut_views]

    @property
    def n_shortcut(self) -> int:
        return len(self.shortcut_views)

    @property
    def views(self) -> list[VariableView]:
        return [FULL] + list(self.shortcut_views)

    def validate(self) -> None:
        if not 0 <= self.n_shared < self.n_layers:
            raise ValueError(f"need 0 <= n_shared < n_layers, got {self.n_shared} / {self.n_layers}")
        for v in self.shortcut_views:
            if not v.o:
                raise ValueError("shortcut views must keep the options visible")
            if v == FULL:
                raise ValueError("a shortcut view must hide at least one variable")
        if min(self.embed_dim, self.hidden, self.K, self.vocab_size) <= 0:
            raise ValueError("dimensions must be positive")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "K": self.K, "embed_dim": self.embed_dim,
            "n_layers": self.n_layers, "n_shared": self.n_shared, "hidden": self.hidden,
            "shortcut_views": [v.name for v in self.shortcut_views], "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class BranchOutput:
    branch: int
    logits: np.ndarray
    probs: np.ndarray


def shared_names(cfg: ModelConfig) -> list[str]:
    names = ["emb"]
    for layer in range(cfg.n_shared):
        names += [f"shared.{layer}.W", f"shared.{layer}.b"]
    return names


def branch_names(cfg: ModelConfig, n: int) -> list[str]:
    names = []
    for layer in range(cfg.n_layers - cfg.n_shared):
        names += [f"branch{n}.{layer}.W", f"branch{n}.{layer}.b"]
    return names + [f"branch{n}.cls.W", f"branch{n}.cls.b"]


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero NULL embedding."""
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(cfg.seed if seed is None else seed))

    def uni(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {}
    emb = uni((cfg.vocab_size, cfg.embed_dim), cfg.embed_dim)
    emb[NULL] = 0.0
    params["emb"] = emb
    width = 3 * cfg.embed_dim
    for layer in range(cfg.n_shared):
        params[f"shared.{layer}.W"] = uni((cfg.hidden, width), width)
        params[f"shared.{layer}.b"] = np.zeros(cfg.hidden)
        width = cfg.hidden
    for n in range(cfg.n_shortcut + 1):
        w = width
        for layer in range(cfg.n_layers - cfg.n_shared):
            params[f"branch{n}.{layer}.W"] = uni((cfg.hidden, w), w)
            params[f"branch{n}.{layer}.b"] = np.zeros(cfg.hidden)
            w = cfg.hidden
        params[f"branch{n}.cls.W"] = uni((1, w), w)
        params[f"branch{n}.cls.b"] = np.zeros(1)
    return params


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded token matrices for a list of instances (options flattened)."""

    passage: np.ndarray
    passage_len: np.ndarray
    question: np.ndarray
    question_len: np.ndarray
    options: np.ndarray
    option_len: np.ndarray
    answer: np.ndarray
    K: int

    def __len__(self) -> int:
        return len(self.answer)

    def view(self, view: VariableView) -> "Batch":
        """Muted copy: hidden segments become NULL, lengths are kept."""
        if not view.o:
            raise ValueError("options are mandatory and cannot be muted")
        return Batch(
            self.passage if view.p else np.zeros_like(self.passage), self.passage_len,
            self.question if view.q else np.zeros_like(self.question), self.question_len,
            self.options, self.option_len, self.answer, self.K,
        )

    def null_probe(self) -> "Batch":
        return Batch(
            np.zeros_like(self.passage), self.passage_len, np.zeros_like(self.question), self.question_len,
            np.zeros_like(self.options), self.option_len, self.answer, self.K,
        )


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.zeros((len(seqs), max(int(lens.max()), 1) if len(seqs) else 1), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lens


def make_batch(instances: Sequence[McqaInstance]) -> Batch:
    if not instances:
        raise ValueError("empty batch")
    K = instances[0].K
    if any(i.K != K for i in instances):
        raise ValueError("all instances in a batch need the same number of options")
    P, Pl = _pad([i.passage for i in instances])
    Q, Ql = _pad([i.question for i in instances])
    O, Ol = _pad([o for i in instances for o in i.options])
    ans = np.array([i.answer for i in instances], dtype=np.int64)
    return Batch(P, Pl, Q, Ql, O, Ol, ans, K)


# ---------------------------------------------------------------------------
# forward


def _p(params, name):
    return params[name] if isinstance(params[name], dm.Tensor) else dm.Tensor(params[name])


def encode(params, cfg: ModelConfig, batch: Batch) -> dm.Tensor:
    """Shared-stack features for every (instance, option) pair: (B*K, hidden)."""
    emb = _p(params, "emb")
    K = batch.K
    p_mean = dm.embed_mean(emb, batch.passage, np.maximum(batch.passage_len, 1))
    q_mean = dm.embed_mean(emb, batch.question, np.maximum(batch.question_len, 1))
    o_mean = dm.embed_mean(emb, batch.options, np.maximum(batch.option_len, 1))
    h = dm.concat([dm.repeat_rows(p_mean, K), dm.repeat_rows(q_mean, K), o_mean])
    for layer in range(cfg.n_shared):
        h = dm.tanh_act(dm.affine(h, _p(params, f"shared.{layer}.W"), _p(params, f"shared.{layer}.b")))
    return h


def head(params, cfg: ModelConfig, n: int, features: dm.Tensor, K: int) -> dm.Tensor:
    """Branch ``n`` top stack + classifier: features -> (B, K) logits."""
    h = features
    for layer in range(cfg.n_layers - cfg.n_shared):
        h = dm.tanh_act(dm.affine(h, _p(params, f"branch{n}.{layer}.W"), _p(params, f"branch{n}.{layer}.b")))
    scores = dm.affine(h, _p(params, f"branch{n}.cls.W"), _p(params, f"branch{n}.cls.b"))
    return dm.reshape(scores, (-1, K))


def check_ids(cfg: ModelConfig, batch: Batch) -> None:
    for arr in (batch.passage, batch.question, batch.options):
        if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
            raise ValueError(f"token id outside vocabulary of size {cfg.vocab_size}")


def branch_logits(params, cfg: ModelConfig, batch: Batch, n: int, view: VariableView | None = None,
                  features: dm.Tensor | None = None) -> dm.Tensor:
    """Logits of branch ``n`` under its own view (or an explicit one)."""
    if not 0 <= n <= cfg.n_shortcut:
        raise ValueError(f"branch {n} does not exist (N={cfg.n_shortcut})")
    if features is None:
        check_ids(cfg, batch)
        features = encode(params, cfg, batch.view(view or cfg.views[n]))
    return head(params, cfg, n, features, batch.K)


def muted_logits(params, cfg: ModelConfig, batch: Batch, n: int) -> dm.Tensor:
    """Branch ``n`` on the all-null probe (options replaced by NULLs too)."""
    check_ids(cfg, batch)
    return head(params, cfg, n, encode(params, cfg, batch.null_probe()), batch.K)


def _output(n: int, logits: dm.Tensor) -> BranchOutput:
    lv = logits.value[0]
    return BranchOutput(n, lv.copy(), dm.softmax(lv).value)


def forward_branch(n: int, instance: McqaInstance, params, cfg: ModelConfig) -> BranchOutput:
    return _output(n, branch_logits(params, cfg, make_batch([instance]), n))


def forward_muted_branch(n: int, instance: McqaInstance, params, cfg: ModelConfig) -> BranchOutput:
    return _output(n, muted_logits(params, cfg, make_batch([instance]), n))


def encode_instance(instance: McqaInstance, view: VariableView, params, cfg: ModelConfig) -> np.ndarray:
    """Per-option feature matrix (K, hidden) for one instance."""
    batch = make_batch([instance])
    check_ids(cfg, batch)
    return encode(params, cfg, batch.view(view)).value


# ---------------------------------------------------------------------------
# checkpoints


def params_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _encode_arrays(arrays: dict[str, np.ndarray]) -> dict:
    return {
        name: {"shape": list(arr.shape), "dtype": "float64",
               "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()}
        for name, arr in sorted(arrays.items())
    }


def _decode_arrays(obj: dict) -> dict[str, np.ndarray]:
    return {
        name: np.frombuffer(base64.b64decode(a["data"]), dtype="<f8").reshape(a["shape"]).astype(np.float64)
        for name, a in obj.items()
    }


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: dict[str, np.ndarray], *,
                    train_seed: int | None = None, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT, "version": 1, "model_config": cfg.to_dict(),
        "train_seed": train_seed, "extra": extra or {}, "arrays": _encode_arrays(params),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    cfg = ModelConfig.from_dict(doc["model_config"])
    meta = {"train_seed": doc.get("train_seed"), "extra": doc.get("extra", {})}
    return cfg, _decode_arrays(doc["arrays"]), meta

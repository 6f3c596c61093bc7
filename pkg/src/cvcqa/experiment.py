"""Run layout, configs and the gen-data / attack / train / eval pipeline.

A run directory looks like::

    config.toml            resolved config and tool version
    data/                  train, dev, test_in, test_anti JSONL + vocab.json
    attacks/<split>/       adv1..adv4 JSONL + attack_report.json
    models/                ct.json, cvc.json, adaptor.json, tuning.json, histories
    metrics.csv/.md        accuracy per dataset and method, with A.G.
    slices.csv             accuracy split by shortcut_flag
    muting.csv/.md         CT accuracy under muted views

With ``betas`` set, every verb works on one ``beta_<b>`` subdirectory per value.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import toml

from . import __version__
from . import inference as inf
from .attacks import KINDS, attack
from .data import (FULL, NO_P, NO_PQ, NO_Q, CorpusConfig, Dataset, Vocabulary, build_vocabulary,
                   generate_corpus, load_jsonl, mute, save_jsonl, sub_seed, write_corpus)
from .model import ModelConfig, init_params, load_checkpoint, params_hash, save_checkpoint
from .training import TrainConfig, TrainingDiverged, train, train_baseline_ct

logger = logging.getLogger(__name__)

SPLIT_FILES = ("train", "dev", "test_in", "test_anti")
METHODS = ("CT", "CVC_IV", "CVC_MV_const", "CVC_MV_adaptor")
MUTING_VIEWS = (FULL, NO_P, NO_Q, NO_PQ)
# calibrated benchmark schedule; plain gradient descent stays the TrainConfig default
BENCH_TRAIN = {"epochs": 20, "batch_size": 32, "learning_rate": 1e-3, "optimizer": "adam"}


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    pass


@dataclass
class InferenceSettings:
    c_s: float = 0.5
    c_grid: list[float] = field(default_factory=lambda: list(inf.C_GRID))
    methods: list[str] = field(default_factory=lambda: list(METHODS))

    def validate(self) -> None:
        inf.check_constant(self.c_s, "c_s")
        for c in self.c_grid:
            inf.check_constant(c, "c_grid")
        for m in self.methods:
            inf.Method(m)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    attacks: list[str] = field(default_factory=lambda: list(KINDS))
    augment: list[str] = field(default_factory=list)
    betas: list[float] = field(default_factory=list)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**BENCH_TRAIN))
    adaptor: inf.CAdaptorConfig = field(default_factory=inf.CAdaptorConfig)
    inference: InferenceSettings = field(default_factory=InferenceSettings)

    # -- serialization

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "out": self.out, "attacks": list(self.attacks), "augment": list(self.augment),
            "betas": list(self.betas), "corpus": self.corpus.to_dict(), "model": self.model.to_dict(),
            "train": self.train.to_dict(), "adaptor": asdict(self.adaptor), "inference": asdict(self.inference),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("meta", None)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                seed=int(d.get("seed", 0)), out=str(d.get("out", "runs/default")),
                attacks=list(d.get("attacks", KINDS)), augment=list(d.get("augment", [])),
                betas=[float(b) for b in d.get("betas", [])],
                corpus=CorpusConfig.from_dict(d.get("corpus", {})),
                model=_build(ModelConfig, d.get("model", {})),
                train=_build(TrainConfig, {**BENCH_TRAIN, **d.get("train", {})}),
                adaptor=_build(inf.CAdaptorConfig, d.get("adaptor", {})),
                inference=_build(InferenceSettings, d.get("inference", {})),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            return cls.from_dict(toml.loads(Path(path).read_text()))
        except toml.TomlDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def dumps(self) -> str:
        doc = self.to_dict()
        doc["meta"] = {"tool": "cvcqa", "version": __version__}
        return toml.dumps(doc)

    # -- resolution

    def validate(self) -> None:
        self.corpus.validate()
        self.model.validate()
        self.train.validate()
        self.adaptor.validate()
        self.inference.validate()
        for k in list(self.attacks) + list(self.augment):
            if k not in KINDS:
                raise ConfigError(f"unknown attack {k!r}; expected one of {KINDS}")
        for b in self.betas:
            if not 0.0 <= b <= 1.0:
                raise ConfigError(f"beta {b} outside [0, 1]")

    def resolved(self) -> "ExperimentConfig":
        """Copy with every component seed derived from the master seed."""
        corpus = replace(self.corpus, seed=sub_seed(self.seed, "data"))
        model = replace(self.model, vocab_size=self.corpus.vocab_size, K=self.corpus.K,
                        seed=sub_seed(self.seed, "model"), shortcut_views=list(self.model.shortcut_views))
        train_cfg = replace(self.train, seed=sub_seed(self.seed, "train"), augment=list(self.augment))
        adaptor = replace(self.adaptor, seed=sub_seed(self.seed, "adaptor"))
        out = replace(self, corpus=corpus, model=model, train=train_cfg, adaptor=adaptor)
        out.validate()
        return out

    @property
    def attack_seed(self) -> int:
        return sub_seed(self.seed, "attack")

    def runs(self, root: str | Path | None = None) -> list[tuple[Path, "ExperimentConfig"]]:
        root = Path(root or self.out)
        if not self.betas:
            return [(root, self.resolved())]
        return [(root / f"beta_{b:g}", replace(self, corpus=replace(self.corpus, beta=b), betas=[]).resolved())
                for b in self.betas]


def _build(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def write_config(cfg: ExperimentConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(cfg.dumps())


# ---------------------------------------------------------------------------
# data and attacks


def gen_data(cfg: ExperimentConfig, run_dir: Path) -> dict[str, Path]:
    write_config(cfg, run_dir)
    corpus = generate_corpus(cfg.corpus)
    return write_corpus(corpus, build_vocabulary(cfg.corpus), run_dir / "data")


def load_split(run_dir: Path, name: str) -> Dataset:
    path = run_dir / "data" / f"{name}.jsonl"
    if not path.exists():
        raise ArtifactError(f"missing dataset {path}; run gen-data first")
    return load_jsonl(path)


def load_vocab(run_dir: Path) -> Vocabulary:
    path = run_dir / "data" / "vocab.json"
    if not path.exists():
        raise ArtifactError(f"missing {path}; run gen-data first")
    return Vocabulary.load(path)


def attack_dataset(source: Path, kinds: Sequence[str], seed: int, vocab: Vocabulary, out_dir: Path) -> dict:
    """Attack one JSONL file with every kind; returns the merged report document."""
    if not source.exists():
        raise ArtifactError(f"missing dataset {source}")
    ds = load_jsonl(source)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "attack_report.json"
    doc = json.loads(report_path.read_text()) if report_path.exists() else {}
    for kind in kinds:
        attacked, report = attack(kind, ds, seed, vocab)
        save_jsonl(attacked, out_dir / f"{kind}.jsonl")
        doc[kind] = report.to_json()
    report_path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return doc


def run_attacks(cfg: ExperimentConfig, run_dir: Path, kinds: Sequence[str] | None = None) -> dict:
    kinds = list(kinds or cfg.attacks)
    vocab = load_vocab(run_dir)
    doc = attack_dataset(run_dir / "data" / "test_in.jsonl", kinds, cfg.attack_seed, vocab,
                         run_dir / "attacks" / "test_in")
    if cfg.augment:
        attack_dataset(run_dir / "data" / "train.jsonl", cfg.augment, cfg.attack_seed, vocab,
                       run_dir / "attacks" / "train")
    return doc


# ---------------------------------------------------------------------------
# training


def training_set(cfg: ExperimentConfig, run_dir: Path) -> list:
    instances = list(load_split(run_dir, "train").instances)
    missing = [run_dir / "attacks" / "train" / f"{k}.jsonl" for k in cfg.augment]
    missing = [p for p in missing if not p.exists()]
    if missing:
        raise ArtifactError("missing augmentation files: " + ", ".join(str(p) for p in missing))
    for kind in cfg.augment:
        ds = load_jsonl(run_dir / "attacks" / "train" / f"{kind}.jsonl")
        instances += [i for i in ds.instances if i.provenance == kind]
    return instances


def _ct_config(cfg: ExperimentConfig) -> ModelConfig:
    return replace(cfg.model, shortcut_views=[])


def train_models(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """CT baseline, multi-branch model, adaptor and dev-tuned constant."""
    write_config(cfg, run_dir)
    models = run_dir / "models"
    models.mkdir(parents=True, exist_ok=True)
    train_set = training_set(cfg, run_dir)
    dev = list(load_split(run_dir, "dev").instances)
    summary = {"n_train": len(train_set)}

    ct_cfg = _ct_config(cfg)
    for name, mcfg, fn in (("ct", ct_cfg, train_baseline_ct), ("cvc", cfg.model, train)):
        start = init_params(mcfg)
        try:
            params, history = fn(start, mcfg, train_set, cfg.train, dev)
        except TrainingDiverged as exc:
            save_checkpoint(models / f"{name}.diverged.json", mcfg, exc.params, train_seed=cfg.train.seed,
                            extra={"epoch": exc.epoch})
            raise
        save_checkpoint(models / f"{name}.json", mcfg, params, train_seed=cfg.train.seed)
        history.write_csv(models / f"history_{name}.csv")
        summary[name] = params_hash(params)

    _, cvc_params, _ = load_checkpoint(models / "cvc.json")
    before = params_hash(cvc_params)
    train_preds = inf.predict_np(cvc_params, cfg.model, train_set)
    adaptor, losses = inf.train_c_adaptor(train_preds, cfg.adaptor)
    adaptor.save(models / "adaptor.json")
    if params_hash(cvc_params) != before:
        raise RuntimeError("adaptor training modified the model")
    best, table = inf.tune_c_r(inf.predict_np(cvc_params, cfg.model, dev), cfg.inference.c_grid)
    tuning = {"c_r": best, "grid": {f"{k:g}": v for k, v in table.items()},
              "adaptor_loss": losses, "model_hash": before}
    (models / "tuning.json").write_text(json.dumps(tuning, sort_keys=True, indent=1) + "\n")
    summary["tuning"] = tuning
    return summary


# ---------------------------------------------------------------------------
# evaluation


def _fmt(x: float) -> str:
    return "" if x is None or not np.isfinite(x) else f"{100 * x:.2f}"


def eval_sets(run_dir: Path, kinds: Sequence[str]) -> dict[str, Dataset]:
    sets = {"test_in": load_split(run_dir, "test_in"), "test_anti": load_split(run_dir, "test_anti")}
    for k in kinds:
        path = run_dir / "attacks" / "test_in" / f"{k}.jsonl"
        if not path.exists():
            raise ArtifactError(f"missing attacked set {path}; run attack first")
        sets[k] = load_jsonl(path)
    return sets


def load_artifacts(run_dir: Path):
    models = run_dir / "models"
    need = [models / n for n in ("ct.json", "cvc.json", "adaptor.json", "tuning.json")]
    missing = [str(p) for p in need if not p.exists()]
    if missing:
        raise ArtifactError("missing artifacts: " + ", ".join(missing))
    ct = load_checkpoint(models / "ct.json")
    cvc = load_checkpoint(models / "cvc.json")
    adaptor = inf.CAdaptorParams.load(models / "adaptor.json")
    tuning = json.loads((models / "tuning.json").read_text())
    return ct, cvc, adaptor, tuning


def evaluate_run(cfg: ExperimentConfig, run_dir: Path, methods: Sequence[str] | None = None,
                 kinds: Sequence[str] | None = None) -> dict[str, dict[str, float]]:
    """Accuracy table ``{method: {dataset: acc}}``; writes metrics and slices."""
    methods = list(methods or cfg.inference.methods)
    kinds = list(cfg.attacks if kinds is None else kinds)
    for m in methods:
        inf.Method(m)
    (ct_cfg, ct_params, _), (cvc_cfg, cvc_params, _), adaptor, tuning = load_artifacts(run_dir)
    sets = eval_sets(run_dir, kinds)
    table: dict[str, dict[str, float]] = {}
    slices = []
    pred_dir = run_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for m in methods:
        if m == "CT":
            params, mcfg, method = ct_params, ct_cfg, inf.InferenceMethod("CT")
        else:
            params, mcfg = cvc_params, cvc_cfg
            method = inf.InferenceMethod(m, c_s=cfg.inference.c_s, c_r=tuning["c_r"] if m == "CVC_MV_const" else 0.5)
        table[m] = {}
        for name, ds in sets.items():
            res = inf.evaluate(params, mcfg, ds.instances, method, adaptor)
            table[m][name] = res.accuracy
            inf.write_predictions(res, pred_dir / f"{m}__{name}.jsonl")
            for flag in (True, False):
                hits = [r["prediction"] == r["gold"] for r in res.records if r["shortcut_flag"] == flag]
                slices.append((m, name, flag, len(hits), float(np.mean(hits)) if hits else float("nan")))
    adv = [k for k in kinds if k in sets]
    if "CT" in table and adv:
        for m in table:
            table[m]["A.G."] = float(np.mean([table[m][k] - table["CT"][k] for k in adv]))
    columns = list(sets) + (["A.G."] if "CT" in table and adv else [])
    (run_dir / "metrics.csv").write_text(metrics_csv(table, columns))
    (run_dir / "metrics.md").write_text(markdown_table(table, columns))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "dataset", "shortcut_flag", "n", "accuracy"])
    for m, name, flag, n, acc in slices:
        w.writerow([m, name, str(flag).lower(), n, _fmt(acc)])
    (run_dir / "slices.csv").write_text(buf.getvalue())
    return table


def metrics_csv(table: dict[str, dict[str, float]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + list(columns))
    for m, row in table.items():
        w.writerow([m] + [_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def markdown_table(table: dict[str, dict[str, float]], columns: Sequence[str]) -> str:
    header = ["method"] + list(columns)
    rows = [[m] + [_fmt(row.get(c)) for c in columns] for m, row in table.items()]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    line = lambda cells: "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), sep] + [line(r) for r in rows]) + "\n"


# ---------------------------------------------------------------------------
# muting study


def muting_study(cfg: ExperimentConfig, run_dir: Path, split: str = "test_in") -> dict[str, float]:
    """CT accuracy with each input variable muted (options always visible)."""
    path = run_dir / "models" / "ct.json"
    if not path.exists():
        raise ArtifactError(f"missing {path}; run train first")
    mcfg, params, _ = load_checkpoint(path)
    instances = list(load_split(run_dir, split).instances)
    result = {}
    for view in MUTING_VIEWS:
        muted = [mute(i, view) for i in instances]
        result[view.name] = inf.evaluate(params, mcfg, muted, inf.InferenceMethod("CT")).accuracy
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["view", "accuracy"])
    for k, v in result.items():
        w.writerow([k, _fmt(v)])
    (run_dir / "muting.csv").write_text(buf.getvalue())
    rows = {"CT": {k: v for k, v in result.items()}}
    (run_dir / "muting.md").write_text(markdown_table(rows, list(result)))
    return result


# ---------------------------------------------------------------------------
# report


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def find_runs(root: Path) -> list[Path]:
    if not root.exists():
        return []
    return sorted({p.parent for p in root.rglob("config.toml")})


def write_report(root: Path) -> tuple[str, list[str]]:
    """Collate every run under ``root`` into ``root/report.md``; returns text and missing files."""
    runs = find_runs(root)
    lines = ["# Run report", ""]
    missing: list[str] = []
    if not runs:
        lines.append("No runs found.")
    for run in runs:
        rel = run.relative_to(root).as_posix() if run != root else "."
        lines += [f"## {rel}", ""]
        cfg = toml.loads((run / "config.toml").read_text())
        meta = cfg.get("meta", {})
        lines.append(f"- tool version: {meta.get('version', 'unknown')}, master seed: {cfg.get('seed')}, "
                     f"beta: {cfg.get('corpus', {}).get('beta')}")
        for name in ("config.toml", "metrics.csv", "models/cvc.json", "models/ct.json"):
            p = run / name
            if p.exists():
                lines.append(f"- `{name}` sha256 {_sha(p)}")
        lines.append("")
        for title, name in (("Accuracy (%)", "metrics.md"), ("Muting study (%)", "muting.md")):
            p = run / name
            if p.exists():
                lines += [f"### {title}", "", p.read_text().rstrip(), ""]
            else:
                missing.append(str(p))
        tuning = run / "models" / "tuning.json"
        if tuning.exists():
            t = json.loads(tuning.read_text())
            grid = ", ".join(f"{k}: {100 * v:.2f}" for k, v in sorted(t["grid"].items(), key=lambda kv: float(kv[0])))
            lines += ["### Constant grid (dev accuracy %)", "", grid, f"selected c_r = {t['c_r']:g}", ""]
        else:
            missing.append(str(tuning))
    if missing:
        lines += ["## Missing files", ""] + [f"- {m}" for m in missing] + [""]
    text = "\n".join(lines).rstrip() + "\n"
    root.mkdir(parents=True, exist_ok=True)
    (root / "report.md").write_text(text)
    return text, missing

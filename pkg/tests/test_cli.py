import csv
import hashlib
import io
import json
from pathlib import Path

import pytest
import toml

from cvcqa import cli, data
from cvcqa import model as mdl
from cvcqa.experiment import ConfigError, ExperimentConfig

TINY = {
    "seed": 4,
    "corpus": {"n_train": 90, "n_dev": 30, "n_test": 30},
    "model": {"embed_dim": 8, "hidden": 8, "n_layers": 2},
    "train": {"epochs": 2, "batch_size": 16},
    "adaptor": {"epochs": 1},
}


def _write_cfg(path: Path, **over) -> Path:
    doc = json.loads(json.dumps(TINY))
    for k, v in over.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    path.write_text(toml.dumps(doc))
    return path


def _run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def _digest(root: Path, pattern: str) -> dict[str, str]:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.glob(pattern))}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "tiny.toml")
    out = root / "run"
    for verb in ("gen-data", "attack", "train", "eval", "muting-study"):
        assert _run(verb, "--config", cfg, "--out", out) == 0
    return root, cfg, out


def test_gen_data_files(pipeline):
    _, _, out = pipeline
    names = sorted(p.name for p in (out / "data").iterdir())
    assert names == ["dev.jsonl", "test_anti.jsonl", "test_in.jsonl", "train.jsonl", "vocab.json"]
    cfg = toml.loads((out / "config.toml").read_text())
    assert cfg["meta"]["version"] and cfg["seed"] == 4


def test_gen_data_rerun_identical(pipeline, tmp_path):
    _, cfg, out = pipeline
    assert _run("gen-data", "--config", cfg, "--out", tmp_path / "again") == 0
    assert _digest(out, "data/*") == _digest(tmp_path / "again", "data/*")


def test_beta_sweep_directories(tmp_path):
    cfg = _write_cfg(tmp_path / "sweep.toml", betas=[0.0, 0.9])
    assert _run("gen-data", "--config", cfg, "--out", tmp_path / "s") == 0
    assert sorted(p.name for p in (tmp_path / "s").iterdir()) == ["beta_0", "beta_0.9"]
    meta = json.loads((tmp_path / "s" / "beta_0" / "data" / "train.jsonl").read_text().splitlines()[0])
    assert meta["beta"] == 0.0


def test_attack_outputs(pipeline):
    _, _, out = pipeline
    src = (out / "data" / "test_in.jsonl").read_text().splitlines()
    for kind in ("adv1", "adv2", "adv3", "adv4"):
        lines = (out / "attacks" / "test_in" / f"{kind}.jsonl").read_text().splitlines()
        assert len(lines) == len(src)
        for a, b in zip(src[1:], lines[1:]):
            if a != b:
                assert json.loads(b)["provenance"] == kind
    report = json.loads((out / "attacks" / "test_in" / "attack_report.json").read_text())
    assert all(report[k]["all_passed"] for k in report)


def test_attack_single_dataset_deterministic(pipeline, tmp_path):
    _, cfg, out = pipeline
    for sub in ("a", "b"):
        assert _run("attack", "--config", cfg, "--out", out, "--attack", "adv3",
                    "--dataset", out / "data" / "dev.jsonl") == 0
        (out / "adv3.jsonl").rename(tmp_path / f"{sub}.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_unknown_attack_is_usage_error(pipeline, capsys):
    _, cfg, out = pipeline
    assert _run("attack", "--config", cfg, "--out", out, "--attack", "adv7") == 1
    assert "adv7" in capsys.readouterr().err


def test_train_artifacts(pipeline):
    _, _, out = pipeline
    models = out / "models"
    for name in ("ct.json", "cvc.json", "adaptor.json", "tuning.json", "history_ct.csv", "history_cvc.csv"):
        assert (models / name).exists()
    tuning = json.loads((models / "tuning.json").read_text())
    _, params, meta = mdl.load_checkpoint(models / "cvc.json")
    assert tuning["model_hash"] == mdl.params_hash(params)
    assert meta["train_seed"] is not None


def test_zero_epochs_checkpoint_is_init(tmp_path):
    cfg = _write_cfg(tmp_path / "zero.toml", train={"epochs": 0})
    out = tmp_path / "z"
    assert _run("gen-data", "--config", cfg, "--out", out) == 0
    assert _run("train", "--config", cfg, "--out", out) == 0
    rcfg = ExperimentConfig.load(cfg).resolved()
    _, params, _ = mdl.load_checkpoint(out / "models" / "cvc.json")
    assert mdl.params_hash(params) == mdl.params_hash(mdl.init_params(rcfg.model))


def test_augment_consumes_attack_files(pipeline, tmp_path, capsys):
    _, cfg, _ = pipeline
    out = tmp_path / "aug"
    assert _run("gen-data", "--config", cfg, "--out", out) == 0
    assert _run("train", "--config", cfg, "--out", out, "--augment", "all") == 2
    assert "missing augmentation files" in capsys.readouterr().err
    assert _run("attack", "--config", cfg, "--out", out, "--augment", "all") == 0
    assert _run("train", "--config", cfg, "--out", out, "--augment", "all") == 0
    extra = sum(sum(json.loads(l)["provenance"] == k for l in
                    (out / "attacks" / "train" / f"{k}.jsonl").read_text().splitlines()[1:])
                for k in ("adv1", "adv2", "adv3", "adv4"))
    assert f"trained on {90 + extra} instances" in capsys.readouterr().out


def test_metrics_and_ag(pipeline):
    _, _, out = pipeline
    rows = list(csv.DictReader(io.StringIO((out / "metrics.csv").read_text())))
    assert [r["method"] for r in rows] == ["CT", "CVC_IV", "CVC_MV_const", "CVC_MV_adaptor"]
    ct = rows[0]
    for r in rows:
        gain = sum(float(r[k]) - float(ct[k]) for k in ("adv1", "adv2", "adv3", "adv4")) / 4
        assert abs(gain - float(r["A.G."])) <= 0.05
    slices = (out / "slices.csv").read_text().splitlines()
    assert slices[0] == "method,dataset,shortcut_flag,n,accuracy"
    assert len(list((out / "predictions").glob("*.jsonl"))) == 4 * 6


def test_eval_rerun_identical_bytes(pipeline):
    _, cfg, out = pipeline
    before = (out / "metrics.csv").read_bytes()
    assert _run("eval", "--config", cfg, "--out", out) == 0
    assert (out / "metrics.csv").read_bytes() == before


def test_eval_method_subset(pipeline, tmp_path):
    _, cfg, out = pipeline
    assert _run("eval", "--config", cfg, "--out", out, "--method", "CVC_IV", "--attack", "adv1") == 0
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "method,test_in,test_anti,adv1"
    assert _run("eval", "--config", cfg, "--out", out) == 0


def test_muting_full_row_matches_eval(pipeline):
    _, _, out = pipeline
    muting = dict(csv.reader(io.StringIO((out / "muting.csv").read_text())))
    metrics = list(csv.DictReader(io.StringIO((out / "metrics.csv").read_text())))
    assert muting["full"] == metrics[0]["test_in"]
    assert set(muting) == {"view", "full", "no_P", "no_Q", "no_PQ"}


def test_missing_artifacts_exit_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.toml")
    for verb in ("attack", "train", "eval", "muting-study"):
        assert _run(verb, "--config", cfg, "--out", tmp_path / "empty") == 2
    assert "gen-data" in capsys.readouterr().err


def test_bad_configs_exit_1(tmp_path):
    (tmp_path / "bad.toml").write_text("seed = [\n")
    assert _run("gen-data", "--config", tmp_path / "bad.toml", "--out", tmp_path / "x") == 1
    bad_beta = _write_cfg(tmp_path / "beta.toml", corpus={"beta": 2.0})
    assert _run("gen-data", "--config", bad_beta, "--out", tmp_path / "x") == 1
    unknown = _write_cfg(tmp_path / "u.toml", wibble=1)
    assert _run("gen-data", "--config", unknown, "--out", tmp_path / "x") == 1
    assert _run("gen-data", "--bogus-flag") == 1
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"train": {"epochz": 1}})


def test_report(pipeline, tmp_path):
    _, _, out = pipeline
    text, missing = cli.write_report(tmp_path / "nothing")
    assert "No runs found." in text and not missing
    assert _run("report", "--out", out) == 0
    first = (out / "report.md").read_bytes()
    assert _run("report", "--out", out) == 0
    assert (out / "report.md").read_bytes() == first
    body = first.decode()
    assert body.count("### Accuracy (%)") == 1 and "sha256" in body


def test_config_round_trip():
    cfg = ExperimentConfig.from_dict(TINY)
    again = ExperimentConfig.from_dict(toml.loads(cfg.dumps()))
    assert again.to_dict() == cfg.to_dict()
    r = cfg.resolved()
    assert r.corpus.seed == data.sub_seed(4, "data") and r.model.seed == data.sub_seed(4, "model")
    assert r.train.seed == data.sub_seed(4, "train")

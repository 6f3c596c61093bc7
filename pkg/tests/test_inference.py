import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cvcqa import inference as inf
from cvcqa import model as mdl
from cvcqa.inference import InferenceMethod, Method, Predictions

P_R = np.array([0.05, 0.10, 0.35, 0.50])
P_S = np.array([0.05, 0.05, 0.7, 0.2])
unit = st.floats(0.0, 1.0)


def probs(k):
    return arrays(np.float64, k, elements=st.floats(1e-3, 1.0)).map(lambda a: a / a.sum())


def prob_pair():
    return st.integers(2, 6).flatmap(lambda k: st.tuples(probs(k), probs(k)))


@pytest.fixture(scope="module")
def cfg():
    return mdl.ModelConfig(embed_dim=6, hidden=8, n_layers=3, seed=8)


@pytest.fixture(scope="module")
def params(cfg):
    return mdl.init_params(cfg)


# -- CVC-IV


def test_iv_worked_example():
    scores = inf.cvc_iv_scores(P_R, 0.5, 0.5)
    assert np.allclose(scores, [-0.225, -0.2, -0.075, 0.0], atol=1e-15)
    assert inf.decide(scores)[0] == 3 == P_R.argmax()


def test_iv_uniform_ties_lowest():
    scores = inf.cvc_iv_scores(np.full(4, 0.25), 0.3, 0.9)
    assert np.all(scores == scores[0]) and inf.decide(scores)[0] == 0


@settings(max_examples=300)
@given(st.integers(2, 6).flatmap(probs), st.floats(0.01, 1.0), unit, st.integers(1, 3))
def test_iv_argmax_invariance(p_r, c_s, c_r, n):
    assert inf.decide(inf.cvc_iv_scores(p_r, c_s, c_r, n))[0] == np.argmax(p_r)


@pytest.mark.parametrize("bad", [-0.1, 1.2, float("nan")])
def test_constants_out_of_range(bad):
    with pytest.raises(ValueError):
        inf.cvc_iv_scores(P_R, bad, 0.5)
    with pytest.raises(ValueError):
        InferenceMethod(Method.CVC_MV_CONST, c_r=bad)


# -- CVC-MV


def test_mv_worked_example():
    scores = inf.cvc_mv_scores(P_R, [P_S], 0.5)
    assert np.max(np.abs(scores - [-0.0225, -0.02, -0.105, 0.0])) <= 1e-12
    assert inf.decide(scores)[0] == 3
    assert inf.decide(inf.fused_scores(P_R, [P_S]))[0] == 2


@given(st.integers(2, 6).flatmap(probs), unit)
def test_mv_uniform_shortcut_follows_robust(p_r, c):
    k = len(p_r)
    assert inf.decide(inf.cvc_mv_scores(p_r, [np.full(k, 1 / k)], c))[0] == np.argmax(p_r)


@given(st.integers(2, 5).flatmap(lambda k: st.tuples(probs(k), st.lists(probs(k), min_size=1, max_size=3))))
def test_mv_zero_constant_is_fusion(case):
    p_r, p_s = case
    assert np.array_equal(inf.cvc_mv_scores(p_r, p_s, 0.0), inf.fused_scores(p_r, p_s))


@given(prob_pair(), st.data())
def test_mv_cancellation(pair, draw):
    p_r, q = pair
    j = draw.draw(st.integers(0, len(p_r) - 1))
    c = np.full(len(p_r), 0.5)
    c[j] = p_r[j]
    assert inf.cvc_mv_scores(p_r, [q], [c])[j] == 0.0


def test_mv_per_branch_constants():
    a = inf.cvc_mv_scores(P_R, [P_S, P_S], [0.2, 0.8])
    b = (P_R - 0.2) * P_S + (P_R - 0.8) * P_S
    assert np.allclose(a, b, atol=1e-15)
    with pytest.raises(ValueError):
        inf.cvc_mv_scores(P_R, [P_S], [0.2, 0.8])


# -- c variants and adaptor


def test_variant_extremes():
    assert inf.c_variants([1.0, 0.0], [0.0, 1.0], "js")[0] == pytest.approx([math.log(2)] * 2, abs=1e-12)
    assert inf.c_variants([1.0, 0.0], [0.0, 1.0], "euc")[0].tolist() == [1.0, 1.0]
    same = [0.2, 0.3, 0.5]
    assert np.all(inf.c_variants(same, same, "js") == 0) and np.all(inf.c_variants(same, same, "euc") == 0)
    with pytest.raises(ValueError):
        inf.c_variants(same, same, "cos")


@given(prob_pair())
def test_euc_variant_bounded(pair):
    c = inf.c_variants(*pair, "euc")
    assert np.all((c >= 0) & (c <= 1))


def test_zero_adaptor_outputs_half():
    ad = inf.init_adaptor(4, 1)
    ad.arrays["c1.W1"][:] = 0.0
    assert np.array_equal(inf.c_adaptor_forward(P_R, P_S, ad), np.full((1, 4), 0.5))
    # the default init keeps W1 random but the output layer at zero, so c is still 0.5
    assert np.array_equal(inf.c_adaptor_forward(P_R, P_S, inf.init_adaptor(4, 1)), np.full((1, 4), 0.5))


def test_adaptor_input_layout():
    x = inf.adaptor_inputs(P_R, P_R)
    assert x.shape == (1, 9) and x[0, -1] == 0.0
    with pytest.raises(Exception):
        inf.adaptor_inputs(P_R, P_S[:3])
    assert np.all(inf.adaptor_inputs(P_R, P_S, "no_probs")[0, :8] == 0)
    assert inf.adaptor_inputs(P_R, P_S, "no_distance")[0, -1] == 0


@settings(max_examples=50, deadline=None)
@given(prob_pair(), st.integers(0, 1000))
def test_adaptor_range(pair, seed):
    p_r, q = pair
    ad = inf.init_adaptor(len(p_r), 1, inf.CAdaptorConfig(seed=seed))
    rng = np.random.default_rng(seed)
    ad.arrays = {k: rng.normal(scale=5, size=v.shape) for k, v in ad.arrays.items()}
    c = inf.c_adaptor_forward(p_r, q, ad)
    assert c.shape == (1, len(p_r)) and np.all((c >= 0) & (c <= 1))


def _synthetic_preds(n=200, seed=0):
    rng = np.random.default_rng(seed)
    gold = rng.integers(4, size=n)
    p_r = rng.dirichlet(np.ones(4), size=n) * 0.5 + 0.5 * np.eye(4)[gold]
    wrong = (gold + 1 + rng.integers(3, size=n)) % 4
    p_s = 0.1 + 0.6 * np.eye(4)[wrong]
    return Predictions(p_r, [p_s / p_s.sum(1, keepdims=True)], gold)


def test_adaptor_training_zero_epochs_and_freeze(cfg, params, small_corpus):
    preds = inf.predict_np(params, cfg, small_corpus["dev"].instances)
    before = mdl.params_hash(params)
    ad0 = inf.init_adaptor(4, 1)
    ad, losses = inf.train_c_adaptor(preds, inf.CAdaptorConfig(epochs=0), ad0)
    assert losses == [] and all(np.array_equal(ad.arrays[k], ad0.arrays[k]) for k in ad0.arrays)
    inf.train_c_adaptor(preds, inf.CAdaptorConfig(epochs=2))
    assert mdl.params_hash(params) == before


def test_adaptor_training_lowers_loss():
    preds = _synthetic_preds()
    _, losses = inf.train_c_adaptor(preds, inf.CAdaptorConfig(epochs=15, learning_rate=0.05))
    assert losses[-1] < losses[0]


def test_adaptor_json_round_trip(tmp_path):
    ad, _ = inf.train_c_adaptor(_synthetic_preds(), inf.CAdaptorConfig(epochs=1, scalar_output=True))
    ad.save(tmp_path / "a.json")
    again = inf.CAdaptorParams.load(tmp_path / "a.json")
    assert np.array_equal(inf.c_adaptor_forward(P_R, P_S, ad), inf.c_adaptor_forward(P_R, P_S, again))
    c = inf.c_adaptor_forward(P_R, P_S, again)
    assert np.all(c == c[0, 0])


# -- predictions and evaluation


def test_untrained_uniform_predictions(cfg, params, small_corpus):
    p = dict(params)
    for n in (0, 1):
        p[f"branch{n}.cls.W"] = np.zeros_like(p[f"branch{n}.cls.W"])
    preds = inf.predict_np(p, cfg, small_corpus["dev"].instances[:5])
    assert np.allclose(preds.p_r, 0.25) and np.allclose(preds.fused, 1 / 16)


def test_predictions_deterministic_and_fused(cfg, params, small_corpus):
    insts = small_corpus["dev"].instances[:30]
    a, b = inf.predict_np(params, cfg, insts), inf.predict_np(params, cfg, insts)
    assert np.array_equal(a.p_r, b.p_r) and np.array_equal(a.p_s[0], b.p_s[0])
    assert np.max(np.abs(a.fused - a.p_r * a.p_s[0])) <= 1e-12
    single = inf.predict_np(params, cfg, insts[3])
    assert np.allclose(single.p_r[0], a.p_r[3], atol=1e-12)


def test_all_muted_probe(cfg, params, small_corpus):
    insts = small_corpus["dev"].instances[:10]
    r_star, s_star = inf.predict_all_muted(params, cfg, insts)
    assert np.allclose(r_star.sum(1), 1.0) and np.allclose(s_star[0].sum(1), 1.0)
    same_profile = [i for i in insts if [len(o) for o in i.options] == [len(o) for o in insts[0].options]
                    and len(i.passage) == len(insts[0].passage) and len(i.question) == len(insts[0].question)]
    base = inf.predict_all_muted(params, cfg, insts[0])[0]
    for inst in same_profile:
        assert np.array_equal(inf.predict_all_muted(params, cfg, inst)[0], base)


def test_oracle_and_anti_oracle(small_corpus):
    insts = small_corpus["dev"].instances[:40]
    gold = np.array([i.answer for i in insts])
    onehot = np.eye(4)[gold]
    anti = np.eye(4)[(gold + 1) % 4]
    ct = InferenceMethod(Method.CT)
    assert inf.evaluate_predictions(Predictions(onehot, [], gold), insts, ct).accuracy == 1.0
    assert inf.evaluate_predictions(Predictions(anti, [], gold), insts, ct).accuracy == 0.0


@pytest.mark.parametrize("kind", list(Method))
def test_accuracy_matches_records(cfg, params, small_corpus, kind, tmp_path):
    insts = small_corpus["test_in"].instances
    preds = inf.predict_np(params, cfg, insts)
    adaptor = inf.init_adaptor(4, 1)
    res = inf.evaluate_predictions(preds, insts, InferenceMethod(kind), adaptor)
    assert res.accuracy == pytest.approx(np.mean([r["prediction"] == r["gold"] for r in res.records]))
    inf.write_predictions(res, tmp_path / "p.jsonl")
    rec = json.loads((tmp_path / "p.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"index", "method", "scores", "prediction", "gold", "shortcut_flag", "provenance"}


def test_method_artifact_mismatch(small_corpus):
    ct_cfg = mdl.ModelConfig(embed_dim=4, hidden=4, n_layers=2, shortcut_views=[])
    p = mdl.init_params(ct_cfg)
    with pytest.raises(ValueError):
        inf.evaluate(p, ct_cfg, small_corpus["dev"].instances[:3], InferenceMethod(Method.CVC_MV_CONST))
    preds = _synthetic_preds(10)
    with pytest.raises(ValueError):
        inf.method_scores(preds, InferenceMethod(Method.CVC_MV_ADAPTOR))
    with pytest.raises(ValueError):
        inf.method_scores(preds, InferenceMethod(Method.CVC_MV_ADAPTOR), inf.init_adaptor(4, 2))


def test_tune_grid_and_ties():
    preds = _synthetic_preds()
    best, table = inf.tune_c_r(preds)
    assert list(table) == list(inf.C_GRID) and table[best] == max(table.values())
    flat = Predictions(np.eye(4)[[0, 1]], [np.full((2, 4), 0.25)], np.array([0, 1]))
    assert inf.tune_c_r(flat)[0] == 0.2

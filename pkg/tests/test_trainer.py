import json
import time
from dataclasses import replace

import numpy as np
import pytest

from ahnpl import encoders as enc
from ahnpl import synthetic as syn
from ahnpl.experiments import make_dataset, pretrain
from ahnpl.losses import A_LOWER_BOUND, LossFlags, MarginState, contrastive_loss, total_loss
from ahnpl.pipeline import forward
from ahnpl.trainer import (
    PRESETS,
    AdamState,
    TrainConfig,
    TrainReport,
    assemble_batch,
    build_raw_batch,
    optimizer_update,
    prepare_negatives,
    preset,
    train,
    train_step,
)

SMALL = syn.DataConfig(n_train=256, n_benchmark=60)


@pytest.fixture(scope="module")
def ds():
    return make_dataset(0, SMALL)


def quick(**kw):
    return replace(PRESETS["desk"], epochs=1, batch_size=32, **kw)


# -- optimizer -------------------------------------------------------------------


def test_adam_first_step_scalar_oracle():
    p, g, lr = 1.0, 0.5, 0.1
    out, st = optimizer_update({"w": np.array([p])}, {"w": np.array([g])}, AdamState(), lr, 0.0)
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    assert out["w"][0] == pytest.approx(p - lr * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-15)
    assert st.t == 1


def test_zero_gradient_without_decay_is_identity():
    w = np.array([0.3, -2.0])
    out, _ = optimizer_update({"w": w}, {"w": np.zeros(2)}, AdamState(), 0.01, 0.0)
    np.testing.assert_array_equal(out["w"], w)


def test_decay_only_step_shrinks_by_lr_wd():
    w = np.array([0.3, -2.0, 5.0])
    out, _ = optimizer_update({"w": w, "a": np.array([0.7])}, {"w": np.zeros(3), "a": np.zeros(1)}, AdamState(), 0.01, 0.1)
    np.testing.assert_allclose(out["w"], w * (1 - 0.001), rtol=0, atol=1e-15)
    assert out["a"][0] == 0.7


# -- config and presets ------------------------------------------------------------


def test_mscoco_preset_values():
    d = json.loads(PRESETS["paper-mscoco"].to_json())
    assert (d["batch_size"], d["lr"], d["weight_decay"], d["epochs"]) == (128, 2e-5, 0.1, 10)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"batch": 3})
    with pytest.raises(KeyError):
        preset("nope")
    assert TrainConfig.from_dict(json.loads(TrainConfig(lr=0.5).to_json())) == TrainConfig(lr=0.5)


# -- batches ---------------------------------------------------------------------


def test_negatives_are_padded_without_copies_of_positive(ds):
    kept, negs, k = prepare_negatives(ds.corpus[:50], ds.lexicon, 2, 0)
    assert k >= 1
    for s in kept:
        assert len(negs[s.id]) == k
        assert all(n != s.caption.tokens for n in negs[s.id])


def test_assembled_batch_shapes_and_visual_negatives(ds):
    kept, negs, k = prepare_negatives(ds.corpus[:2], ds.lexicon, 1, 0)
    params = enc.init_params(0, enc.EncoderDims(len(ds.tokens), ds.vocab.feature_dim, 8, 8))
    b = assemble_batch(kept, negs, params, ds.tokens, 2)
    assert (b.text.shape, b.image.shape, b.text_neg.shape, b.image_neg.shape) == ((2, 8), (2, 8), (2, 2, 8), (2, 2, 8))
    for i in range(2):
        for n in range(2):
            np.testing.assert_array_equal(b.image_neg[i, n], b.image[i] + (b.text_neg[i, n] - b.text[i]))


# -- steps and runs ---------------------------------------------------------------


def _step_inputs(ds, seed=0):
    kept, negs, k = prepare_negatives(ds.corpus[:16], ds.lexicon, 2, seed)
    params = enc.init_params(seed, enc.EncoderDims(len(ds.tokens), ds.vocab.feature_dim, 8, 8))
    return kept, negs, k, params


def test_contrastive_only_step_is_plain_infonce(ds):
    kept, negs, k, params = _step_inputs(ds)
    raw = build_raw_batch(kept, negs, ds.tokens, k)
    cfg = TrainConfig(use_negatives=False, use_mhnl=False, use_dmcl=False, hidden_dim=8, embed_dim=8)
    res = train_step(raw, params, MarginState(a=0.5, thresholds=np.zeros(k)), AdamState(), cfg)
    expected = contrastive_loss(forward(params, raw, cfg.tau).batch)[0]
    assert res.breakdown.l_total == expected


def test_thresholds_come_from_previous_step_only(ds):
    kept, negs, k, params = _step_inputs(ds)
    cfg = TrainConfig(hidden_dim=8, embed_dim=8)
    r1 = build_raw_batch(kept[:8], negs, ds.tokens, k)
    r2 = build_raw_batch(kept[8:], negs, ds.tokens, k)
    first = train_step(r1, params, MarginState(a=0.5, thresholds=np.zeros(k)), AdamState(), cfg)
    np.testing.assert_array_equal(first.margin.thresholds, np.zeros(k))
    pos, neg = first.margin.prev_similarities
    second = train_step(r2, first.params, first.margin, first.opt, cfg)
    np.testing.assert_allclose(second.margin.thresholds, pos.mean() - neg.mean(axis=0), atol=1e-15)
    # changing the current batch leaves the thresholds it is trained with untouched
    r2b = replace(r2, features=r2.features + 1.0)
    third = train_step(r2b, first.params, first.margin, first.opt, cfg)
    np.testing.assert_array_equal(third.margin.thresholds, second.margin.thresholds)


def test_train_is_deterministic_and_clamps_a(ds):
    a = train(quick(), ds.corpus, lexicon=ds.lexicon, vocab=ds.tokens)
    b = train(quick(), ds.corpus, lexicon=ds.lexicon, vocab=ds.tokens)
    assert a.report.metrics_csv() == b.report.metrics_csv()
    assert min(a.report.a_trajectory) >= A_LOWER_BOUND
    c = train(quick(seed=1), ds.corpus, lexicon=ds.lexicon, vocab=ds.tokens)
    assert c.report.metrics_csv() != a.report.metrics_csv()


def test_report_round_trip(ds):
    rep = train(quick(), ds.corpus, ds.benchmark, ds.lexicon, vocab=ds.tokens).report
    assert len(rep.epoch_accuracy) == 1
    assert TrainReport.from_json(rep.to_json()) == rep
    header = rep.metrics_csv().splitlines()[0].split(",")
    assert header[:8] == ["step", "l_cont", "l_neg_visual", "l_neg_textual", "l_mar_pos", "l_mar_neg", "l_total", "a"]
    assert header[8:] == [f"M_{n}" for n in range(rep.k)]


def test_desk_preset_runtime_and_first_epoch_loss_decrease():
    full = make_dataset(0)
    t0 = time.perf_counter()
    base = pretrain(full, 0)
    res = train(replace(PRESETS["desk"], epochs=1), full.corpus, lexicon=full.lexicon, vocab=full.tokens, init=base.params)
    assert time.perf_counter() - t0 < 60
    losses = [row["l_total"] for row in res.report.history]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_missing_lexicon_rejected(ds):
    with pytest.raises(ValueError):
        train(quick(), ds.corpus)

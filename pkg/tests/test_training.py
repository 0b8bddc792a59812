import io

import numpy as np
import pytest

from densecap import tensor as T
from densecap.backbone import BackboneConfig
from densecap.checkpoint import load_parameters, read_checkpoint
from densecap.dataset import GeneratorConfig, build_vocab, generate_corpus
from densecap.errors import ConfigError, NumericError, UsageError
from densecap.geometry import AnchorSpec
from densecap.heads import ModelConfig
from densecap.model import DenseCapModel
from densecap.training import (LOG_COLUMNS, LossConfig, TrainSchedule, compute_loss, finetune_with_context,
                               forward_image, train)

GEN = GeneratorConfig(image_size=32, object_count=(1, 2), object_size=(12, 18), part_prob=0.0, pair_prob=0.0)
BCFG = BackboneConfig(channels=4, pool_size=2, feature_dim=8, rpn_batch=16, image_side=32,
                      anchors=AnchorSpec((16.0,), (0.5, 1.0, 2.0)))
SCHED = TrainSchedule(iterations=6, head_batch=8, train_proposals=16, checkpoint_every=4)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(GEN, 4, seed=0)


def tiny_model(corpus, variant="t-lstm", fusion="none", op="mul", seed=0):
    cfg = ModelConfig(variant=variant, fusion=fusion, op=op, hidden_dim=8, embed_dim=8)
    return DenseCapModel(BCFG, cfg, build_vocab(corpus), seed)


# -- loss assembly ------------------------------------------------------------------------------

def test_loss_identity_and_components(corpus):
    model = tiny_model(corpus)
    out = forward_image(model, corpus[0], np.random.default_rng(0), SCHED)
    cfg = LossConfig(alpha=0.3, beta=0.7)
    lb = compute_loss(out, cfg)
    assert lb.total == pytest.approx(lb.l_cap + 0.3 * (lb.l_det_rpn + lb.l_det_final)
                                     + 0.7 * (lb.l_bbox_rpn + lb.l_bbox_final), abs=1e-12)

    # standalone recomputation of every component
    def ce(logits, labels, mask=None):
        lp = T.log_softmax_np(logits)[np.arange(len(labels)), labels]
        mask = np.ones(len(labels)) if mask is None else mask
        return -(lp * mask).sum() / mask.sum()

    def sl1(pred, target):
        d = np.abs(pred - target)
        return np.where(d < 1, 0.5 * d * d, d - 0.5).sum() / len(pred)

    assert lb.l_det_rpn == pytest.approx(ce(out.rpn_logits.data, out.rpn_labels), abs=1e-12)
    assert lb.l_det_final == pytest.approx(ce(out.det_logits.data, out.det_labels), abs=1e-12)
    assert lb.l_cap == pytest.approx(ce(out.head.word_logits.data, out.head.word_targets, out.head.word_mask), abs=1e-12)
    assert lb.l_bbox_final == pytest.approx(sl1(out.head.offsets.data, out.bbox_targets), abs=1e-12)
    assert lb.l_bbox_rpn == pytest.approx(sl1(out.rpn_offsets.data, out.rpn_targets), abs=1e-12)


def test_zero_weights_leave_caption_loss(corpus):
    out = forward_image(tiny_model(corpus), corpus[1], np.random.default_rng(0), SCHED)
    lb = compute_loss(out, LossConfig(0.0, 0.0))
    assert lb.total == lb.l_cap


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(alpha=-1.0)


# -- schedule ------------------------------------------------------------------------------------

def test_lr_schedule_boundaries():
    s = TrainSchedule(base_lr=0.001, halving_interval=100)
    assert [s.lr(t) for t in (0, 99, 100, 199, 200)] == [0.001, 0.001, 0.0005, 0.0005, 0.00025]


def test_schedule_validation():
    with pytest.raises(ConfigError):
        TrainSchedule(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainSchedule(base_lr=0.0)


# -- training loop ---------------------------------------------------------------------------------

def test_zero_iterations_writes_initial_only(corpus, tmp_path):
    model = tiny_model(corpus)
    res = train(model, corpus, TrainSchedule(iterations=0), out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["initial.ckpt"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["initial.ckpt"]
    assert res.history == []


def test_empty_corpus_rejected(corpus):
    with pytest.raises(UsageError):
        train(tiny_model(corpus), [], SCHED)


def test_same_seed_identical_curves(corpus, tmp_path):
    runs = []
    for i in range(2):
        log = io.StringIO()
        res = train(tiny_model(corpus), corpus, SCHED, seed=5, out_dir=tmp_path / str(i), log=log)
        runs.append((res.history, log.getvalue(), (tmp_path / str(i) / "last.ckpt").read_bytes()))
    assert runs[0] == runs[1]
    other = train(tiny_model(corpus), corpus, SCHED, seed=6).history
    assert other != runs[0][0]


def test_log_format(corpus):
    log = io.StringIO()
    train(tiny_model(corpus), corpus, SCHED, log=log)
    lines = log.getvalue().splitlines()
    assert lines[0] == "# " + " ".join(LOG_COLUMNS)
    rows = [line.split() for line in lines[1:]]
    assert len(rows) == SCHED.iterations and all(len(r) == len(LOG_COLUMNS) for r in rows)
    assert [int(r[0]) for r in rows] == list(range(SCHED.iterations))


def test_checkpoints_written(corpus, tmp_path):
    model = tiny_model(corpus)
    res = train(model, corpus, SCHED, out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["initial.ckpt", "last.ckpt"]
    data = read_checkpoint(tmp_path / "last.ckpt")
    assert data.iteration == SCHED.iterations
    clone = tiny_model(corpus, seed=99)
    load_parameters(clone, data)
    for name, p in model.named_parameters().items():
        assert p.data.tobytes() == clone.named_parameters()[name].data.tobytes()


def test_frozen_parameters_do_not_move(corpus):
    model = tiny_model(corpus)
    params = model.named_parameters()
    subset = {k: v for k, v in params.items() if k.startswith("head.")}
    before = {k: v.data.copy() for k, v in params.items()}
    train(model, corpus, SCHED, params=subset)
    for k, v in params.items():
        moved = not np.array_equal(before[k], v.data)
        if k not in subset:
            assert not moved, k
    assert any(not np.array_equal(before[k], params[k].data) for k in subset)


def test_nan_aborts_and_keeps_checkpoint(corpus, tmp_path):
    model = tiny_model(corpus)
    model.head.word.bias.data[0] = np.nan
    with pytest.raises(NumericError):
        train(model, corpus, SCHED, out_dir=tmp_path)
    assert (tmp_path / "initial.ckpt").exists()


# -- fine-tuning warm start ----------------------------------------------------------------------

@pytest.mark.parametrize("fusion, op", [("late", "sum"), ("late", "mul"), ("late", "concat"),
                                        ("early", "sum"), ("early", "mul"), ("early", "concat")])
def test_warm_start_matches_base(corpus, fusion, op):
    base = tiny_model(corpus, seed=1)
    train(base, corpus, SCHED)
    ft = finetune_with_context(base, fusion, op, seed=2)
    for scene in corpus:
        fm_a, fm_b = base.features(scene.image), ft.features(scene.image)
        boxes = scene.gt_boxes()
        ca, ba = base.decode_boxes(fm_a, boxes)
        cb, bb = ft.decode_boxes(fm_b, boxes)
        np.testing.assert_allclose(ca, cb, atol=1e-9)
        assert ba.tokens == bb.tokens
        np.testing.assert_allclose(ba.final_offsets, bb.final_offsets, atol=1e-9)
        region = base.encoder(fm_a, boxes)
        caps = [base.vocab.encode(r.captions[0]) for r in scene.regions]
        la = base.head.forward_train(region, None, caps).word_logits.data
        lb = ft.head.forward_train(region, ft.context(fm_b), caps).word_logits.data
        np.testing.assert_allclose(la, lb, atol=1e-9)


def test_finetune_rejects_context_base(corpus):
    ctx = tiny_model(corpus, fusion="late", op="sum")
    with pytest.raises(ConfigError):
        finetune_with_context(ctx, "late", "mul")


# -- desk-scale convergence ----------------------------------------------------------------------

def test_baseline_loss_drops_tenfold():
    from densecap.config import RunConfig, build_model

    cfg = RunConfig.desk().with_values(model={"variant": "baseline"})
    corpus = generate_corpus(GeneratorConfig(part_prob=0, pair_prob=0), 20, seed=1)
    model = build_model(cfg, build_vocab(corpus), seed=0)
    res = train(model, corpus, TrainSchedule(iterations=2000), LossConfig(), seed=0)
    totals = np.array([row[6] for row in res.history])
    assert totals[:50].mean() >= 10 * totals[-50:].mean()

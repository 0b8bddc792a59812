import numpy as np
import pytest

from densecap import checkpoint as C
from densecap import config as K
from densecap.dataset import GeneratorConfig, build_vocab, generate_corpus
from densecap.errors import CheckpointError, ConfigError
from densecap.evaluation import evaluate
from densecap.tensor import SgdState


@pytest.fixture(scope="module")
def small():
    cfg = K.RunConfig.desk().with_values(
        generator={"image_size": 64, "object_size": (14, 24)},
        backbone={"channels": 4, "pool_size": 2, "feature_dim": 8, "image_side": 64},
        model={"hidden_dim": 8, "embed_dim": 8},
    )
    corpus = generate_corpus(cfg.generator, 2, seed=0)
    return cfg, corpus, K.build_model(cfg, build_vocab(corpus), seed=1)


# -- configuration text -------------------------------------------------------------------------

@pytest.mark.parametrize("preset", sorted(K.PRESETS))
def test_preset_text_roundtrip(preset):
    cfg = K.PRESETS[preset]()
    text = K.to_text(cfg)
    assert K.from_text(text) == cfg
    assert K.to_text(K.from_text(text)) == text


def test_overrides_and_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nmodel.variant = s-lstm  # trailing\n\nbackbone.anchor_scales = 16, 32\n")
    cfg = K.load_config(path, "desk", ["loss.beta = 0.5", "model.fusion=late"])
    assert cfg.model.variant == "s-lstm" and cfg.model.fusion == "late"
    assert cfg.backbone.anchors.scales == (16.0, 32.0) and cfg.backbone.anchors.anchors_per_cell == 6
    assert cfg.loss.beta == 0.5 and cfg.backbone.channels == 16


@pytest.mark.parametrize("text", [
    "model.colour = red",
    "nosuch.key = 1",
    "model.hidden_dim = many",
    "model.variant = x-lstm",
    "plainkey = 3",
    "model.variant",
    "model.variant = t-lstm\nmodel.variant = s-lstm",
    "train.momentum = 1.5",
])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        K.from_text(text)


def test_unknown_preset_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        K.load_config(None, "huge")
    with pytest.raises(ConfigError):
        K.load_config(tmp_path / "nope.cfg")


def test_paper_scale_defaults():
    cfg = K.RunConfig.paper()
    assert cfg.backbone.anchors.anchors_per_cell == 12
    assert cfg.backbone.rpn_batch == 256
    assert cfg.data.vocab_cap == 10000
    assert cfg.generator.max_caption_len == 10 and cfg.model.max_steps == 11
    assert cfg.model.hidden_dim == 512
    assert (cfg.loss.alpha, cfg.loss.beta) == (0.1, 0.01)
    assert cfg.train.momentum == 0.98 and cfg.train.base_lr == 0.001
    assert (cfg.train.iterations, cfg.train.halving_interval) == (600_000, 100_000)
    assert (cfg.eval.k, cfg.eval.nms_r1, cfg.eval.nms_r2) == (300, 0.7, 0.3)
    assert cfg.backbone.image_side == 720


# -- checkpoint container -----------------------------------------------------------------------

def _data():
    rng = np.random.default_rng(0)
    return C.CheckpointData("model.variant = t-lstm\n", {"vocab": ["<PAD>", "x"], "note": "ü"}, 42,
                            {"a": rng.normal(size=(2, 3)), "b.c": np.array(3.5), "e": np.zeros((0, 4))},
                            {"a": rng.normal(size=(2, 3))})


def test_container_roundtrip():
    blob = C.dumps(_data())
    back = C.loads(blob)
    ref = _data()
    assert (back.config_text, back.meta, back.iteration) == (ref.config_text, ref.meta, ref.iteration)
    for name in ref.tensors:
        assert back.tensors[name].tobytes() == ref.tensors[name].tobytes()
        assert back.tensors[name].shape == ref.tensors[name].shape
    assert back.velocity["a"].tobytes() == ref.velocity["a"].tobytes()
    assert C.dumps(back) == blob


@pytest.mark.parametrize("mutate", [
    lambda b: b"NOTACKPT" + b[8:],
    lambda b: b[:-1],
    lambda b: b[:40],
    lambda b: b[:100] + bytes([b[100] ^ 1]) + b[101:],
])
def test_corrupt_checkpoint(mutate):
    with pytest.raises(CheckpointError):
        C.loads(mutate(C.dumps(_data())))


def test_version_mismatch():
    import hashlib
    import struct

    blob = C.dumps(_data())
    body = blob[:8] + struct.pack("<I", 99) + blob[12:-32]
    with pytest.raises(CheckpointError, match="version"):
        C.loads(body + hashlib.sha256(body).digest())


def test_model_checkpoint_forward_bit_exact(small, tmp_path):
    cfg, corpus, model = small
    state = SgdState(0.01, 0.9)
    state.velocity = {"head.word.bias": np.arange(len(model.vocab), dtype=float)}
    path = tmp_path / "m.ckpt"
    C.save_checkpoint(path, model, K.to_text(cfg), 7, state)
    loaded = K.load_model(path)
    assert loaded.config == cfg and loaded.data.iteration == 7
    assert loaded.model.vocab == model.vocab
    assert loaded.data.velocity["head.word.bias"].tolist() == list(range(len(model.vocab)))
    assert evaluate(model, corpus).machine_lines() == evaluate(loaded.model, corpus).machine_lines()
    fm_a, fm_b = model.features(corpus[0].image), loaded.model.features(corpus[0].image)
    assert fm_a.tensor.data.tobytes() == fm_b.tensor.data.tobytes()


def test_load_parameter_mismatch(small, tmp_path):
    cfg, corpus, model = small
    path = tmp_path / "m.ckpt"
    C.save_checkpoint(path, model, K.to_text(cfg), 0)
    data = C.read_checkpoint(path)
    other = K.build_model(cfg.with_values(model={"variant": "baseline"}), model.vocab)
    with pytest.raises(CheckpointError):
        C.load_parameters(other, data)
    data.tensors["head.word.bias"] = np.zeros(3)
    with pytest.raises(CheckpointError):
        C.load_parameters(model, data)
    with pytest.raises(CheckpointError):
        C.read_checkpoint(tmp_path / "absent.ckpt")


def test_checkpoint_without_config_is_config_error(small, tmp_path):
    _, _, model = small
    path = tmp_path / "bare.ckpt"
    C.save_checkpoint(path, model, "model.bogus = 1\n", 0)
    with pytest.raises(ConfigError):
        K.load_model(path)

import numpy as np
import pytest

from accentex import autodiff as ad
from accentex.autodiff import Graph, Tensor
from accentex.model import (
    BLANK_ID,
    CheckpointError,
    FreezePolicy,
    ModelConfig,
    ParameterRegistry,
    aed_logits,
    apply_freeze_policy,
    build_model,
    ctc_logits,
    ctc_log_posteriors,
    encode,
    load_checkpoint,
    parameter_census,
    save_checkpoint,
    stack_frames,
)


@pytest.fixture
def config():
    return ModelConfig(vocab_size=8, feature_dim=6)


@pytest.fixture
def registry(config):
    return build_model(config, rng_seed=11)


def feats(rng, t=8, dim=6):
    return Tensor(rng.uniform(-1, 1, (t, dim)))


def test_build_is_deterministic(config):
    a = build_model(config, rng_seed=3)
    b = build_model(config, rng_seed=3)
    assert a.names() == b.names()
    for n in a.names():
        assert a[n].data.tobytes() == b[n].data.tobytes()
    c = build_model(config, rng_seed=4)
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a.names())


def test_invalid_head_split_rejected():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(vocab_size=8, feature_dim=6, model_dim=32, num_heads=5)


def test_vocab_floor_rejected():
    with pytest.raises(ValueError, match="vocab_size"):
        ModelConfig(vocab_size=2, feature_dim=6)


def test_parameter_count_matches_closed_form(config, registry):
    census = parameter_census(config)
    assert registry.param_count() == sum(census.values())
    # spot-check one component against the registry's own bookkeeping
    enc_block_size = sum(
        t.data.size for n, t in registry.items() if n.startswith("encoder.block1.")
    )
    assert census["encoder.blocks"] == config.num_encoder_blocks * enc_block_size


def test_name_stability_golden(registry):
    names = registry.names()
    assert names[:3] == [
        "encoder.input_proj.weight",
        "encoder.input_proj.bias",
        "encoder.block1.ln1.gain",
    ]
    assert "ctc_head.weight" in names
    assert "decoder.embedding.weight" in names
    assert names[-2:] == ["decoder.out_proj.weight", "decoder.out_proj.bias"]
    rebuilt = build_model(registry.config, rng_seed=99)
    assert rebuilt.names() == names


def test_frame_stack_length_arithmetic():
    x = np.arange(48.0).reshape(8, 6)
    assert stack_frames(x, 2).shape == (4, 12)
    assert stack_frames(x[:7], 2).shape == (4, 12)
    # tail group repeats the last frame
    assert np.array_equal(stack_frames(x[:7], 2)[-1, 6:], x[6])


def test_encode_output_shape(registry):
    rng = np.random.default_rng(0)
    out = encode(registry, feats(rng, t=8))
    assert out.hidden.data.shape == (4, registry.config.model_dim)
    assert out.length == 4
    out9 = encode(registry, feats(rng, t=9))
    assert out9.length == 5


def test_encode_zero_input_finite(registry):
    out = encode(registry, Tensor(np.zeros((6, 6))))
    assert np.all(np.isfinite(out.hidden.data))


def test_encode_eval_deterministic_and_dropout_free(registry):
    rng = np.random.default_rng(1)
    x = feats(rng)
    a = encode(registry, x).hidden.data
    b = encode(registry, x).hidden.data
    assert a.tobytes() == b.tobytes()
    # train mode with different rngs differs
    t1 = encode(registry, x, train_mode=True, rng=np.random.default_rng(5)).hidden.data
    t2 = encode(registry, x, train_mode=True, rng=np.random.default_rng(6)).hidden.data
    assert t1.tobytes() != t2.tobytes()


def test_encode_rejects_bad_inputs(registry):
    with pytest.raises(ad.ShapeError):
        encode(registry, Tensor(np.zeros((8, 5))))
    with pytest.raises(ad.ShapeError):
        encode(registry, Tensor(np.zeros((1, 6))))


def test_ctc_logits_shape_and_normalization(registry):
    rng = np.random.default_rng(2)
    enc = encode(registry, feats(rng))
    logits = ctc_logits(registry, enc)
    assert logits.data.shape == (4, registry.config.vocab_size)
    lp = ad.log_softmax(logits)
    assert np.allclose(np.exp(lp.data).sum(axis=1), 1.0)


def test_ctc_path_perturbation_sensitivity(registry):
    rng = np.random.default_rng(3)
    x = feats(rng)
    base = ctc_log_posteriors(registry, x).data.copy()

    bumped = registry.clone()
    bumped["encoder.block1.ff1.weight"].data[0, 0] += 0.05
    assert not np.allclose(ctc_log_posteriors(bumped, x).data, base)

    # decoder parameters are outside the encoder->CTC path
    untouched = registry.clone()
    untouched["decoder.block1.ff1.weight"].data[0, 0] += 0.05
    assert np.array_equal(ctc_log_posteriors(untouched, x).data, base)


def test_aed_logits_contract(registry):
    rng = np.random.default_rng(4)
    enc = encode(registry, feats(rng))
    out = aed_logits(registry, enc, [1, 2, 3])
    assert out.data.shape == (4, registry.config.vocab_size)
    empty = aed_logits(registry, enc, [])
    assert empty.data.shape == (1, registry.config.vocab_size)


def test_aed_rejects_reserved_symbols(registry):
    rng = np.random.default_rng(5)
    enc = encode(registry, feats(rng))
    with pytest.raises(ValueError):
        aed_logits(registry, enc, [BLANK_ID])
    with pytest.raises(ValueError):
        aed_logits(registry, enc, [registry.config.sos_eos_id])


def test_aed_causal_masking(registry):
    rng = np.random.default_rng(6)
    enc = encode(registry, feats(rng))
    labels = [1, 2, 3, 4, 5]
    full = aed_logits(registry, enc, labels).data
    permuted = aed_logits(registry, enc, [1, 2, 5, 4, 3]).data
    # rows 0..2 depend only on sos + labels[:2], unchanged under permuting the tail
    assert np.array_equal(full[:3], permuted[:3])
    assert not np.allclose(full[3:], permuted[3:])


def test_default_freeze_policy_blocks(config, registry):
    policy = FreezePolicy.default(config)
    frozen = apply_freeze_policy(registry, policy)
    frozen_blocks = {n.split(".")[1] for n in frozen if n.startswith("encoder.")}
    assert frozen_blocks == {"block2", "block3"}
    assert all(not n.startswith("encoder.block1.") for n in frozen)
    assert all(not n.startswith("encoder.block4.") for n in frozen)
    assert "ctc_head.weight" not in frozen
    assert "decoder.embedding.weight" not in frozen
    assert "decoder.out_proj.weight" not in frozen
    dec_frozen = {n for n in frozen if n.startswith("decoder.")}
    assert all(n.split(".")[1].startswith("block") for n in dec_frozen)


def test_empty_policy_freezes_nothing(registry):
    assert apply_freeze_policy(registry, FreezePolicy()) == set()
    assert registry.trainable_param_count() == registry.param_count()


def test_unknown_pattern_rejected(registry):
    with pytest.raises(KeyError, match="nope"):
        apply_freeze_policy(registry, FreezePolicy(("encoder.nope",)))


def test_trainable_fraction_matches_census(config, registry):
    apply_freeze_policy(registry, FreezePolicy.default(config))
    census = parameter_census(config)
    enc_block = census["encoder.blocks"] // config.num_encoder_blocks
    dec_block = census["decoder.blocks"] // config.num_decoder_blocks
    expected_frozen = (config.num_encoder_blocks - 2) * enc_block + config.num_decoder_blocks * dec_block
    total = sum(census.values())
    assert registry.trainable_param_count() == total - expected_frozen


def test_freeze_policy_json_round_trip(config):
    p = FreezePolicy.default(config)
    assert FreezePolicy.from_json(p.to_json()) == p


def test_snapshot_isolated_from_updates(registry):
    registry.take_snapshot()
    before = {n: a.copy() for n, a in registry.snapshot.items()}
    for _, t in registry.items():
        t.data += 1.0
    for n, a in registry.snapshot.items():
        assert np.array_equal(a, before[n])


def test_overlay_view(registry):
    new_w = Tensor(np.zeros_like(registry["ctc_head.bias"].data))
    view = registry.overlay({"ctc_head.bias": new_w})
    assert view["ctc_head.bias"] is new_w
    assert view["ctc_head.weight"] is registry["ctc_head.weight"]
    assert view.config is registry.config


def test_checkpoint_round_trip(tmp_path, registry):
    registry.take_snapshot()
    apply_freeze_policy(registry, FreezePolicy.default(registry.config))
    path = tmp_path / "model.ckpt"
    save_checkpoint(registry, path)
    loaded = load_checkpoint(path)
    assert loaded.names() == registry.names()
    for n in registry.names():
        assert loaded[n].data.tobytes() == registry[n].data.tobytes()
    assert loaded.freeze_mask == registry.freeze_mask
    for n in registry.names():
        assert loaded.snapshot[n].tobytes() == registry.snapshot[n].tobytes()
    assert loaded.config == registry.config


def test_checkpoint_detects_corruption(tmp_path, registry):
    path = tmp_path / "model.ckpt"
    save_checkpoint(registry, path)
    blob = bytearray(path.read_bytes())
    blob[200] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_detects_truncation(tmp_path, registry):
    path = tmp_path / "model.ckpt"
    save_checkpoint(registry, path)
    path.write_bytes(path.read_bytes()[:50])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_gradients_flow_through_full_model(registry):
    # one hybrid-style backward touches every trainable parameter group
    from accentex.losses import aed_loss, ctc_loss, hybrid_loss

    rng = np.random.default_rng(7)
    x = feats(rng)
    labels = [1, 2]
    with Graph() as g:
        enc = encode(registry, x)
        lp = ad.log_softmax(ctc_logits(registry, enc))
        loss = hybrid_loss(
            ctc_loss(lp, labels),
            aed_loss(aed_logits(registry, enc, labels), labels, 0.1, registry.config.sos_eos_id),
            0.3,
        )
    g.backward(loss)
    missing = [n for n, t in registry.items() if t.grad is None]
    assert missing == []


def test_model_finite_diff_on_tiny_model():
    cfg = ModelConfig(
        vocab_size=5, feature_dim=3, num_encoder_blocks=1, num_decoder_blocks=1,
        model_dim=8, ff_dim=12, num_heads=2, frame_stack=2, dropout=0.0,
    )
    reg = build_model(cfg, rng_seed=1)
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(-1, 1, (4, 3)))
    from accentex.losses import aed_loss, ctc_loss, hybrid_loss

    probe_name = "encoder.block1.attn.wq.weight"
    probe = reg[probe_name]

    def f(w):
        view = reg.overlay({probe_name: w})
        enc = encode(view, x)
        lp = ad.log_softmax(ctc_logits(view, enc))
        return hybrid_loss(
            ctc_loss(lp, [1, 2]),
            aed_loss(aed_logits(view, enc, [1, 2]), [1, 2], 0.1, cfg.sos_eos_id),
            0.3,
        )

    err = ad.finite_diff_check(f, Tensor(probe.data.copy()), step=1e-5)
    assert err < 1e-4

import logging

import numpy as np
import pytest
import torch

from functions.corpus import BOS, prompt_ids
from functions.errors import CheckpointFormatError, ConfigError, LayerError, SequenceTooLongError
from functions.model import (Intervention, ModelConfig, QuantSpec, answer_ranks, forward,
                             get_down_projection, greedy_decode, init_model, load_checkpoint,
                             named_tensors, parameter_count, quantize, quantize_tensor, rank_of_token,
                             save_checkpoint, set_down_projection, train)


def _tokens(vocab, bundle):
    record = bundle.retain[0]
    return prompt_ids(vocab, record.question)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(n_layers=0)


def test_init_is_deterministic(small_corpus):
    _, vocab = small_corpus
    config = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_mlp=32, vocab_size=vocab.size, seed=7)
    a, b = init_model(config), init_model(config)
    for name, tensor in named_tensors(a).items():
        assert torch.equal(tensor, named_tensors(b)[name])


def test_tensor_names_are_one_based(tiny_model):
    names = set(named_tensors(tiny_model))
    assert "layers.1.down_projection" in names
    assert "layers.2.up_projection" in names
    assert "layers.0.wq" not in names
    assert parameter_count(tiny_model) == sum(t.numel() for t in tiny_model.parameters())


def test_forward_shapes_and_residual_identity(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    ids = _tokens(vocab, bundle)
    logits, trace = forward(tiny_model, ids, capture=True)
    T, c = len(ids), vocab.size
    assert logits.shape == (T, c)
    assert trace.residual.shape == (3, T, 16)
    assert trace.downproj(1).shape == (T, 32)
    for layer in (1, 2):
        rebuilt = trace.residual_out(layer - 1) + trace.attn(layer) + trace.mlp(layer)
        assert np.allclose(rebuilt, trace.residual_out(layer), atol=1e-5)
        w = get_down_projection(tiny_model, layer)
        assert np.allclose(trace.downproj(layer) @ w, trace.mlp(layer), atol=1e-5)


def test_forward_is_causal(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    ids = _tokens(vocab, bundle)
    short, _ = forward(tiny_model, ids[:4])
    full, _ = forward(tiny_model, ids)
    assert np.allclose(short, full[:4], atol=1e-5)


def test_sequence_too_long(tiny_model):
    with pytest.raises(SequenceTooLongError):
        forward(tiny_model, [BOS] * 65)


def test_skip_layer_is_identity(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    ids = _tokens(vocab, bundle)
    _, trace = forward(tiny_model, ids, capture=True, intervention=Intervention(skip_layers=frozenset({2})))
    assert np.array_equal(trace.residual_out(2), trace.residual_out(1))


def test_empty_intervention_is_bitwise_noop(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    ids = _tokens(vocab, bundle)
    plain, _ = forward(tiny_model, ids)
    empty, _ = forward(tiny_model, ids, intervention=Intervention())
    assert np.array_equal(plain, empty)


def test_residual_shift_leaves_bos_alone(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    ids = _tokens(vocab, bundle)
    shift = np.full(16, 0.5, dtype=np.float32)
    _, base = forward(tiny_model, ids, capture=True)
    _, shifted = forward(tiny_model, ids, capture=True, intervention=Intervention(residual_shifts={1: shift}))
    assert np.array_equal(shifted.residual_out(1)[0], base.residual_out(1)[0])
    assert np.allclose(shifted.residual_out(1)[1:], base.residual_out(1)[1:] + shift, atol=1e-6)


def test_set_down_projection(tiny_model):
    w = np.ones((32, 16), dtype=np.float32)
    set_down_projection(tiny_model, 2, w)
    assert np.array_equal(get_down_projection(tiny_model, 2), w)
    with pytest.raises(LayerError):
        set_down_projection(tiny_model, 0, w)
    with pytest.raises(LayerError):
        set_down_projection(tiny_model, 3, w)
    with pytest.raises(LayerError):
        set_down_projection(tiny_model, 1, np.ones((16, 32)))


def test_rank_of_token():
    logits = np.array([0.1, 2.0, 0.5, 2.0])
    assert rank_of_token(logits, 1) == 1
    assert rank_of_token(logits, 2) == 3
    assert rank_of_token(logits, 0) == 4


def test_greedy_decode_limits(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    ids = _tokens(vocab, bundle)
    assert len(greedy_decode(tiny_model, ids, 5)) <= 5
    near_limit = ids + [ids[-1]] * (64 - len(ids) - 2)
    assert len(greedy_decode(tiny_model, near_limit, 10)) <= 2


def test_answer_ranks_length(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    record = bundle.retain[0]
    ranks = answer_ranks(tiny_model, vocab, record)
    assert len(ranks) == len(record.answer_tokens)
    assert all(1 <= r <= vocab.size for r in ranks)


def test_checkpoint_round_trip(tmp_path, tiny_model, small_corpus):
    bundle, vocab = small_corpus
    ids = _tokens(vocab, bundle)
    path = save_checkpoint(tiny_model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.config == tiny_model.config
    assert np.array_equal(forward(loaded, ids)[0], forward(tiny_model, ids)[0])


def test_checkpoint_corruption_detected(tmp_path, tiny_model):
    path = save_checkpoint(tiny_model, tmp_path / "m.ckpt")
    data = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(bytes(data[: len(data) // 2]))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(truncated)

    flipped = bytearray(data)
    flipped[-10] ^= 0xFF
    corrupt = tmp_path / "crc.ckpt"
    corrupt.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointFormatError, match="CRC"):
        load_checkpoint(corrupt)

    version = bytearray(data)
    version[4] = 9
    wrong = tmp_path / "version.ckpt"
    wrong.write_bytes(bytes(version))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(wrong)


def test_quantize_tensor_grid():
    w = np.array([-1.0, -0.3, 0.0, 0.26, 1.0], dtype=np.float32)
    values, scale = quantize_tensor(w, 8)
    assert scale == pytest.approx(1.0 / 127)
    assert np.max(np.abs(values - w)) <= scale / 2 + 1e-7
    values4, scale4 = quantize_tensor(w, 4)
    assert scale4 == pytest.approx(1.0 / 7)
    assert len(np.unique(values4)) <= 15


def test_quantize_returns_copy(tiny_model):
    before = get_down_projection(tiny_model, 1)
    qm = quantize(tiny_model, QuantSpec(bits=4))
    assert np.array_equal(get_down_projection(tiny_model, 1), before)
    assert not np.array_equal(get_down_projection(qm, 1), before)
    with pytest.raises(ConfigError):
        QuantSpec(bits=3)


def test_train_reduces_loss(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    records = bundle.retain[:3]
    result = train(tiny_model, vocab, records, epochs=60, lr=0.1, batch=3, seed=0)
    assert not result.diverged
    assert len(result.loss_curve) == 60
    assert result.loss_curve[-1] < result.loss_curve[0]
    # input model untouched
    assert result.checkpoint is not tiny_model


def test_greedy_decode_logs_length_stop(tiny_model, caplog):
    full = [BOS] * tiny_model.config.max_seq_len
    with caplog.at_level(logging.DEBUG, logger="functions.model"):
        assert greedy_decode(tiny_model, full, 5) == []
    assert "max_seq_len=64" in caplog.text


def test_corrupt_tensor_name_detected(tmp_path, tiny_model):
    data = bytearray(save_checkpoint(tiny_model, tmp_path / "m.ckpt").read_bytes())
    # the first tensor name starts right after the 36-byte header and its u16 length
    data[38] ^= 0xFF
    corrupt = tmp_path / "name.ckpt"
    corrupt.write_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError, match="UTF-8"):
        load_checkpoint(corrupt)


def test_checkpoint_stamp_round_trip(tmp_path, tiny_model, small_corpus):
    bundle, vocab = small_corpus
    ids = _tokens(vocab, bundle)
    stamp = {"config_hash": "ab" * 32, "seed": 5}
    plain = save_checkpoint(tiny_model, tmp_path / "plain.ckpt").read_bytes()
    path = save_checkpoint(tiny_model, tmp_path / "m.ckpt", stamp=stamp)
    data = path.read_bytes()
    assert data.startswith(plain) and data.endswith(b"LNST")
    loaded = load_checkpoint(path)
    assert loaded.stamp == stamp
    assert np.array_equal(forward(loaded, ids)[0], forward(tiny_model, ids)[0])
    assert load_checkpoint(tmp_path / "plain.ckpt").stamp == {}


def test_down_projection_input_ignores_own_weights(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    ids = _tokens(vocab, bundle)
    _, before = forward(tiny_model, ids, capture=True)
    set_down_projection(tiny_model, 1, np.full((32, 16), 0.3, dtype=np.float32))
    _, after = forward(tiny_model, ids, capture=True)
    assert np.array_equal(after.downproj(1), before.downproj(1))
    assert not np.allclose(after.mlp(1), before.mlp(1))


def test_train_is_deterministic(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    records = bundle.retain[:3]
    a = train(tiny_model, vocab, records, epochs=5, lr=0.1, batch=2, seed=4)
    b = train(tiny_model, vocab, records, epochs=5, lr=0.1, batch=2, seed=4)
    assert a.loss_curve == b.loss_curve
    for name, tensor in named_tensors(a.checkpoint).items():
        assert torch.equal(tensor, named_tensors(b.checkpoint)[name])


def test_zero_epochs_leaves_weights(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    result = train(tiny_model, vocab, bundle.retain[:3], epochs=0, lr=0.1, batch=2, seed=0)
    assert result.loss_curve == []
    for name, tensor in named_tensors(result.checkpoint).items():
        assert torch.equal(tensor, named_tensors(tiny_model)[name])


@pytest.mark.parametrize("bits", [4, 8])
def test_quantize_is_idempotent(tiny_model, bits):
    once = quantize(tiny_model, QuantSpec(bits=bits))
    twice = quantize(once, QuantSpec(bits=bits))
    for name, tensor in named_tensors(once).items():
        assert torch.equal(tensor, named_tensors(twice)[name])

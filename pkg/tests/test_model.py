import numpy as np
import pytest

from lhdff.core import GradientTape, Tensor, float64_mode
from lhdff.model import (LHDFF, DegenerateBatchError, EmbeddingConfigError, InputTooShortError, ModelConfig,
                         align_time, fuse, fused_ce_loss, load_embedding_table, masked_nll, pooled_length,
                         save_embedding_table)
from lhdff.text import EOS, SOS


@pytest.fixture(scope="module")
def model():
    return LHDFF(ModelConfig(vocab_size=12), np.random.default_rng(0)).eval()


# ---------------------------------------------------------------- encoder

def test_encoder_shapes_t64(model):
    out = model.encode(np.random.default_rng(1).normal(size=(1, 64, 64)), keep_intermediates=True)
    assert out.x_3.shape == (1, 8, 256)
    assert out.x_final.shape == (1, 4, 1024)
    assert out.x_high.shape == (1, 4, 128) and out.x_fusion.shape == (1, 4, 128)


def test_encoder_too_short(model):
    with pytest.raises(InputTooShortError):
        model.encode(np.zeros((1, 15, 64)))


def test_zero_input_gives_constant_rows(model):
    out = model.encode(np.zeros((1, 64, 64)))
    rows = out.x_high.data[0]
    np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))


def test_low_switch_makes_fusion_equal_high(model):
    mel = np.random.default_rng(2).normal(size=(2, 48, 64))
    out = model.encode(mel, mode="high_only")
    np.testing.assert_array_equal(out.x_fusion.data, out.x_high.data)


def test_pooled_length():
    assert pooled_length(64, 4) == 4 and pooled_length(64, 3) == 8
    assert pooled_length(37, 4) == 2 and pooled_length(16, 4) == 1


def test_align_time_cases():
    x = np.arange(8 * 3, dtype=float).reshape(1, 8, 3)
    out = align_time(Tensor(x), 4).data
    np.testing.assert_allclose(out[0], (x[0, 0::2] + x[0, 1::2]) / 2)
    np.testing.assert_array_equal(align_time(Tensor(x), 8).data, x)
    short = align_time(Tensor(x[:, :3]), 4).data
    np.testing.assert_array_equal(short[0, :3], x[0, :3])
    assert np.all(short[0, 3] == 0)


def test_parameter_counts(model):
    report = model.count_parameters()
    assert report.count("encoder.fc_final.") == 1024 * 512 + 1024 == 525_312
    assert report.count("encoder.proj_high.") == 1024 * 128 + 128 == 131_200
    assert report.count("encoder.blocks.0.conv1.") == 64 * 1 * 9 + 64 == 640
    assert report.total == sum(p.size for p in model.parameters())
    assert "total" in report.format()


# ---------------------------------------------------------------- decoder

def _memory(model, seed=3):
    return model.encode(np.random.default_rng(seed).normal(size=(1, 32, 64)))


def test_single_sos_is_normalized(model):
    dist = model.decode(np.array([[SOS]]), _memory(model))
    assert dist.p_fusion.shape == (1, 1, 12)
    assert np.exp(dist.p_td1.data).sum() == pytest.approx(1.0, abs=1e-5)


def test_duplicated_decoders_double(model):
    twin = LHDFF(ModelConfig(vocab_size=12), np.random.default_rng(0)).eval()
    twin.td_high.load_state_dict(twin.td_fusion.state_dict())
    mem = _memory(twin)
    mem.x_fusion = mem.x_high
    dist = twin.decode(np.array([[SOS, 5, 6]]), mem)
    np.testing.assert_array_equal(dist.p_td1.data, dist.p_td2.data)
    np.testing.assert_array_equal(dist.p_fusion.data, 2 * dist.p_td1.data)


def test_causal_prefix_unchanged(model):
    mem = _memory(model)
    a = model.decode(np.array([[SOS, 4, 5, 6, 7]]), mem).p_fusion.data
    b = model.decode(np.array([[SOS, 4, 5, 9, 7]]), mem).p_fusion.data
    np.testing.assert_array_equal(a[:, :3], b[:, :3])
    assert not np.array_equal(a[:, 3:], b[:, 3:])


def test_token_out_of_range(model):
    with pytest.raises(IndexError):
        model.decode(np.array([[SOS, 12]]), _memory(model))


def test_uniform_branches_loss():
    m = 9
    y = np.array([[4, 5, EOS], [6, EOS, 0]])
    with float64_mode():
        loss = fused_ce_loss(fuse(Tensor(np.zeros((2, 3, m))), Tensor(np.zeros((2, 3, m)))), y)
    assert loss.item() == pytest.approx(2 * np.log(m), rel=1e-12)


def test_confident_plus_uniform_loss():
    m = 7
    y = np.array([[4, 5, 2]])
    confident = np.full((1, 3, m), -1e4)
    confident[0, np.arange(3), y[0]] = 0.0
    with float64_mode():
        loss = fused_ce_loss(fuse(Tensor(confident), Tensor(np.zeros((1, 3, m)))), y)
    assert loss.item() == pytest.approx(np.log(m), rel=1e-12)


def test_fused_loss_is_sum_of_branch_losses():
    rng = np.random.default_rng(4)
    with float64_mode():
        a, b = Tensor(rng.normal(0, 2, (3, 4, 10))), Tensor(rng.normal(0, 2, (3, 4, 10)))
        y = rng.integers(1, 10, (3, 4))
        y[2] = 0
        dist = fuse(a, b)
        total = masked_nll(dist.p_td1, y).item() + masked_nll(dist.p_td2, y).item()
        assert abs(fused_ce_loss(dist, y).item() - total) <= 1e-6


def test_all_pad_batch():
    with pytest.raises(DegenerateBatchError):
        fused_ce_loss(fuse(Tensor(np.zeros((1, 2, 5))), None), np.zeros((1, 2), dtype=int))


# ---------------------------------------------------------------- embedding modes

def _train_steps(model, n):
    from lhdff.core import AdamState, adam_step
    rng = np.random.default_rng(5)
    state = AdamState()
    params = dict(model.named_parameters())
    mel = rng.normal(size=(1, 16, 64))
    tokens = np.array([[SOS, 4, 5, EOS]])
    for _ in range(n):
        with GradientTape() as tape:
            loss = fused_ce_loss(model(mel, None, tokens[:, :-1]), tokens[:, 1:])
        tape.backward(loss)
        adam_step(params, state, 1e-3)
        model.zero_grad()


def test_frozen_embedding_unchanged():
    m = LHDFF(ModelConfig(vocab_size=8, dropout=0.0), np.random.default_rng(0))
    before = m.embedding.weight.data.copy()
    _train_steps(m, 10)
    np.testing.assert_array_equal(m.embedding.weight.data, before)


def test_trainable_embedding_changes():
    m = LHDFF(ModelConfig(vocab_size=8, dropout=0.0), np.random.default_rng(0))
    m.embedding.set_mode("trainable")
    before = m.embedding.weight.data.copy()
    _train_steps(m, 1)
    assert not np.array_equal(m.embedding.weight.data, before)


def test_imported_embedding(tmp_path):
    table = np.random.default_rng(6).normal(size=(8, 128)).astype(np.float32)
    save_embedding_table(tmp_path / "w.wemb", table)
    np.testing.assert_array_equal(load_embedding_table(tmp_path / "w.wemb"), table)
    m = LHDFF(ModelConfig(vocab_size=8), np.random.default_rng(0))
    m.embedding.set_mode("imported", tmp_path / "w.wemb")
    np.testing.assert_array_equal(m.embedding.weight.data, table)
    assert not m.embedding.weight.requires_grad


def test_imported_embedding_wrong_shape(tmp_path):
    save_embedding_table(tmp_path / "w.wemb", np.zeros((8, 64), np.float32))
    m = LHDFF(ModelConfig(vocab_size=8), np.random.default_rng(0))
    with pytest.raises(EmbeddingConfigError):
        m.embedding.set_mode("imported", tmp_path / "w.wemb")


def test_fusion_only_leaves_high_decoder_untouched():
    m = LHDFF(ModelConfig(vocab_size=8, dropout=0.0), np.random.default_rng(0))
    tokens = np.array([[SOS, 4, EOS]])
    with GradientTape() as tape:
        loss = fused_ce_loss(m(np.zeros((1, 16, 64)), None, tokens[:, :-1], "fusion_only"), tokens[:, 1:])
    tape.backward(loss)
    assert m.td_fusion.parameters()[0].grad is not None
    assert all(p.grad is None for p in m.td_high.parameters())

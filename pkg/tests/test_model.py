import numpy as np
import pytest
import torch

from monoscale.model import (
    BASE_CONV_SPECS,
    CheckpointError,
    CnnConfig,
    DistanceCNN,
    LstmConfig,
    ModelCheckpoint,
    NumericalError,
    build_model,
    cnn_forward,
    config_fingerprint,
    conv_param_counts,
    fc_param_counts,
    flatten_width,
    lstm_forward,
    param_count,
    stage_shapes,
)

SMALL = CnnConfig(conv_specs=((5, 2, 8), (3, 1, 16)), input_shape=(16, 32, 6), fc_widths=(32, 1), dropout_rate=0.0)


def test_default_shapes_and_counts():
    cfg = CnnConfig()
    assert stage_shapes(cfg) == [(120, 280), (60, 140), (30, 70), (15, 35), (7, 17), (3, 8)]
    assert flatten_width(cfg) == 12288
    counts = conv_param_counts(cfg)
    assert counts[0] == 23264
    c_in, expected = 6, 0
    for k, _, f in BASE_CONV_SPECS:
        expected += k * k * c_in * f + f
        c_in = f
    assert sum(counts) == expected
    assert fc_param_counts(cfg) == [6291968, 513]
    assert param_count(cfg) == expected + 6291968 + 513


def test_param_count_matches_torch():
    for cfg, lstm in [(SMALL, None), (SMALL, LstmConfig("bidirectional", 5, 7)), (SMALL, LstmConfig("unidirectional", 4, 3))]:
        model = build_model(cfg, lstm)
        assert param_count(cfg, lstm) == sum(p.numel() for p in model.parameters())


def test_zero_layer_config():
    assert param_count(CnnConfig(conv_specs=(), fc_widths=())) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        CnnConfig(conv_specs=((5, 1, 8),))
    with pytest.raises(ValueError):
        CnnConfig(fc_widths=(512, 2))
    with pytest.raises(ValueError):
        LstmConfig("bidirectional", 4)
    with pytest.raises(ValueError):
        LstmConfig("unidirectional", 0)


@pytest.mark.slow
def test_full_model_batch_of_two():
    model = build_model(CnnConfig(), seed=0)
    d, e = cnn_forward(model, np.random.default_rng(0).random((2, 120, 280, 6), dtype=np.float32))
    assert d.shape == (2,) and e.shape == (2, 512)
    assert torch.isfinite(d).all()


def test_conv_preserves_spatial_size():
    model = build_model(SMALL)
    x = torch.zeros(1, 6, 16, 32)
    for conv in model.convs:
        y = conv(x)
        assert y.shape[2:] == x.shape[2:]
        x = model.pool(y)


def test_wrong_input_shape():
    model = build_model(SMALL)
    with pytest.raises(ValueError):
        cnn_forward(model, np.zeros((1, 16, 31, 6)))


def test_non_finite_names_layer():
    model = build_model(SMALL)
    x = np.zeros((1, 16, 32, 6), np.float32)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="conv1"):
        cnn_forward(model, x)


def test_eval_pure_and_dropout_zero_equals_eval():
    model = build_model(SMALL, seed=3)
    x = np.random.default_rng(1).random((4, 16, 32, 6), dtype=np.float32)
    a = cnn_forward(model, x, "eval")[0]
    b = cnn_forward(model, x, "eval")[0]
    assert torch.equal(a, b)
    c = cnn_forward(model, x, "train")[0].detach()
    assert torch.equal(a, c)


def test_dropout_active_only_in_train():
    cfg = CnnConfig(conv_specs=SMALL.conv_specs, input_shape=SMALL.input_shape, fc_widths=SMALL.fc_widths, dropout_rate=0.5)
    model = build_model(cfg, seed=3)
    x = np.random.default_rng(1).random((4, 16, 32, 6), dtype=np.float32)
    torch.manual_seed(0)
    assert not torch.equal(cnn_forward(model, x, "train")[0], cnn_forward(model, x, "eval")[0])


def test_same_seed_same_init():
    a, b = build_model(SMALL, seed=5), build_model(SMALL, seed=5)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_gradient_check_finite_differences():
    torch.manual_seed(0)
    model = DistanceCNN(SMALL).double()
    model.eval()
    x = torch.rand(3, 16, 32, 6, dtype=torch.float64)
    y = torch.rand(3, dtype=torch.float64)

    def loss() -> torch.Tensor:
        return ((model(x)[0] - y) ** 2).mean()

    model.zero_grad()
    loss().backward()
    params = list(model.parameters())
    rng = np.random.default_rng(0)
    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            p = params[rng.integers(len(params))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss().item()
            p[idx] = orig - eps
            down = loss().item()
            p[idx] = orig
            num = (up - down) / (2 * eps)
            ana = p.grad[idx].item()
            denom = max(abs(num), abs(ana), 1e-7)
            worst = max(worst, abs(num - ana) / denom)
    assert worst < 1e-3


def test_lstm_window_one_and_length_mismatch():
    model = build_model(SMALL, LstmConfig("unidirectional", 1, 8), seed=0)
    out = lstm_forward(model, np.ones((1, 32)))
    assert np.isfinite(out)
    with pytest.raises(ValueError):
        lstm_forward(model, np.ones((2, 32)))


def test_bidirectional_sensitivity_and_order():
    model = build_model(SMALL, LstmConfig("bidirectional", 19, 16), seed=1)
    emb = np.random.default_rng(0).normal(size=(19, 32))
    base = lstm_forward(model, emb)
    for k in range(19):
        e = emb.copy()
        e[k] += 1.0
        assert lstm_forward(model, e) != base
    perm = emb[np.random.default_rng(1).permutation(19)]
    assert lstm_forward(model, perm) != base


def test_unidirectional_ignores_nothing_before_target():
    model = build_model(SMALL, LstmConfig("unidirectional", 5, 16), seed=1)
    emb = np.random.default_rng(0).normal(size=(5, 32))
    base = lstm_forward(model, emb)
    e = emb.copy()
    e[0] += 1.0
    assert lstm_forward(model, e) != base


def test_lstm_full_forward_matches_embeddings():
    model = build_model(SMALL, LstmConfig("bidirectional", 3, 8), seed=2)
    model.eval()
    w = torch.rand(2, 3, 16, 32, 6)
    with torch.no_grad():
        full = model(w)
        _, emb = model.cnn(w.reshape(6, 16, 32, 6))
        via = model.forward_embeddings(emb.reshape(2, 3, -1))
    assert torch.allclose(full, via)


def test_checkpoint_round_trip(tmp_path):
    model = build_model(SMALL, LstmConfig("bidirectional", 3, 8), seed=4)
    ckpt = ModelCheckpoint.from_model(model, step=17, extra={"note": "x"})
    ckpt.save(tmp_path / "c.npz")
    back = ModelCheckpoint.load(tmp_path / "c.npz")
    assert back.step == 17 and back.kind == "lstm" and back.extra == {"note": "x"}
    assert back.param_fingerprint() == ckpt.param_fingerprint()
    assert back.config_fingerprint == config_fingerprint(SMALL, LstmConfig("bidirectional", 3, 8))
    m2 = back.to_model()
    x = torch.rand(1, 3, 16, 32, 6)
    model.eval()
    with torch.no_grad():
        assert torch.equal(model(x), m2(x))
    # Saving twice gives identical bytes.
    ckpt.save(tmp_path / "d.npz")
    assert (tmp_path / "c.npz").read_bytes() == (tmp_path / "d.npz").read_bytes()


def test_checkpoint_fingerprint_mismatch(tmp_path):
    import json

    ckpt = ModelCheckpoint.from_model(build_model(SMALL))
    ckpt.save(tmp_path / "c.npz")
    with np.load(tmp_path / "c.npz") as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays["__meta__"]))
    meta["config_fingerprint"] = "0" * 16
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(CheckpointError, match="fingerprint"):
        ModelCheckpoint.load(tmp_path / "bad.npz")
    meta["format_version"] = 99
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(tmp_path / "v.npz", **arrays)
    with pytest.raises(CheckpointError, match="version"):
        ModelCheckpoint.load(tmp_path / "v.npz")


def test_checkpoint_param_mismatch():
    ckpt = ModelCheckpoint.from_model(build_model(SMALL))
    other = CnnConfig(conv_specs=((3, 1, 8), (3, 1, 16)), input_shape=(16, 32, 6), fc_widths=(32, 1))
    with pytest.raises(CheckpointError):
        ModelCheckpoint(ckpt.params, other).to_model()

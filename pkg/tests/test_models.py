import numpy as np
import pytest

from helpers import model_param_grad_check
from streamanchor.anchors import TaskKind
from streamanchor.data import LabeledSequence
from streamanchor.losses import LossSpec
from streamanchor.models import (ArchitectureError, CheckpointError, ModelKind, build,
                                 default_model_config, load_checkpoint, param_count,
                                 receptive_field, save_checkpoint, solve_dilations)

KINDS = list(ModelKind)


def model(kind, **kw):
    return build(default_model_config(kind, **kw))


def features(kind, T, seed=0, batch=None):
    D = default_model_config(kind).input_dim
    shape = (T, D) if batch is None else (batch, T, D)
    return np.random.default_rng(seed).standard_normal(shape)


def test_sizes():
    assert param_count(model("SOD_LSTM")) == 4 * 128 * (40 + 128) + 4 * 128 + (128 * 32 + 32) + (32 * 2 + 2)
    assert param_count(model("SOD_LSTM")) == 90_722
    assert abs(param_count(model("KWS_CNN")) - 12_000) <= 0.15 * 12_000
    assert abs(param_count(model("MTD_GRU")) - 13_000) <= 0.15 * 13_000


def test_receptive_fields():
    assert receptive_field(model("KWS_CNN")) == 153
    assert receptive_field(model("SOD_LSTM"), seq_len=77) == 77
    assert receptive_field(model("MTD_GRU"), seq_len=12) == 12


def test_cnn_receptive_field_empirically():
    m = model("KWS_CNN", seed=3)
    base = features("KWS_CNN", 200, seed=1)
    out = m.predict(base)
    bumped = base.copy()
    bumped[10] += 5.0
    changed = np.flatnonzero(m.predict(bumped) != out)
    assert changed.min() == 10 and changed.max() == 10 + 153 - 1


def test_solve_dilations():
    d = solve_dilations(153, 5)
    assert len(d) == 7 and 1 + 4 * sum(d) == 153
    with pytest.raises(ArchitectureError):
        solve_dilations(154, 5)


def test_build_reports_missed_targets():
    with pytest.raises(ArchitectureError, match="receptive field 149"):
        model("KWS_CNN", dilations=(1, 1, 2, 4, 6, 10, 13))
    with pytest.raises(ArchitectureError, match="parameter count"):
        model("MTD_GRU", hidden=16)


@pytest.mark.parametrize("kind", KINDS)
def test_output_shape_and_range(kind):
    m = model(kind)
    assert m.predict(features(kind, 1)).shape == (1,)
    p = m.predict(features(kind, 50, batch=3) * 4)
    assert p.shape == (3, 50) and np.all((p >= 0) & (p <= 1))


@pytest.mark.parametrize("kind", KINDS)
def test_causality_exact(kind):
    m = model(kind, seed=2)
    x = features(kind, 60, seed=5)
    base = m.predict(x)
    for t in (0, 17, 58):
        y = x.copy()
        y[t + 1:] += np.random.default_rng(t).standard_normal(y[t + 1:].shape)
        assert np.array_equal(m.predict(y)[:t + 1], base[:t + 1])


@pytest.mark.parametrize("kind", KINDS)
def test_streaming_equivalence(kind):
    m = model(kind, seed=4)
    x = features(kind, 97, seed=6, batch=2)
    full = m.predict(x)
    state, parts, start = None, [], 0
    for size in (1, 13, 40, 2, 41):
        out, state = m.stream(x[:, start:start + size], state)
        parts.append(out)
        start += size
    chunked = np.concatenate(parts, axis=1)
    if kind is ModelKind.KWS_CNN:
        assert np.array_equal(chunked, full)
    else:
        assert np.max(np.abs(chunked - full)) < 1e-9


@pytest.mark.parametrize("kind", KINDS)
def test_deterministic(kind):
    x = features(kind, 30)
    a, b = model(kind, seed=9), model(kind, seed=9)
    assert np.array_equal(a.get_flat(), b.get_flat())
    assert a.predict(x).tobytes() == b.predict(x).tobytes()
    assert not np.array_equal(a.get_flat(), model(kind, seed=10).get_flat())


def test_lstm_forget_bias_and_zero_biases():
    m = model("SOD_LSTM")
    biases = {k: v.data for k, v in m.params.items() if k.endswith("b") or "bias" in k}
    assert biases
    H = 128
    lstm_b = [v for v in biases.values() if v.size == 4 * H][0]
    assert np.all(lstm_b[H:2 * H] == 1.0)
    assert np.count_nonzero(lstm_b) == H


def test_input_dim_mismatch():
    with pytest.raises(ValueError):
        model("KWS_CNN").predict(np.zeros((10, 3)))


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip(kind, tmp_path):
    m = model(kind, seed=7)
    path = save_checkpoint(m, tmp_path / "m.asck")
    back = load_checkpoint(path)
    assert back.config == m.config
    x = features(kind, 25)
    assert back.predict(x).tobytes() == m.predict(x).tobytes()


def test_checkpoint_errors(tmp_path):
    path = save_checkpoint(model("MTD_GRU"), tmp_path / "m.asck")
    blob = path.read_bytes()
    (tmp_path / "short.asck").write_bytes(blob[:-9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.asck")
    (tmp_path / "bad.asck").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.asck")
    (tmp_path / "long.asck").write_bytes(blob + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long.asck")


def tiny_batch(kind, seed, n=3):
    task = {ModelKind.KWS_CNN: TaskKind.KWS, ModelKind.MTD_GRU: TaskKind.MTD,
            ModelKind.SOD_LSTM: TaskKind.SOD}[kind]
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(n):
        T = int(rng.integers(6, 14))
        y = np.zeros(T, dtype=np.int8)
        if i % 2 == 0:
            y[2:5] = 1
        seqs.append(LabeledSequence(features(kind, T, seed + i), y, 10.0, task, f"s{i}"))
    return seqs, task


@pytest.mark.parametrize("kind", KINDS)
def test_model_loss_gradients_spot_check(kind):
    m = model(kind, seed=1)
    seqs, task = tiny_batch(kind, 0)
    errs = model_param_grad_check(m, seqs, LossSpec("SAL"), task, n_coords=10, seed=0)
    assert errs.max() < 1e-4

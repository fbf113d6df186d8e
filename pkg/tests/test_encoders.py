import numpy as np
import pytest

from ataml.autodiff import ContractViolation, ShapeError, Tensor, grad, ops
from ataml.encoders import (
    OOV_ID,
    PAD_ID,
    EmbeddingTable,
    StateSequence,
    TcnConfig,
    bilstm_forward,
    embed,
    init_bilstm,
    init_tcn,
    load_embeddings,
    tcn_forward,
)


def _params(raw):
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def _seq(x):
    x = np.asarray(x, dtype=np.float64)
    return StateSequence(Tensor(x, requires_grad=True), np.ones(x.shape[:2], dtype=bool))


def test_embed_pad_is_zero_and_masked():
    table = np.eye(4)
    s = embed(np.array([PAD_ID]), table)
    np.testing.assert_array_equal(s.states.data, np.zeros((1, 1, 4)))
    assert s.mask.tolist() == [[False]]


def test_embed_gathers_rows():
    table = np.eye(4)
    s = embed(np.array([3, 2, 3]), table)
    np.testing.assert_array_equal(s.states.data[0, 0], [0, 0, 0, 1])
    np.testing.assert_array_equal(s.states.data[0, 0], s.states.data[0, 2])


def test_embed_rejects_out_of_range_ids():
    with pytest.raises(ContractViolation):
        embed(np.array([5]), np.eye(4))


def test_random_table_zeroes_pad_row():
    t = EmbeddingTable.random(["a", "b"], dim=5, seed=1)
    assert np.all(t.matrix[PAD_ID] == 0)
    assert np.all(np.abs(t.matrix) <= 0.05)
    assert t.ids(["a", "zzz"]) == [t.vocab["a"], OOV_ID]


def test_load_embeddings_skips_malformed_lines(tmp_path):
    p = tmp_path / "vec.txt"
    p.write_text("cat 0.1 0.2 0.3\ndog 0.4 0.5\nbird x y z\nfish 1 2 3\n\n", encoding="utf-8")
    table, skipped = load_embeddings(p)
    assert table.dim == 3
    assert skipped == 3  # wrong width, non-numeric, blank
    np.testing.assert_allclose(table.matrix[table.vocab["fish"]], [1, 2, 3])
    assert "dog" not in table.vocab


def test_tcn_receptive_field_formula():
    assert TcnConfig().receptive_field() == 13
    assert TcnConfig(dilations=[1, 2]).receptive_field() == 7


def test_tcn_zero_input_zero_output():
    cfg = TcnConfig(channels=6)
    raw = init_tcn(4, cfg, np.random.default_rng(0))
    out = tcn_forward(_seq(np.zeros((2, 9, 4))), _params(raw), cfg)
    assert np.all(out.states.data == 0)
    assert out.states.shape == (2, 9, 6)


def _gradient_support(cfg, d_in, steps, t_out, rng):
    raw = init_tcn(d_in, cfg, rng)
    seq = _seq(rng.normal(size=(1, steps, d_in)))
    out = tcn_forward(seq, _params(raw), cfg)
    (g,) = grad(ops.sum(out.states[0, t_out, :]), [seq.states])
    return np.flatnonzero(np.any(g.data[0] != 0, axis=-1))


def test_tcn_causality_on_random_sequences():
    rng = np.random.default_rng(7)
    cfg = TcnConfig(channels=5)
    for _ in range(100):
        steps = int(rng.integers(2, 20))
        t = int(rng.integers(0, steps))
        support = _gradient_support(cfg, 3, steps, t, rng)
        assert support.max() <= t


def test_tcn_receptive_field_measured_by_gradient_support():
    support = _gradient_support(TcnConfig(channels=5), 3, 40, 35, np.random.default_rng(1))
    assert support.max() - support.min() + 1 == 13


def test_tcn_future_perturbation_leaves_past_bitwise_unchanged():
    rng = np.random.default_rng(2)
    cfg = TcnConfig(channels=4)
    params = _params(init_tcn(3, cfg, rng))
    x = rng.normal(size=(1, 12, 3))
    y = x.copy()
    y[0, 8] += 1.0
    a = tcn_forward(_seq(x), params, cfg).states.data
    b = tcn_forward(_seq(y), params, cfg).states.data
    assert a[0, :8].tobytes() == b[0, :8].tobytes()
    assert not np.array_equal(a[0, 8:], b[0, 8:])


def test_tcn_masked_positions_are_zero_with_zero_gradient():
    rng = np.random.default_rng(3)
    cfg = TcnConfig(channels=4)
    params = _params(init_tcn(3, cfg, rng))
    table = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    ids = np.array([[2, 3, 4, PAD_ID, PAD_ID]])
    out = tcn_forward(embed(ids, table), params, cfg)
    assert np.all(out.states.data[0, 3:] == 0)
    (g,) = grad(ops.sum(ops.mul(out.states, out.states)), [table])
    assert np.all(g.data[PAD_ID] == 0)


def test_tcn_channel_mismatch():
    cfg = TcnConfig(channels=4)
    params = _params(init_tcn(3, cfg, np.random.default_rng(0)))
    with pytest.raises(ShapeError):
        tcn_forward(_seq(np.zeros((1, 5, 7))), params, cfg)


def test_tcn_dropout_needs_rng_and_only_acts_in_train_mode():
    cfg = TcnConfig(channels=4)
    params = _params(init_tcn(3, cfg, np.random.default_rng(0)))
    seq = _seq(np.random.default_rng(1).normal(size=(1, 6, 3)))
    with pytest.raises(ContractViolation):
        tcn_forward(seq, params, cfg, train_mode=True)
    a = tcn_forward(seq, params, cfg).states.data
    b = tcn_forward(seq, params, cfg, train_mode=True, rng=np.random.default_rng(0)).states.data
    assert not np.array_equal(a, b)


def test_tcn_residual_projection_only_when_dims_differ():
    rng = np.random.default_rng(0)
    assert "tcn.proj0.w" in init_tcn(3, TcnConfig(channels=4), rng)
    assert "tcn.proj0.w" not in init_tcn(4, TcnConfig(channels=4), rng)
    assert not any(k.startswith("tcn.proj") for k in init_tcn(3, TcnConfig(channels=4, residual=False), rng))


# ---------------------------------------------------------------- BiLSTM


def _np_lstm(x, wx, wh, b):
    """Straight numpy LSTM over one sequence (T, d)."""
    hidden = wh.shape[0]
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    out = []
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    for xt in x:
        z = xt @ wx + h @ wh + b
        i, f, g, o = sig(z[:hidden]), sig(z[hidden : 2 * hidden]), np.tanh(z[2 * hidden : 3 * hidden]), sig(z[3 * hidden :])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def test_bilstm_matches_reference_trace():
    rng = np.random.default_rng(4)
    raw = init_bilstm(3, 4, rng)
    for k in raw:
        raw[k] = raw[k] + rng.normal(scale=0.3, size=raw[k].shape)
    x = rng.normal(size=(2, 5, 3))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    x[1, 3:] = 0
    out = bilstm_forward(StateSequence(Tensor(x), mask), _params(raw)).states.data
    for r, n in enumerate(mask.sum(1)):
        fw = _np_lstm(x[r, :n], raw["lstm.fw.wx"], raw["lstm.fw.wh"], raw["lstm.fw.b"])
        bw = _np_lstm(x[r, :n][::-1], raw["lstm.bw.wx"], raw["lstm.bw.wh"], raw["lstm.bw.b"])[::-1]
        np.testing.assert_allclose(out[r, :n], np.concatenate([fw, bw], axis=-1), atol=1e-12)
        assert np.all(out[r, n:] == 0)


def test_bilstm_saturated_gates_by_hand():
    hidden = 2
    raw = {}
    for d in ("fw", "bw"):
        raw[f"lstm.{d}.wx"] = np.zeros((1, 4 * hidden))
        raw[f"lstm.{d}.wh"] = np.zeros((hidden, 4 * hidden))
        # input gate open, forget gate shut, candidate 0.5 after tanh, output open
        b = np.concatenate([np.full(hidden, 50.0), np.full(hidden, -50.0), np.full(hidden, np.arctanh(0.5)), np.full(hidden, 50.0)])
        raw[f"lstm.{d}.b"] = b
    out = bilstm_forward(_seq(np.zeros((1, 3, 1))), _params(raw)).states.data
    np.testing.assert_allclose(out, np.full((1, 3, 4), np.tanh(0.5)), atol=1e-12)


def test_bilstm_single_step_sees_same_token_both_ways():
    rng = np.random.default_rng(5)
    raw = init_bilstm(3, 4, rng)
    raw["lstm.bw.wx"] = raw["lstm.fw.wx"].copy()
    raw["lstm.bw.wh"] = raw["lstm.fw.wh"].copy()
    out = bilstm_forward(_seq(rng.normal(size=(1, 1, 3))), _params(raw)).states.data
    np.testing.assert_array_equal(out[0, 0, :4], out[0, 0, 4:])


def test_bilstm_zero_fixed_point():
    raw = init_bilstm(3, 4, np.random.default_rng(0))
    for d in ("fw", "bw"):
        raw[f"lstm.{d}.b"] = np.zeros_like(raw[f"lstm.{d}.b"])
    out = bilstm_forward(_seq(np.zeros((1, 4, 3))), _params(raw)).states.data
    assert np.all(out == 0)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_grads, max_rel_error, numeric_grad
from mcnn import layers as L
from mcnn import tensor as T
from mcnn.errors import (
    ConfigError,
    ContractError,
    EmptySequenceError,
    SequenceTooShortError,
    VocabError,
)
from mcnn.tensor import Tensor

SEEDS = range(20)


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


# oracles ------------------------------------------------------------------

def gru_oracle(cell, xs, h0):
    """Scalar-loop GRU recurrence, independent of the tensor code."""
    W = {g: getattr(cell, f"W_{g}").data for g in "zrh"}
    U = {g: getattr(cell, f"U_{g}").data for g in "zrh"}
    b = {g: getattr(cell, f"b_{g}").data for g in "zrh"}
    hdim = cell.hidden_dim
    h = list(h0)
    for x in xs:
        def pre(g, state):
            return [sum(x[i] * W[g][i, j] for i in range(len(x)))
                    + sum(state[i] * U[g][i, j] for i in range(hdim)) + b[g][j]
                    for j in range(hdim)]
        z = [sigmoid(v) for v in pre("z", h)]
        r = [sigmoid(v) for v in pre("r", h)]
        rh = [r[i] * h[i] for i in range(hdim)]
        cand = [math.tanh(sum(x[i] * W["h"][i, j] for i in range(len(x)))
                          + sum(rh[i] * U["h"][i, j] for i in range(hdim)) + b["h"][j])
                for j in range(hdim)]
        h = [(1 - z[j]) * h[j] + z[j] * cand[j] for j in range(hdim)]
    return np.array(h)


def attention_oracle(x, attn, mask):
    """Dense per-head loop over the attention formula."""
    n, dim = x.shape
    dh = dim // attn.heads

    def proj(d):
        return x @ d.weight.data + d.bias.data

    q, k, v = proj(attn.q), proj(attn.k), proj(attn.v)
    ctx = np.zeros((n, dim))
    for head in range(attn.heads):
        s = slice(head * dh, (head + 1) * dh)
        for i in range(n):
            scores = np.array([q[i, s] @ k[j, s] / math.sqrt(dh) if mask[j] else -np.inf
                               for j in range(n)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            ctx[i, s] = w @ v[:, s]
    return ctx @ attn.out.weight.data + attn.out.bias.data


# embedding ----------------------------------------------------------------

class TestEmbedding:
    def test_pad_rows_are_zero(self):
        table = L.Embedding(5, 3, np.random.default_rng(0))
        assert np.array_equal(L.embed([0, 0], table).data, np.zeros((2, 3)))

    def test_lookup(self):
        table = L.Embedding(5, 3, np.random.default_rng(0))
        assert np.array_equal(L.embed([3], table).data, table.weights.data[[3]])

    def test_out_of_range_reports_position(self):
        table = L.Embedding(5, 3, np.random.default_rng(0))
        with pytest.raises(VocabError, match=r"\(1,\)"):
            L.embed([2, 5], table)

    def test_only_used_rows_get_gradient(self):
        rng = np.random.default_rng(1)
        table = L.Embedding(5, 3, rng)
        ids = np.array([2, 4, 2, 0])
        w = rand(rng, 4, 3)
        loss = lambda: T.tanh(L.embed(ids, table) * w).sum()
        loss().backward()
        numeric = numeric_grad(lambda: float(loss().data), [table.weights.data])[0]
        numeric[L.PAD_ID] = 0.0  # the pad row is frozen by construction
        assert max_rel_error(table.weights.grad, numeric) < 1e-4
        nonzero = {i for i in range(5) if np.any(table.weights.grad[i])}
        assert nonzero == {2, 4}


# convolution --------------------------------------------------------------

class TestConv:
    def test_hand_sliding_window(self):
        x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
        kernels = Tensor(np.array([1.0, 0.0, -1.0]).reshape(3, 1, 1))
        out = L.conv1d_valid(x, kernels, Tensor(np.zeros(1)))
        assert out.data.ravel().tolist() == [-2.0, -2.0]

    def test_zero_kernel_gives_bias(self):
        x = Tensor(np.random.default_rng(0).normal(size=(6, 2)))
        out = L.conv1d_valid(x, Tensor(np.zeros((3, 2, 4))), Tensor([1.0, 2.0, 3.0, 4.0]))
        assert np.array_equal(out.data, np.tile([1.0, 2.0, 3.0, 4.0], (4, 1)))

    def test_too_short(self):
        with pytest.raises(SequenceTooShortError) as info:
            L.conv1d_valid(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1, 1))), Tensor([0.0]))
        assert "2" in str(info.value) and "3" in str(info.value)

    def test_gradient_6x2(self):
        rng = np.random.default_rng(2)
        x, k, b = rand(rng, 6, 2), rand(rng, 3, 2, 2), rand(rng, 2)
        assert check_grads(lambda: T.tanh(L.conv1d_valid(x, k, b)).sum(), [x, k, b]) < 1e-4

    @pytest.mark.parametrize("k", [3, 4, 5])
    def test_output_length(self, k):
        rng = np.random.default_rng(k)
        conv = L.Conv1d(4, 3, k, rng)
        for length in range(k, k + 6):
            assert conv(Tensor(rng.normal(size=(2, length, 4)))).shape == (2, length - k + 1, 3)
            assert L.conv_output_mask(np.ones((2, length), bool), k).shape == (2, length - k + 1)


# GRU ----------------------------------------------------------------------

def zero_cell(rng, input_dim=3, hidden=2):
    cell = L.GruCell(input_dim, hidden, rng)
    for p in cell.parameters():
        p.data[...] = 0.0
    return cell


class TestGru:
    def test_update_gate_closed_copies_state(self):
        rng = np.random.default_rng(0)
        cell = zero_cell(rng)
        cell.b_z.data[...] = -1e6
        cell.b_h.data[...] = 0.7
        h_prev = np.array([0.3, -0.2])
        out = L.gru_step(cell, Tensor(rng.normal(size=3)), Tensor(h_prev))
        assert np.array_equal(out.data, h_prev)

    def test_update_gate_open_takes_candidate(self):
        rng = np.random.default_rng(0)
        cell = zero_cell(rng)
        cell.b_z.data[...] = 1e6
        cell.b_h.data[...] = 0.7
        out = L.gru_step(cell, Tensor(rng.normal(size=3)), Tensor([0.3, -0.2]))
        np.testing.assert_allclose(out.data, np.tanh([0.7, 0.7]), atol=1e-15)

    def test_dimension_mismatch(self):
        cell = L.GruCell(3, 2, np.random.default_rng(0))
        with pytest.raises(ContractError):
            L.gru_step(cell, Tensor(np.zeros(4)), Tensor(np.zeros(2)))

    @pytest.mark.parametrize("seed", range(5))
    def test_three_steps_match_scalar_recurrence(self, seed):
        rng = np.random.default_rng(seed)
        cell = L.GruCell(3, 4, rng)
        xs = rng.normal(size=(3, 3))
        h = Tensor(np.zeros(4))
        for x in xs:
            h = L.gru_step(cell, Tensor(x), h)
        assert np.max(np.abs(h.data - gru_oracle(cell, xs, np.zeros(4)))) < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_gates_and_state_bounded(self, seed):
        rng = np.random.default_rng(seed)
        cell = L.GruCell(3, 4, rng)
        h = Tensor(np.zeros(4))
        for x in rng.normal(scale=5.0, size=(6, 3)):
            h = L.gru_step(cell, Tensor(x), h)
            assert np.all(np.abs(h.data) < 1)


class TestBiGru:
    def test_single_step_reduction(self):
        rng = np.random.default_rng(0)
        fwd, bwd = L.GruCell(3, 2, rng), L.GruCell(3, 2, rng)
        x = Tensor(rng.normal(size=(1, 3)))
        out = L.bigru_encode(x, fwd, bwd)
        expected = np.concatenate([L.gru_step(fwd, Tensor(x.data[0]), Tensor(np.zeros(2))).data,
                                   L.gru_step(bwd, Tensor(x.data[0]), Tensor(np.zeros(2))).data])
        np.testing.assert_allclose(out.data, expected, atol=1e-15)

    def test_palindrome_with_shared_cell(self):
        rng = np.random.default_rng(1)
        cell = L.GruCell(2, 3, rng)
        a, b = rng.normal(size=2), rng.normal(size=2)
        out = L.bigru_encode(Tensor(np.stack([a, b, a])), cell, cell).data
        np.testing.assert_allclose(out[:3], out[3:], atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_len4_two_pass_oracle(self, seed):
        rng = np.random.default_rng(seed)
        fwd, bwd = L.GruCell(3, 2, rng), L.GruCell(3, 2, rng)
        xs = rng.normal(size=(4, 3))
        out = L.bigru_encode(Tensor(xs), fwd, bwd).data
        expected = np.concatenate([gru_oracle(fwd, xs, np.zeros(2)),
                                   gru_oracle(bwd, xs[::-1], np.zeros(2))])
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_all_padding_rejected(self):
        rng = np.random.default_rng(0)
        cell = L.GruCell(2, 2, rng)
        with pytest.raises(EmptySequenceError):
            L.bigru_encode(Tensor(np.zeros((1, 3, 2))), cell, cell, np.zeros((1, 3), bool))


# attention ----------------------------------------------------------------

class TestPositionalEncoding:
    def test_first_row_alternates(self):
        assert L.positional_encoding(3, 6)[0].tolist() == [0.0, 1.0] * 3

    def test_calculator_value(self):
        assert L.positional_encoding(2, 4)[1, 0] == pytest.approx(0.8414709848, abs=1e-10)

    def test_range(self):
        pe = L.positional_encoding(200, 16)
        assert np.all(np.abs(pe) <= 1.0)

    def test_odd_dim(self):
        with pytest.raises(ConfigError):
            L.positional_encoding(3, 5)


class TestAttention:
    def test_single_position(self):
        rng = np.random.default_rng(0)
        attn = L.MultiHeadSelfAttention(4, 2, rng)
        x = Tensor(rng.normal(size=(1, 4)))
        out, weights = attn(x, return_weights=True)
        assert np.all(weights == 1.0)
        v = x.data @ attn.v.weight.data + attn.v.bias.data
        np.testing.assert_allclose(out.data, v @ attn.out.weight.data + attn.out.bias.data,
                                   atol=1e-15)

    def test_identical_positions_identical_rows(self):
        rng = np.random.default_rng(1)
        attn = L.MultiHeadSelfAttention(4, 2, rng)
        row = rng.normal(size=4)
        out = attn(Tensor(np.stack([row, row]))).data
        np.testing.assert_allclose(out[0], out[1], atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        attn = L.MultiHeadSelfAttention(4, 2, rng)
        x = rng.normal(size=(3, 4))
        mask = np.array([True, True, seed % 2 == 0])
        out = attn(Tensor(x), mask).data
        assert np.max(np.abs(out - attention_oracle(x, attn, mask))) < 1e-10

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError):
            L.MultiHeadSelfAttention(6, 4, np.random.default_rng(0))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.sampled_from([1, 2, 4]))
    def test_weight_rows_sum_to_one(self, seed, length, heads):
        rng = np.random.default_rng(seed)
        attn = L.MultiHeadSelfAttention(8, heads, rng)
        mask = rng.random((2, length)) < 0.7
        mask[:, 0] = True
        _, w = attn(Tensor(rng.normal(scale=3, size=(2, length, 8))), mask, return_weights=True)
        assert np.all(np.abs(w.sum(axis=-1) - 1) < 1e-9)
        assert np.all(w[np.broadcast_to(~mask[:, None, None, :], w.shape)] == 0)


class TestTransformerBlock:
    def test_layer_norm_of_constant_vector(self):
        ln = L.LayerNorm(4)
        ln.bias.data[...] = [0.1, 0.2, 0.3, 0.4]
        assert np.allclose(ln(Tensor(np.full((1, 4), 3.0))).data, [[0.1, 0.2, 0.3, 0.4]])

    def test_zero_sublayers_reduce_to_norms(self):
        rng = np.random.default_rng(0)
        block = L.TransformerBlock(4, 2, 8, rng)
        for dense in (block.attn.out, block.ff2):
            dense.weight.data[...] = 0.0
            dense.bias.data[...] = 0.0
        x = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_allclose(block(x).data, block.norm2(block.norm1(x)).data, atol=1e-12)

    def test_gradient_4x8_two_heads(self):
        rng = np.random.default_rng(1)
        block = L.TransformerBlock(8, 2, 16, rng)
        x = rand(rng, 4, 8)
        params = [x] + block.parameters()
        assert check_grads(lambda: T.tanh(block(x)).sum(), params) < 1e-4


class TestPoolMean:
    def test_single_row(self):
        assert L.pool_mean(Tensor([[1.0, 2.0]])).data.tolist() == [1.0, 2.0]

    def test_repeated_row(self):
        assert L.pool_mean(Tensor([[1.5, -2.0], [1.5, -2.0]])).data.tolist() == [1.5, -2.0]

    def test_mean(self):
        assert L.pool_mean(Tensor([[1.0], [3.0]])).data.tolist() == [2.0]

    def test_no_valid_rows(self):
        with pytest.raises(EmptySequenceError):
            L.pool_mean(Tensor([[1.0], [3.0]]), np.array([False, False]))


# every layer, 20 seeds -----------------------------------------------------

def _shapes(rng):
    return int(rng.integers(1, 4)), int(rng.integers(3, 8)), 2 * int(rng.integers(1, 5))


def _mask(rng, batch, length, min_valid=1):
    lengths = rng.integers(min_valid, length + 1, size=batch)
    return np.arange(length)[None, :] < lengths[:, None]


def _embed_case(rng):
    table = L.Embedding(6, 4, rng)
    ids = rng.integers(1, 6, size=(2, 5))  # pad row is frozen, checked separately
    w = rand(rng, 2, 5, 4)
    return lambda: T.tanh(L.embed(ids, table) * w).sum(), [table.weights]


def _cnn_case(rng):
    batch, length, dim = _shapes(rng)
    k = int(rng.integers(3, 6))
    length = max(length, k)
    enc = L.CnnEncoder(dim, k, 3, rng)
    x = rand(rng, batch, length, dim)
    mask = _mask(rng, batch, length, k)
    return lambda: T.tanh(enc(x, mask)).sum(), [x] + enc.parameters()


def _bigru_case(rng):
    batch, length, dim = _shapes(rng)
    enc = L.BiGruEncoder(dim, 3, rng)
    x = rand(rng, batch, length, dim)
    mask = _mask(rng, batch, length)
    return lambda: T.tanh(enc(x, mask)).sum(), [x] + enc.parameters()


def _attention_case(rng):
    batch, length, dim = _shapes(rng)
    attn = L.MultiHeadSelfAttention(dim, 2, rng)
    x = rand(rng, batch, length, dim)
    mask = _mask(rng, batch, length)
    return lambda: T.tanh(L.pool_mean(attn(x, mask), mask)).sum(), [x] + attn.parameters()


def _transformer_case(rng):
    batch, length, dim = _shapes(rng)
    enc = L.TransformerEncoder(dim, 2, 8, 1, rng)
    x = rand(rng, batch, length, dim)
    mask = _mask(rng, batch, length)
    return lambda: T.tanh(enc(x, mask)).sum(), [x] + enc.parameters()


def _dense_pool_case(rng):
    batch, length, dim = _shapes(rng)
    dense = L.Dense(dim, 3, rng)
    x = rand(rng, batch, length, dim)
    mask = _mask(rng, batch, length)
    return lambda: T.tanh(L.pool_mean(dense(x), mask)).sum(), [x] + dense.parameters()


CASES = {"embed": _embed_case, "cnn": _cnn_case, "bigru": _bigru_case,
         "attention": _attention_case, "transformer": _transformer_case,
         "dense_pool": _dense_pool_case}


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", SEEDS)
def test_layer_gradients(name, seed):
    build, params = CASES[name](np.random.default_rng([seed, len(name)]))
    assert check_grads(build, params) < 1e-4


# masking invariance ------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 5), st.integers(1, 4))
def test_trailing_padding_changes_nothing(seed, length, extra):
    rng = np.random.default_rng(seed)
    dim = 4
    x = rng.normal(size=(1, length, dim))
    padded = np.concatenate([x, rng.normal(size=(1, extra, dim))], axis=1)
    mask = np.ones((1, length), bool)
    pmask = np.concatenate([mask, np.zeros((1, extra), bool)], axis=1)
    gru = L.BiGruEncoder(dim, 3, rng)
    attn = L.MultiHeadSelfAttention(dim, 2, rng)
    for f in (lambda a, m: gru(Tensor(a), m).data,
              lambda a, m: attn(Tensor(a), m).data[:, :length],
              lambda a, m: L.pool_mean(Tensor(a), m).data):
        assert np.max(np.abs(f(x, mask) - f(padded, pmask))) < 1e-10


@pytest.mark.parametrize("length", [5, 9, 17])
def test_encoder_output_width_independent_of_length(length):
    rng = np.random.default_rng(length)
    x = Tensor(rng.normal(size=(2, length, 4)))
    mask = np.ones((2, length), bool)
    for enc, width in ((L.CnnEncoder(4, 3, 6, rng), 6), (L.BiGruEncoder(4, 5, rng), 10),
                       (L.TransformerEncoder(4, 2, 8, 1, rng), 4)):
        assert enc(x, mask).shape == (2, width)

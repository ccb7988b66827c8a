"""Neural building blocks: embedding, 1-D convolution, (Bi)GRU, self-attention.

All layers take batched inputs ``[batch, length, dim]`` with a boolean mask
``[batch, length]`` marking real (non-padding) positions.  Unbatched
``[length, dim]`` inputs are accepted by the functional entry points and get a
batch axis of one.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    EmptySequenceError,
    SequenceTooShortError,
    VocabError,
)
from .tensor import Tensor

PAD_ID = 0


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


# embedding --------------------------------------------------------------

class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.dim = dim
        w = rng.uniform(-0.05, 0.05, size=(vocab_size, dim))
        w[PAD_ID] = 0.0
        self.weights = Tensor(w, requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return embed(ids, self)


def embed(ids, table: Embedding) -> Tensor:
    """Row lookup; the padding row never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    bad = np.argwhere((ids < 0) | (ids >= table.vocab_size))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise VocabError(f"id {int(ids[pos])} at position {pos} outside vocab of size {table.vocab_size}")
    w = table.weights

    def backward(g):
        out = np.zeros(w.shape)
        np.add.at(out, ids, g)
        out[PAD_ID] = 0.0
        return (out,)

    return T._record(w.data[ids], (w,), backward)


# dense ------------------------------------------------------------------

class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = init_uniform(rng, (in_dim, out_dim), in_dim)
        self.bias = init_uniform(rng, (out_dim,), in_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


# convolution ------------------------------------------------------------

class Conv1d(Module):
    def __init__(self, dim: int, filters: int, kernel_size: int, rng: np.random.Generator):
        self.kernel_size = kernel_size
        fan_in = kernel_size * dim
        self.kernels = init_uniform(rng, (kernel_size, dim, filters), fan_in)
        self.bias = init_uniform(rng, (filters,), fan_in)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d_valid(x, self.kernels, self.bias)


def conv1d_valid(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation along the length axis of ``x[..., len, dim]``.

    Returns ``[..., len - k + 1, filters]``; the caller applies the activation.
    """
    k, dim, filters = kernels.shape
    length = x.shape[-2]
    if x.shape[-1] != dim:
        raise DimensionError(f"conv1d: input dim {x.shape[-1]} != kernel dim {dim}")
    if length < k:
        raise SequenceTooShortError(length, k)
    idx = np.arange(length - k + 1)[:, None] + np.arange(k)[None, :]
    windows = T.take(x, (Ellipsis, idx, slice(None)))
    windows = T.reshape(windows, x.shape[:-2] + (length - k + 1, k * dim))
    return T.add(T.matmul(windows, T.reshape(kernels, (k * dim, filters))), bias)


def conv_output_mask(mask: np.ndarray, k: int) -> np.ndarray:
    """A convolution output is valid when every position in its window is valid."""
    mask = np.asarray(mask, dtype=bool)
    length = mask.shape[-1]
    idx = np.arange(length - k + 1)[:, None] + np.arange(k)[None, :]
    return mask[..., idx].all(axis=-1)


# recurrent --------------------------------------------------------------

class GruCell(Module):
    """GRU with the reset gate applied inside the candidate's recurrent term."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        h = hidden_dim
        for gate in ("z", "r", "h"):
            setattr(self, f"W_{gate}", init_uniform(rng, (input_dim, h), input_dim))
            setattr(self, f"U_{gate}", init_uniform(rng, (h, h), h))
            setattr(self, f"b_{gate}", init_uniform(rng, (h,), h))

    def project_inputs(self, xs: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Input-side gate pre-activations for every timestep at once."""
        return tuple(T.add(T.matmul(xs, getattr(self, f"W_{g}")), getattr(self, f"b_{g}"))
                     for g in ("z", "r", "h"))

    def step_projected(self, xz: Tensor, xr: Tensor, xh: Tensor, h_prev: Tensor) -> Tensor:
        z = T.sigmoid(T.add(xz, T.matmul(h_prev, self.U_z)))
        r = T.sigmoid(T.add(xr, T.matmul(h_prev, self.U_r)))
        cand = T.tanh(T.add(xh, T.matmul(T.mul(r, h_prev), self.U_h)))
        return T.add(T.mul(T.sub(1.0, z), h_prev), T.mul(z, cand))


def gru_step(cell: GruCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update for ``x_t[input_dim]`` (or ``[batch, input_dim]``)."""
    x_t, h_prev = T.as_tensor(x_t), T.as_tensor(h_prev)
    if x_t.shape[-1] != cell.input_dim or h_prev.shape[-1] != cell.hidden_dim:
        raise ContractError(
            f"gru_step: got x {x_t.shape}, h {h_prev.shape} for cell "
            f"({cell.input_dim} -> {cell.hidden_dim})")
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t = T.reshape(x_t, (1, -1))
        h_prev = T.reshape(h_prev, (1, -1))
    h = cell.step_projected(*cell.project_inputs(x_t), h_prev)
    return T.reshape(h, (cell.hidden_dim,)) if squeeze else h


def _run_direction(cell: GruCell, xs: Tensor, mask: np.ndarray, reverse: bool) -> Tensor:
    batch, length = mask.shape
    xz, xr, xh = cell.project_inputs(xs)
    h = T.as_tensor(np.zeros((batch, cell.hidden_dim)))
    steps = range(length - 1, -1, -1) if reverse else range(length)
    for t in steps:
        m = mask[:, t]
        if not m.any():
            continue
        h_new = cell.step_projected(xz[:, t], xr[:, t], xh[:, t], h)
        h = h_new if m.all() else T.where(m[:, None], h_new, h)
    return h


def _batched(xs: Tensor, mask) -> tuple[Tensor, np.ndarray, bool]:
    xs = T.as_tensor(xs)
    single = xs.ndim == 2
    if single:
        xs = T.reshape(xs, (1,) + xs.shape)
    if mask is None:
        mask = np.ones(xs.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(xs.shape[:2])
    if not mask.any(axis=1).all():
        raise EmptySequenceError("sequence has no valid positions")
    return xs, mask, single


def bigru_encode(xs: Tensor, fwd: GruCell, bwd: GruCell, mask=None) -> Tensor:
    """Concatenate the final forward and backward GRU states.

    Masked positions leave the running state untouched in both directions.
    """
    xs, mask, single = _batched(xs, mask)
    out = T.concat([_run_direction(fwd, xs, mask, False),
                    _run_direction(bwd, xs, mask, True)], axis=-1)
    return T.reshape(out, (out.shape[-1],)) if single else out


# attention --------------------------------------------------------------

def positional_encoding(length: int, dim: int) -> np.ndarray:
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even dim, got {dim}")
    pos = np.arange(length)[:, None]
    rate = np.power(10000.0, np.arange(0, dim, 2) / dim)
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"embedding size {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Dense(dim, dim, rng)
        self.k = Dense(dim, dim, rng)
        self.v = Dense(dim, dim, rng)
        self.out = Dense(dim, dim, rng)

    def __call__(self, x: Tensor, mask=None, return_weights: bool = False):
        return multi_head_self_attention(x, self, mask, return_weights)


def multi_head_self_attention(x: Tensor, attn: MultiHeadSelfAttention, mask=None,
                              return_weights: bool = False):
    xs, mask, single = _batched(x, mask)
    batch, length, dim = xs.shape
    h = attn.heads
    dh = dim // h

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (batch, length, h, dh)), (0, 2, 1, 3))

    q, k, v = split(attn.q(xs)), split(attn.k(xs)), split(attn.v(xs))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores, mask[:, None, None, :])
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (batch, length, dim))
    out = attn.out(ctx)
    if single:
        out = T.reshape(out, (length, dim))
    return (out, weights.data) if return_weights else out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class TransformerBlock(Module):
    """Post-norm encoder block: LN(x + MHA(x)) then LN(. + FF(.))."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ff1 = Dense(dim, ff_dim, rng)
        self.ff2 = Dense(ff_dim, dim, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        return transformer_block(x, self, mask)


def transformer_block(x: Tensor, block: TransformerBlock, mask=None) -> Tensor:
    h = block.norm1(T.add(x, block.attn(x, mask)))
    return block.norm2(T.add(h, block.ff2(T.relu(block.ff1(h)))))


def pool_mean(x: Tensor, mask=None) -> Tensor:
    x = T.as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    return T.masked_mean(x, mask)


# channel encoders -------------------------------------------------------

class CnnEncoder(Module):
    def __init__(self, dim: int, kernel_size: int, filters: int, rng: np.random.Generator):
        self.conv = Conv1d(dim, filters, kernel_size, rng)
        self.out_dim = filters

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        k = self.conv.kernel_size
        return pool_mean(T.relu(self.conv(x)), conv_output_mask(mask, k))


class BiGruEncoder(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fwd = GruCell(dim, hidden, rng)
        self.bwd = GruCell(dim, hidden, rng)
        self.out_dim = 2 * hidden

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return bigru_encode(x, self.fwd, self.bwd, mask)


class TransformerEncoder(Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, depth: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(dim, heads, ff_dim, rng) for _ in range(depth)]
        self.dim = dim
        self.out_dim = dim

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = T.add(x, positional_encoding(x.shape[-2], self.dim))
        for block in self.blocks:
            h = block(h, mask)
        return pool_mean(h, mask)

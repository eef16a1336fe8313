"""Transformer encoder over token sequences and the two-attention-block
decoder that mixes content queries with style keys/values.

Ordering is post-norm throughout: sublayer -> residual add -> layer norm.
The decoder's second attention block reuses the first block's projected
keys/values and consumes its input as raw queries, so its only learnable
matrix is the output projection.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError


class AttentionParams:
    """Q/K/V/O projections, column-partitioned across heads."""

    def __init__(self, dim, n_heads, rng, name):
        if dim % n_heads:
            raise ConfigError(f"width {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        scale = 1.0 / np.sqrt(dim)
        self.w_q = Tensor(rng.normal(size=(dim, dim)) * scale, requires_grad=True, name=f"{name}.w_q")
        self.w_k = Tensor(rng.normal(size=(dim, dim)) * scale, requires_grad=True, name=f"{name}.w_k")
        self.w_v = Tensor(rng.normal(size=(dim, dim)) * scale, requires_grad=True, name=f"{name}.w_v")
        self.w_o = Tensor(rng.normal(size=(dim, dim)) * scale, requires_grad=True, name=f"{name}.w_o")

    def tensors(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o]


class OutputProjection:
    """The reduced parameter set of the decoder's second attention block."""

    def __init__(self, dim, n_heads, rng, name):
        if dim % n_heads:
            raise ConfigError(f"width {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.w_o = Tensor(
            rng.normal(size=(dim, dim)) / np.sqrt(dim), requires_grad=True, name=f"{name}.w_o"
        )

    def tensors(self):
        return [self.w_o]


class FfnParams:
    """Two-layer position-wise feed-forward network."""

    def __init__(self, dim, hidden, rng, name):
        if hidden < dim:
            raise ConfigError(f"ffn hidden width {hidden} must be >= {dim}")
        self.w1 = Tensor(rng.normal(size=(dim, hidden)) / np.sqrt(dim), requires_grad=True, name=f"{name}.w1")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name=f"{name}.b1")
        self.w2 = Tensor(rng.normal(size=(hidden, dim)) / np.sqrt(hidden), requires_grad=True, name=f"{name}.w2")
        self.b2 = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.b2")

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]


class LayerNormParams:
    def __init__(self, dim, rng, name):
        self.gain = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)

    def tensors(self):
        return [self.gain, self.bias]


class EncoderLayer:
    def __init__(self, dim, n_heads, hidden, rng, name):
        self.attn = AttentionParams(dim, n_heads, rng, f"{name}.attn")
        self.ffn = FfnParams(dim, hidden, rng, f"{name}.ffn")
        self.ln1 = LayerNormParams(dim, rng, f"{name}.ln1")
        self.ln2 = LayerNormParams(dim, rng, f"{name}.ln2")

    def tensors(self):
        return self.attn.tensors() + self.ffn.tensors() + self.ln1.tensors() + self.ln2.tensors()


class DecoderLayer:
    def __init__(self, dim, n_heads, hidden, rng, name):
        self.cross = AttentionParams(dim, n_heads, rng, f"{name}.cross")
        self.attn2 = OutputProjection(dim, n_heads, rng, f"{name}.attn2")
        self.ffn = FfnParams(dim, hidden, rng, f"{name}.ffn")
        self.ln1 = LayerNormParams(dim, rng, f"{name}.ln1")
        self.ln2 = LayerNormParams(dim, rng, f"{name}.ln2")
        self.ln3 = LayerNormParams(dim, rng, f"{name}.ln3")

    def tensors(self):
        return (
            self.cross.tensors()
            + self.attn2.tensors()
            + self.ffn.tensors()
            + self.ln1.tensors()
            + self.ln2.tensors()
            + self.ln3.tensors()
        )


def attention_heads(q, k, v, n_heads, w_o, attn_sink=None):
    """Split pre-projected Q/K/V into heads, attend, concat, project.

    ``attn_sink``, when given, receives each head's attention weight matrix
    as a plain array (inspection only; stays off the tape).
    """
    dim = q.data.shape[1]
    d_head = dim // n_heads
    scale = 1.0 / np.sqrt(d_head)
    heads = []
    for h in range(n_heads):
        start = h * d_head
        qh = ad.narrow(q, 1, start, d_head)
        kh = ad.narrow(k, 1, start, d_head)
        vh = ad.narrow(v, 1, start, d_head)
        logits = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
        weights = ad.softmax_rows(logits)
        if attn_sink is not None:
            attn_sink.append(weights.data.copy())
        heads.append(ad.matmul(weights, vh))
    return ad.matmul(ad.concat(heads, axis=1), w_o)


def mha(queries_src, keys_src, values_src, params: AttentionParams, attn_sink=None):
    """Multi-head attention with learned Q/K/V projections."""
    if not (queries_src.data.shape[0] == keys_src.data.shape[0] == values_src.data.shape[0]):
        raise ContractError(
            "sequence lengths differ: "
            f"{queries_src.data.shape[0]}, {keys_src.data.shape[0]}, {values_src.data.shape[0]}"
        )
    q = ad.matmul(queries_src, params.w_q)
    k = ad.matmul(keys_src, params.w_k)
    v = ad.matmul(values_src, params.w_v)
    return attention_heads(q, k, v, params.n_heads, params.w_o, attn_sink)


def ffn(x, params: FfnParams):
    hidden = ad.relu(ad.add(ad.matmul(x, params.w1), params.b1))
    return ad.add(ad.matmul(hidden, params.w2), params.b2)


def encoder_forward(z, layers, attn_sink=None):
    """Stack of self-attention layers; empty stack is the identity."""
    y = z
    for layer in layers:
        u = layer.ln1(ad.add(mha(y, y, y, layer.attn, attn_sink), y))
        y = layer.ln2(ad.add(ffn(u, layer.ffn), u))
    return y


def decoder_forward(y_content, y_style, layers, attn_sink=None):
    """Two attention blocks plus FFN per layer, norms after every block.

    Block 1 cross-attends content queries against style keys/values. Block 2
    feeds block 1's output straight in as queries and reuses the projected
    K/V, so only its output projection is learned.
    """
    if y_content.data.shape[0] != y_style.data.shape[0]:
        raise ContractError(
            f"content/style sequence lengths differ: "
            f"{y_content.data.shape[0]} vs {y_style.data.shape[0]}"
        )
    x = y_content
    for layer in layers:
        q1 = ad.matmul(x, layer.cross.w_q)
        k1 = ad.matmul(y_style, layer.cross.w_k)
        v1 = ad.matmul(y_style, layer.cross.w_v)
        attended = attention_heads(q1, k1, v1, layer.cross.n_heads, layer.cross.w_o, attn_sink)
        x0 = layer.ln1(ad.add(attended, x))

        # raw queries, recycled keys/values
        attended2 = attention_heads(x0, k1, v1, layer.attn2.n_heads, layer.attn2.w_o, attn_sink)
        x1 = layer.ln2(ad.add(attended2, x0))

        x = layer.ln3(ad.add(ffn(x1, layer.ffn), x1))
    return x

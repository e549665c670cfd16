"""Deterministic dense building blocks: affine maps, softmax, layer norm,
multi-head attention, MLP heads, and seeded parameter initialization.

Everything here is plain float64 numpy with no hidden state, so repeated
calls with the same inputs are bit-identical and safe to run in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "affine",
    "relu",
    "softmax",
    "layer_norm",
    "AttentionParams",
    "multi_head_attention",
    "AttentionBlockParams",
    "attention_block",
    "MlpParams",
    "mlp",
    "ParamInit",
]


def affine(x, w, b, exact: bool = False) -> np.ndarray:
    """y = x @ w + b over the last axis of x.

    With ``exact`` the product is evaluated by a fixed sum-of-products
    kernel whose rounding does not depend on a row's position in the
    batch (BLAS kernels round edge rows differently for some widths);
    needed where bit-exact permutation equivariance is a contract.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine shape mismatch: x[..., {x.shape[-1]}] @ w[{w.shape[0]}, ...]")
    if b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
    if exact:
        return np.einsum("...ij,jk->...ik", x, w, optimize=False) + b
    return x @ w + b


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax (max subtraction is mandatory)."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


@dataclass
class AttentionParams:
    """Projection parameters for one multi-head attention call."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    heads: int

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    def validate(self) -> None:
        d = self.width
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be [{d}, {d}]")
        for name in ("bq", "bk", "bv", "bo"):
            if getattr(self, name).shape != (d,):
                raise ValueError(f"{name} must be [{d}]")
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"head count {self.heads} must divide width {d}")


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    # [L, D] -> [heads, L, D/heads]
    length, d = x.shape
    return x.reshape(length, heads, d // heads).transpose(1, 0, 2)


def multi_head_attention(
    q,
    k,
    v,
    params: AttentionParams,
    exact_sum: bool = False,
    return_weights: bool = False,
):
    """Scaled dot-product attention with ``params.heads`` heads.

    q is [Lq, D]; k and v are [Lk, D]. Logits are scaled by
    1/sqrt(D/heads). With ``exact_sum`` the reductions along the key axis
    use exactly rounded summation, which makes the output invariant to
    jointly permuting (k, v) rows at the bit level; used where a contract
    requires exact permutation equivariance over small axes.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    params.validate()
    d = params.width
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention inputs must be rank-2 [length, width]")
    if q.shape[1] != d or k.shape[1] != d or v.shape[1] != d:
        raise ValueError("attention input width does not match parameters")
    if k.shape[0] != v.shape[0]:
        raise ValueError("key/value lengths differ")
    if k.shape[0] == 0:
        raise ValueError("attention requires at least one key")

    heads = params.heads
    d_head = d // heads
    qp = _split_heads(affine(q, params.wq, params.bq, exact=exact_sum), heads)
    kp = _split_heads(affine(k, params.wk, params.bk, exact=exact_sum), heads)
    vp = _split_heads(affine(v, params.wv, params.bv, exact=exact_sum), heads)

    if exact_sum:
        scores = np.einsum("hqd,hkd->hqk", qp, kp, optimize=False) / math.sqrt(d_head)
        shifted = np.exp(scores - scores.max(axis=-1, keepdims=True))
        weights = np.empty_like(shifted)
        attended = np.empty((heads, q.shape[0], d_head))
        for h in range(heads):
            for i in range(q.shape[0]):
                denom = math.fsum(shifted[h, i])
                weights[h, i] = shifted[h, i] / denom
                row = weights[h, i]
                for c in range(d_head):
                    attended[h, i, c] = math.fsum(row * vp[h, :, c])
    else:
        scores = qp @ kp.transpose(0, 2, 1) / math.sqrt(d_head)  # [heads, Lq, Lk]
        weights = softmax(scores, axis=-1)
        attended = weights @ vp

    merged = attended.transpose(1, 0, 2).reshape(q.shape[0], d)
    out = affine(merged, params.wo, params.bo, exact=exact_sum)
    if return_weights:
        return out, weights
    return out


@dataclass
class AttentionBlockParams:
    """One post-norm transformer block: attention + FFN, each with residual."""

    attn: AttentionParams
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


def attention_block(x, memory, params: AttentionBlockParams, exact_sum: bool = False) -> np.ndarray:
    """Post-norm block: LN(x + Attn(x, memory)) then LN(y + FFN(y)).

    Self-attention is ``attention_block(x, x, params)``; cross-attention
    passes the key/value sequence as ``memory``.
    """
    a = multi_head_attention(x, memory, memory, params.attn, exact_sum=exact_sum)
    y = layer_norm(np.asarray(x, dtype=np.float64) + a, params.ln1_gamma, params.ln1_beta)
    f = affine(
        relu(affine(y, params.ffn_w1, params.ffn_b1, exact=exact_sum)),
        params.ffn_w2, params.ffn_b2, exact=exact_sum,
    )
    return layer_norm(y + f, params.ln2_gamma, params.ln2_beta)


@dataclass
class MlpParams:
    """Stack of affine layers with ReLU between them; the last layer is linear."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)


def mlp(x, params: MlpParams, exact: bool = False) -> np.ndarray:
    if not params.weights or len(params.weights) != len(params.biases):
        raise ValueError("mlp needs matching non-empty weight/bias lists")
    out = np.asarray(x, dtype=np.float64)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = affine(out, w, b, exact=exact)
        if i != last:
            out = relu(out)
    return out


class ParamInit:
    """Seeded fan-in-scaled initializer; draw order defines the parameter set.

    Weights are uniform on (-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    Values are quantized to float32 so that a fresh set and a set round-
    tripped through a checkpoint file are bit-identical.
    """

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def matrix(self, fan_in: int, fan_out: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        w = self.rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return w.astype(np.float32).astype(np.float64)

    def table(self, shape: tuple, fan_in: int | None = None) -> np.ndarray:
        fan = fan_in if fan_in is not None else shape[-1]
        bound = 1.0 / math.sqrt(fan)
        t = self.rng.uniform(-bound, bound, size=shape)
        return t.astype(np.float32).astype(np.float64)

    def zeros(self, *shape: int) -> np.ndarray:
        return np.zeros(shape, dtype=np.float64)

    def ones(self, *shape: int) -> np.ndarray:
        return np.ones(shape, dtype=np.float64)

    def attention(self, d: int, heads: int) -> AttentionParams:
        return AttentionParams(
            wq=self.matrix(d, d), bq=self.zeros(d),
            wk=self.matrix(d, d), bk=self.zeros(d),
            wv=self.matrix(d, d), bv=self.zeros(d),
            wo=self.matrix(d, d), bo=self.zeros(d),
            heads=heads,
        )

    def attention_block(self, d: int, heads: int, ffn_hidden: int) -> AttentionBlockParams:
        return AttentionBlockParams(
            attn=self.attention(d, heads),
            ffn_w1=self.matrix(d, ffn_hidden), ffn_b1=self.zeros(ffn_hidden),
            ffn_w2=self.matrix(ffn_hidden, d), ffn_b2=self.zeros(d),
            ln1_gamma=self.ones(d), ln1_beta=self.zeros(d),
            ln2_gamma=self.ones(d), ln2_beta=self.zeros(d),
        )

    def mlp(self, dims: list) -> MlpParams:
        p = MlpParams()
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            p.weights.append(self.matrix(fan_in, fan_out))
            p.biases.append(self.zeros(fan_out))
        return p

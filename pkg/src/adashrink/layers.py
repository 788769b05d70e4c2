"""Neural layers on top of the tensor core.

Parameters live in a flat dict keyed by dot-separated path; every layer
function takes the dict plus its own prefix. Shapes follow the
sequence-first convention: activations are (B, T, d), masks are (B, T)
with 1.0 on valid frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .tensor import Tensor

Params = dict[str, Tensor]

NEG_INF = -1e30  # additive attention mask value


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # xavier | zeros | ones


def linear_specs(prefix: str, d_in: int, d_out: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.w", (d_in, d_out), "xavier"),
        ParamSpec(f"{prefix}.b", (d_out,), "zeros"),
    ]


def _ln_specs(prefix: str, d: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.g", (d,), "ones"),
        ParamSpec(f"{prefix}.b", (d,), "zeros"),
    ]


def _mha_specs(prefix: str, d: int) -> list[ParamSpec]:
    specs: list[ParamSpec] = []
    for part in ("q", "k", "v", "o"):
        specs += linear_specs(f"{prefix}.{part}", d, d)
    return specs


def _ffn_specs(prefix: str, d: int, ffn: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.w1", (d, ffn), "xavier"),
        ParamSpec(f"{prefix}.b1", (ffn,), "zeros"),
        ParamSpec(f"{prefix}.w2", (ffn, d), "xavier"),
        ParamSpec(f"{prefix}.b2", (d,), "zeros"),
    ]


def encoder_layer_specs(prefix: str, d: int, ffn: int) -> list[ParamSpec]:
    return (
        _ln_specs(f"{prefix}.ln1", d)
        + _mha_specs(f"{prefix}.attn", d)
        + _ln_specs(f"{prefix}.ln2", d)
        + _ffn_specs(f"{prefix}.ffn", d, ffn)
    )


def decoder_layer_specs(prefix: str, d: int, ffn: int) -> list[ParamSpec]:
    return (
        _ln_specs(f"{prefix}.ln1", d)
        + _mha_specs(f"{prefix}.self", d)
        + _ln_specs(f"{prefix}.ln2", d)
        + _mha_specs(f"{prefix}.cross", d)
        + _ln_specs(f"{prefix}.ln3", d)
        + _ffn_specs(f"{prefix}.ffn", d, ffn)
    )


def conv_specs(prefix: str, kernel: int, c_in: int, c_out: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.w", (kernel, c_in, c_out), "xavier"),
        ParamSpec(f"{prefix}.b", (c_out,), "zeros"),
    ]


def embedding_specs(prefix: str, vocab: int, d: int) -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.w", (vocab, d), "xavier")]


def init_params(specs: list[ParamSpec], seed: int) -> Params:
    """Seeded uniform Xavier / constant init; deterministic in spec order."""
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ConfigError(f"duplicate parameter names: {dupes}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params: Params = {}
    for spec in specs:
        if spec.init == "zeros":
            data = np.zeros(spec.shape)
        elif spec.init == "ones":
            data = np.ones(spec.shape)
        elif spec.init == "xavier":
            if len(spec.shape) == 3:  # conv kernel (K, C_in, C_out)
                fan_in = spec.shape[0] * spec.shape[1]
                fan_out = spec.shape[0] * spec.shape[2]
            else:
                fan_in, fan_out = spec.shape[0], spec.shape[-1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=spec.shape)
        else:
            raise ConfigError(f"unknown init kind {spec.init!r}")
        params[spec.name] = Tensor(data, requires_grad=True)
    return params


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    w = params[f"{prefix}.w"]
    b = params[f"{prefix}.b"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear {prefix}: input {x.shape} vs weight {w.shape}")
    return x @ w + b


def layer_norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return tt.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    dim = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * dim / d)
    enc = np.zeros((length, d))
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle)
    return enc


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    params: Params,
    prefix: str,
    n_heads: int,
    add_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (output, weights).

    add_mask broadcasts against the (B, H, T_q, T_k) score tensor; use
    NEG_INF entries to forbid positions. Weights are post-softmax and
    row-stochastic over the allowed keys.
    """
    d = q_in.shape[-1]
    if d % n_heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    b, tq = q_in.shape[0], q_in.shape[1]
    tk = kv_in.shape[1]

    def split(x: Tensor, t: int) -> Tensor:
        return x.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)  # (B,H,T,dh)

    q = split(linear(q_in, params, f"{prefix}.q"), tq)
    k = split(linear(kv_in, params, f"{prefix}.k"), tk)
    v = split(linear(kv_in, params, f"{prefix}.v"), tk)

    scores = tt.mul(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))  # (B,H,Tq,Tk)
    if add_mask is not None:
        scores = scores + Tensor(add_mask)
    weights = tt.softmax(scores, axis=-1)
    ctx = weights @ v  # (B,H,Tq,dh)
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, tq, d)
    return linear(merged, params, f"{prefix}.o"), weights


def _ffn(x: Tensor, params: Params, prefix: str) -> Tensor:
    h = tt.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def key_padding_mask(mask: np.ndarray) -> np.ndarray:
    """(B, T) validity mask -> additive (B, 1, 1, T) attention mask."""
    return (1.0 - mask)[:, None, None, :] * NEG_INF


def causal_mask(t: int) -> np.ndarray:
    """Additive (t, t) mask forbidding attention to future positions."""
    return np.triu(np.full((t, t), NEG_INF), k=1)


def encoder_forward(
    x: Tensor, mask: np.ndarray, params: Params, prefix: str, n_layers: int, n_heads: int
) -> Tensor:
    """Pre-norm transformer encoder; masked positions are zeroed on output."""
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask {mask.shape} vs states {x.shape}")
    add_mask = key_padding_mask(mask)
    h = x
    for i in range(n_layers):
        p = f"{prefix}.layers.{i}"
        pre = layer_norm(h, params, f"{p}.ln1")
        attn_out, _ = multi_head_attention(pre, pre, params, f"{p}.attn", n_heads, add_mask)
        h = h + attn_out
        h = h + _ffn(layer_norm(h, params, f"{p}.ln2"), params, f"{p}.ffn")
    return h * Tensor(mask[:, :, None])


def decoder_forward(
    y_ids: np.ndarray,
    memory: Tensor,
    mem_mask: np.ndarray,
    params: Params,
    prefix: str,
    n_layers: int,
    n_heads: int,
    collect_attn: bool = False,
) -> tuple[Tensor, list[Tensor]]:
    """Causal pre-norm decoder over token ids; returns (logits, cross-attn maps)."""
    if y_ids.ndim != 2 or y_ids.shape[1] == 0:
        raise ShapeError(f"decoder prefix must be (B, T>=1), got {y_ids.shape}")
    b, ty = y_ids.shape
    d = memory.shape[-1]
    emb = tt.embedding(params[f"{prefix}.embed.w"], y_ids)
    h = tt.mul(emb, math.sqrt(d)) + Tensor(sinusoidal_positions(ty, d)[None, :, :])
    self_mask = causal_mask(ty)[None, None, :, :]
    cross_mask = key_padding_mask(mem_mask)
    attn_maps: list[Tensor] = []
    for i in range(n_layers):
        p = f"{prefix}.layers.{i}"
        pre = layer_norm(h, params, f"{p}.ln1")
        sa, _ = multi_head_attention(pre, pre, params, f"{p}.self", n_heads, self_mask)
        h = h + sa
        ca, weights = multi_head_attention(
            layer_norm(h, params, f"{p}.ln2"), memory,
            params, f"{p}.cross", n_heads, cross_mask,
        )
        if collect_attn:
            attn_maps.append(weights)
        h = h + ca
        h = h + _ffn(layer_norm(h, params, f"{p}.ln3"), params, f"{p}.ffn")
    logits = linear(h, params, f"{prefix}.out")
    return logits, attn_maps


def subsampled_length(length: int, factor: int) -> int:
    out = length
    for _ in range(factor.bit_length() - 1):  # factor is 2 or 4
        out = (out + 1) // 2
    return out


def _conv1d(x: Tensor, params: Params, prefix: str, stride: int) -> Tensor:
    """Kernel-3 1-d convolution, output length ceil(T/stride).

    Left padding is fixed at one frame so that output position j always
    covers input positions (j*stride - 1 .. j*stride + 1), independent of
    the padded batch length; right padding is whatever the last window
    needs. Identical utterances therefore produce identical rows no matter
    how much trailing padding the batch carries.
    """
    w = params[f"{prefix}.w"]
    b = params[f"{prefix}.b"]
    kernel = w.shape[0]
    t = x.shape[1]
    t_out = (t + stride - 1) // stride
    pl = 1
    pr = max(0, (t_out - 1) * stride + kernel - t - pl)
    parts = [Tensor(np.zeros((x.shape[0], pl, x.shape[2]))), x]
    if pr:
        parts.append(Tensor(np.zeros((x.shape[0], pr, x.shape[2]))))
    xp = tt.concat(parts, axis=1)
    out = None
    for k in range(kernel):
        tap = xp[:, k : k + stride * t_out : stride, :] @ w[k]  # (B, T_out, C_out)
        out = tap if out is None else out + tap
    return out + b


def conv_subsample(
    x: Tensor, mask: np.ndarray, params: Params, prefix: str, factor: int
) -> tuple[Tensor, np.ndarray]:
    """Two kernel-3 convolutions reducing T by the factor; mask follows."""
    if factor not in (2, 4):
        raise ConfigError(f"subsample factor must be 2 or 4, got {factor}")
    if x.shape[1] == 0:
        raise ShapeError("cannot subsample an empty frame sequence")
    x = x * Tensor(mask[:, :, None])  # keep padded frames exactly zero
    h = tt.relu(_conv1d(x, params, f"{prefix}.conv1", stride=2))
    h = _conv1d(h, params, f"{prefix}.conv2", stride=2 if factor == 4 else 1)
    lengths = mask.sum(axis=1).astype(int)
    new_lengths = np.array([subsampled_length(int(n), factor) for n in lengths])
    t_new = h.shape[1]
    new_mask = (np.arange(t_new)[None, :] < new_lengths[:, None]).astype(np.float64)
    return h * Tensor(new_mask[:, :, None]), new_mask


def cross_entropy_sum(
    logits: Tensor, targets: np.ndarray, mask: np.ndarray, label_smoothing: float = 0.0
) -> Tensor:
    """Summed token cross-entropy over valid positions.

    Smoothing mixes the one-hot target with the uniform distribution over
    the full vocabulary.
    """
    b, t, _ = logits.shape
    ls = tt.log_softmax(logits, axis=-1)
    rows = np.repeat(np.arange(b), t)
    cols = np.tile(np.arange(t), b)
    picked = ls[rows, cols, targets.reshape(-1).astype(np.int64)].reshape(b, t)
    nll = -tt.tsum(picked * Tensor(mask))
    if label_smoothing == 0.0:
        return nll
    uniform = -tt.tsum(tt.mean(ls, axis=-1) * Tensor(mask))
    return tt.mul(nll, 1.0 - label_smoothing) + tt.mul(uniform, label_smoothing)

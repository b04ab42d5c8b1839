"""Network building blocks on top of the autodiff tensors.

A Module tracks parameters and submodules by attribute assignment, in
insertion order, so checkpoint paths are deterministic.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    affine,
    concat,
    embed_lookup,
    gelu,
    layer_norm,
    matmul,
    merge_heads,
    mul,
    reshape,
    softmax,
    split_heads,
    swapaxes,
)

MASK_FILL = -1e30


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for n, c in self._children.items():
            yield from c.named_parameters(prefix + n + "/")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grads(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self._n = len(mods)
        for i, m in enumerate(mods):
            setattr(self, str(i), m)

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))

    def __getitem__(self, i):
        return getattr(self, str(i))

    def __len__(self):
        return self._n


def _state_key(name: str, prefix: str, lora_prefix: Optional[str]) -> str:
    if lora_prefix is not None and ("lora_down" in name or "lora_up" in name):
        return lora_prefix + name.replace("lora_down", "down").replace("lora_up", "up")
    return prefix + name


def collect_state(module: Module, prefix: str, lora_prefix: Optional[str] = None) -> dict:
    """Snapshot parameters as plain arrays under a checkpoint path prefix.

    Adapter weights go under ``lora_prefix`` when given, so a frozen base and
    its adapters occupy separate namespaces in the container.
    """
    return {
        _state_key(name, prefix, lora_prefix): p.data.copy()
        for name, p in module.named_parameters()
    }


def load_state(module: Module, tensors: dict, prefix: str,
               lora_prefix: Optional[str] = None):
    for name, p in module.named_parameters():
        key = _state_key(name, prefix, lora_prefix)
        if key not in tensors:
            raise KeyError(f"checkpoint is missing parameter '{key}'")
        arr = np.asarray(tensors[key])
        if arr.shape != p.data.shape:
            raise ShapeError(
                f"checkpoint parameter '{key}' has shape {arr.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = arr.astype(np.float64).copy()


def param(rng: np.random.Generator, shape, std: Optional[float] = None) -> Tensor:
    if std is None:
        std = 1.0 / math.sqrt(shape[0])
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def batch_rows(p: Tensor, batch: int) -> Tensor:
    """Lay a [T, d] parameter out as [batch, T, d] (gradient sums over batch)."""
    zeros = Tensor(np.zeros((batch,) + p.data.shape))
    return add(zeros, p)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng=None, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if zero_init:
            self.weight = zeros_param((n_in, n_out))
        else:
            self.weight = param(rng, (n_in, n_out))
        self.bias = zeros_param((n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.data.ndim == 1
        if squeeze:
            x = reshape(x, (1, x.data.shape[0]))
        y = affine(x, self.weight, self.bias)
        if squeeze:
            y = reshape(y, (self.n_out,))
        return y


class LoraLinear(Module):
    """Linear layer with an optional low-rank additive adapter.

    The up-projection starts at zero, so the adapted layer equals the base
    layer until the adapter trains. ``freeze_base`` detaches the base weights
    from optimization without touching the adapter.
    """

    def __init__(self, n_in: int, n_out: int, rng, rank: int = 0,
                 scaling: float = 1.0, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.n_in, self.n_out, self.rank, self.scaling = n_in, n_out, rank, scaling
        if zero_init:
            self.weight = zeros_param((n_in, n_out))
        else:
            self.weight = param(rng, (n_in, n_out))
        self.bias = zeros_param((n_out,)) if bias else None
        if rank > 0:
            self.lora_down = param(rng, (n_in, rank))
            self.lora_up = zeros_param((rank, n_out))
        else:
            self.lora_down = None
            self.lora_up = None

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.data.ndim == 1
        if squeeze:
            x = reshape(x, (1, x.data.shape[0]))
        y = affine(x, self.weight, self.bias)
        if self.rank > 0:
            y = add(y, mul(matmul(matmul(x, self.lora_down), self.lora_up), self.scaling))
        if squeeze:
            y = reshape(y, (self.n_out,))
        return y

    def freeze_base(self):
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False


class Embedding(Module):
    def __init__(self, n_rows: int, width: int, rng, std: float = 0.1):
        super().__init__()
        self.table = param(rng, (n_rows, width), std=std)

    def __call__(self, ids) -> Tensor:
        return embed_lookup(self.table, ids)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = zeros_param((width,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


def mask_to_additive(key_mask: np.ndarray) -> Tensor:
    """Boolean pad mask [batch, n_k] -> additive [batch, 1, 1, n_k] constant.

    Constants broadcast freely in ``add``, so one small array serves every
    head and query row.
    """
    m = np.asarray(key_mask, dtype=bool)
    if m.ndim == 1:
        m = m[None, :]
    return Tensor(np.where(m, MASK_FILL, 0.0)[:, None, None, :])


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head splitting.

    Accepts [L, d] or [batch, L, d] inputs; self-attention is the
    ``kv_in is None`` case. ``key_mask`` marks key positions (True = ignored).
    """

    def __init__(self, width: int, heads: int, rng, rank: int = 0,
                 zero_init_out: bool = False):
        super().__init__()
        if width % heads != 0:
            raise ShapeError(f"attention width {width} not divisible by {heads} heads")
        self.width, self.heads = width, heads
        self.head_dim = width // heads
        self.wq = LoraLinear(width, width, rng, rank=rank)
        self.wk = LoraLinear(width, width, rng, rank=rank)
        self.wv = LoraLinear(width, width, rng, rank=rank)
        self.wo = LoraLinear(width, width, rng, rank=rank, zero_init=zero_init_out)

    def __call__(self, q_in: Tensor, kv_in: Optional[Tensor] = None,
                 key_mask: Optional[np.ndarray] = None) -> Tensor:
        if kv_in is None:
            kv_in = q_in
        squeeze = q_in.data.ndim == 2
        if squeeze:
            q_in = reshape(q_in, (1,) + q_in.data.shape)
            kv_in = reshape(kv_in, (1,) + kv_in.data.shape) if kv_in is not q_in else q_in
        b, n_q, _ = q_in.data.shape
        n_k = kv_in.data.shape[1]

        if n_k == 1 and key_mask is None:
            # one key: the attention weight is exactly 1 regardless of the
            # query, so the context is the value row broadcast to every query
            v = self.wv(kv_in)
            from .tensor import expand
            out = self.wo(expand(v, 1, n_q))
        else:
            q = split_heads(self.wq(q_in), self.heads)
            k = split_heads(self.wk(kv_in), self.heads)
            v = split_heads(self.wv(kv_in), self.heads)

            scores = mul(matmul(q, swapaxes(k, 2, 3)), 1.0 / math.sqrt(self.head_dim))
            if key_mask is not None:
                scores = add(scores, mask_to_additive(key_mask))
            weights = softmax(scores)
            out = self.wo(merge_heads(matmul(weights, v)))
        if squeeze:
            out = reshape(out, (n_q, self.width))
        return out


class Mlp(Module):
    def __init__(self, width: int, hidden: int, rng, rank: int = 0, out_width: Optional[int] = None):
        super().__init__()
        self.fc1 = LoraLinear(width, hidden, rng, rank=rank)
        self.fc2 = LoraLinear(hidden, out_width or width, rng, rank=rank)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm residual block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, width: int, heads: int, rng, mlp_ratio: int = 4, rank: int = 0):
        super().__init__()
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, rng, rank=rank)
        self.ln2 = LayerNorm(width)
        self.mlp = Mlp(width, mlp_ratio * width, rng, rank=rank)

    def __call__(self, x: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        x = add(x, self.attn(self.ln1(x), key_mask=key_mask))
        return add(x, self.mlp(self.ln2(x)))


class MapPool(Module):
    """Attention pooling: one learned seed query over a token set, optionally
    followed by an MLP.

    No positional information enters, so the output is invariant to token
    permutation and duplication. An optional prefix token sequence is
    prepended to the keys/values before pooling. Without the MLP the raw
    pooled vector (width ``width``) comes back for an external head to
    consume.
    """

    def __init__(self, width: int, heads: int, out_width: int, hidden: int, rng,
                 rank: int = 0, include_mlp: bool = True):
        super().__init__()
        self.seed = param(rng, (1, width), std=0.1)
        self.ln = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, rng, rank=rank)
        self.mlp = Mlp(width, hidden, rng, rank=rank, out_width=out_width) if include_mlp else None
        self.out_width = out_width if include_mlp else width

    def __call__(self, tokens: Tensor, key_mask: Optional[np.ndarray] = None,
                 prefix: Optional[Tensor] = None) -> Tensor:
        if tokens.data.ndim == 2:
            tokens = reshape(tokens, (1,) + tokens.data.shape)
            if prefix is not None and prefix.data.ndim == 2:
                prefix = reshape(prefix, (1,) + prefix.data.shape)
        b, n_t, d = tokens.data.shape
        if n_t < 1:
            raise ShapeError("map pooling needs at least one token")
        keys = self.ln(tokens)
        if prefix is not None:
            keys = concat([prefix, keys], axis=1)
            if key_mask is not None:
                m = np.asarray(key_mask, dtype=bool)
                if m.ndim == 1:
                    m = np.broadcast_to(m[None, :], (b, n_t))
                pad = np.zeros((b, prefix.data.shape[1]), dtype=bool)
                key_mask = np.concatenate([pad, m], axis=1)
        seed = batch_rows(self.seed, b)
        pooled = reshape(self.attn(seed, keys, key_mask=key_mask), (b, d))
        return self.mlp(pooled) if self.mlp is not None else pooled

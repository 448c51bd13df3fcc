"""Parameter registry and transformer building blocks (pre-norm throughout).

Blocks operate on unbatched (L, h) tensors; batching across instances is the
trainer's job (losses are reduced in fixed order, so results stay
deterministic).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamBag:
    """Flat name -> Tensor registry backing checkpoints and the optimizer."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = ad.parameter(array, name)
        self._params[name] = t
        return t

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return sorted(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in state.items():
            if self._params[k].data.shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != expected {self._params[k].data.shape}")
            self._params[k].data = np.asarray(v, dtype=np.float64).copy()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None


class Linear:
    def __init__(self, bag: ParamBag, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else rng.normal(0.0, 0.02, size=(d_in, d_out))
        self.w = bag.param(f"{name}.w", w)
        self.b = bag.param(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.w, self.b)


class LayerNorm:
    def __init__(self, bag: ParamBag, name: str, d: int):
        self.gain = bag.param(f"{name}.gain", np.ones(d))
        self.bias = bag.param(f"{name}.bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class FeedForward:
    """Two-layer GELU MLP with a 4x inner width."""

    def __init__(self, bag: ParamBag, name: str, d: int, rng: np.random.Generator):
        self.lin1 = Linear(bag, f"{name}.lin1", d, 4 * d, rng)
        self.lin2 = Linear(bag, f"{name}.lin2", 4 * d, d, rng)

    def __call__(self, x: Tensor, drop: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        h = ad.gelu(self.lin1(x))
        if drop > 0.0 and rng is not None:
            h = ad.dropout(h, drop, rng)
        return self.lin2(h)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(L, h) -> (n_heads, L, h/n_heads)."""
    return ad.heads_split(x, n_heads)


def merge_heads(x: Tensor) -> Tensor:
    """(n_heads, L, h_head) -> (L, h)."""
    return ad.heads_merge(x)


class MultiHeadAttention:
    """Standard scaled dot-product attention with separate q / kv inputs."""

    def __init__(self, bag: ParamBag, name: str, h: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.h = h
        self.q_proj = Linear(bag, f"{name}.q", h, h, rng)
        self.k_proj = Linear(bag, f"{name}.k", h, h, rng)
        self.v_proj = Linear(bag, f"{name}.v", h, h, rng)
        self.out_proj = Linear(bag, f"{name}.out", h, h, rng)

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        q = split_heads(self.q_proj(queries), self.n_heads)
        k = split_heads(self.k_proj(memory), self.n_heads)
        v = split_heads(self.v_proj(memory), self.n_heads)
        scale = 1.0 / np.sqrt(self.h // self.n_heads)
        weights = ad.softmax(ad.scaled_matmul(q, ad.transpose(k, (0, 2, 1)), scale), axis=-1)
        return self.out_proj(merge_heads(ad.matmul(weights, v)))


class SelfAttentionBlock:
    """Pre-norm: x + attn(ln(x)); x + ffn(ln(x))."""

    def __init__(self, bag: ParamBag, name: str, h: int, n_heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(bag, f"{name}.ln1", h)
        self.attn = MultiHeadAttention(bag, f"{name}.attn", h, n_heads, rng)
        self.ln2 = LayerNorm(bag, f"{name}.ln2", h)
        self.ffn = FeedForward(bag, f"{name}.ffn", h, rng)

    def __call__(self, x: Tensor, drop: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        normed = self.ln1(x)
        x = ad.add(x, self.attn(normed, normed))
        return ad.add(x, self.ffn(self.ln2(x), drop, rng))


class CrossAttentionBlock:
    """Pre-norm cross-attention: query stream attends to an external memory.
    ``key_bias`` (e.g. positional codes) is added to the keys only, the
    standard trick that lets decoder queries select memory positions."""

    def __init__(self, bag: ParamBag, name: str, h: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.h = h
        self.ln1 = LayerNorm(bag, f"{name}.ln1", h)
        self.attn = MultiHeadAttention(bag, f"{name}.attn", h, n_heads, rng)
        self.ln2 = LayerNorm(bag, f"{name}.ln2", h)
        self.ffn = FeedForward(bag, f"{name}.ffn", h, rng)

    def __call__(self, x: Tensor, memory: Tensor, drop: float = 0.0,
                 rng: np.random.Generator | None = None,
                 key_bias: np.ndarray | None = None,
                 bias_values: bool = False) -> Tensor:
        if key_bias is None:
            x = ad.add(x, self.attn(self.ln1(x), memory))
        else:
            a = self.attn
            biased = ad.add(memory, Tensor(key_bias))
            q = split_heads(a.q_proj(self.ln1(x)), self.n_heads)
            k = split_heads(a.k_proj(biased), self.n_heads)
            v = split_heads(a.v_proj(biased if bias_values else memory), self.n_heads)
            scale = 1.0 / np.sqrt(self.h // self.n_heads)
            w = ad.softmax(ad.scaled_matmul(q, ad.transpose(k, (0, 2, 1)), scale), axis=-1)
            x = ad.add(x, a.out_proj(merge_heads(ad.matmul(w, v))))
        return ad.add(x, self.ffn(self.ln2(x), drop, rng))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Classic sin/cos positional table, shape (length, dim)."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table

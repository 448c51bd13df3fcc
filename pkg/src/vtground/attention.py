"""Adaptive cross-attention with dummy tokens.

Video clips attend over text tokens plus query-conditioned dummy tokens; the
dummies take key-side attention mass but contribute no value, so the total
weight a clip places on the text -- its query correspondence -- becomes a
learnable gate in [0, 1]. Two losses shape the dummies: a binary
cross-entropy that pushes correspondence toward the clip's relevance label,
and an orthogonality penalty that stops encoded dummies from collapsing onto
one direction.

Activation variants (ablations): ``aca`` (softmax over text + dummy keys),
``plain_softmax`` (text keys only), ``sigmoid`` (elementwise logistic over
text keys), ``softmax_one`` (softmax with an implicit always-zero logit).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import EmptyQuery, NumericsError, ShapeError
from .nn import CrossAttentionBlock, Linear, ParamBag, merge_heads, split_heads

BCE_EPS = 1e-6


class DummyEncoder:
    """Conditions raw dummy tokens on the text query: each layer lets the
    dummies cross-attend to the word states, followed by a feed-forward
    block, all with residual connections. Zero layers mean identity."""

    def __init__(self, bag: ParamBag, name: str, h: int, n_heads: int,
                 n_layers: int, rng: np.random.Generator):
        self.layers = [
            CrossAttentionBlock(bag, f"{name}.layer{i}", h, n_heads, rng)
            for i in range(n_layers)
        ]

    def __call__(self, dummies: Tensor, word_states: Tensor,
                 drop: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        if word_states.shape[0] < 1:
            raise EmptyQuery("dummy encoder needs at least one word state")
        out = dummies
        for layer in self.layers:
            out = layer(out, word_states, drop, rng)
        return out


class AdaptiveCrossAttentionLayer:
    """One cross-attention layer where keys cover words plus encoded dummies
    while values cover words only, then a residual feed-forward block."""

    def __init__(self, bag: ParamBag, name: str, h: int, n_heads: int, rng: np.random.Generator):
        self.h = h
        self.n_heads = n_heads
        self.ln1 = _ln(bag, f"{name}.ln1", h)
        self.q_proj = Linear(bag, f"{name}.q", h, h, rng)
        self.k_proj = Linear(bag, f"{name}.k", h, h, rng)
        self.v_proj = Linear(bag, f"{name}.v", h, h, rng)
        self.out_proj = Linear(bag, f"{name}.out", h, h, rng)
        self.ln2 = _ln(bag, f"{name}.ln2", h)
        self.ffn = _ffn(bag, f"{name}.ffn", h, rng)

    def __call__(self, clips: Tensor, words: Tensor, dummies: Tensor | None,
                 variant: str = "aca", drop: float = 0.0,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Returns (fused clips (L_v, h), per-head weights (n_heads, L_v, L_q + L_d)).

        Dummy columns are identically zero for every variant except ``aca``.
        """
        n_words = words.shape[0]
        n_dummies = 0 if dummies is None else dummies.shape[0]
        if variant == "aca" and n_dummies == 0:
            variant = "plain_softmax"

        q = split_heads(self.q_proj(self.ln1(clips)), self.n_heads)
        keys_in = ad.concat([words, dummies], axis=0) if (variant == "aca" and n_dummies) else words
        k = split_heads(self.k_proj(keys_in), self.n_heads)
        v = split_heads(self.v_proj(words), self.n_heads)

        scale = 1.0 / np.sqrt(self.h // self.n_heads)
        logits = ad.scaled_matmul(q, ad.transpose(k, (0, 2, 1)), scale)
        if not np.isfinite(logits.data).all():
            raise NumericsError("non-finite attention logits")

        if variant == "aca":
            weights = ad.softmax(logits, axis=-1)
            text_weights = weights[:, :, :n_words]
        elif variant == "plain_softmax":
            weights = ad.softmax(logits, axis=-1)
            text_weights = weights
        elif variant == "sigmoid":
            weights = ad.sigmoid(logits)
            text_weights = weights
        elif variant == "softmax_one":
            # softmax with an implicit extra key whose logit is fixed at zero
            zero_col = Tensor(np.zeros(logits.shape[:-1] + (1,)))
            weights = ad.softmax(ad.concat([logits, zero_col], axis=-1), axis=-1)[:, :, :n_words]
            text_weights = weights
        else:
            raise ValueError(f"unknown attention variant {variant!r}")

        if variant != "aca" and n_dummies:
            pad = Tensor(np.zeros((self.n_heads, clips.shape[0], n_dummies)))
            weights = ad.concat([weights, pad], axis=-1)

        attended = merge_heads(ad.matmul(text_weights, v))
        fused = ad.add(clips, self.out_proj(attended))
        fused = ad.add(fused, self.ffn(self.ln2(fused), drop, rng))
        return fused, weights


def _ln(bag, name, h):
    from .nn import LayerNorm

    return LayerNorm(bag, name, h)


def _ffn(bag, name, h, rng):
    from .nn import FeedForward

    return FeedForward(bag, name, h, rng)


@dataclass
class AttentionRecord:
    """Cross-attention outcome for one instance: head-and-layer-averaged
    weight map, per-clip query correspondence, fused clip states, and the raw
    per-head maps per layer for diagnostics."""

    attention: Tensor        # (L_v, L_q + L_d)
    correspondence: Tensor   # (L_v,) in [0, 1]
    fused: Tensor            # (L_v, h)
    per_head: list[np.ndarray]
    n_words: int


class AdaptiveCrossAttention:
    """Stack of adaptive cross-attention layers. The final layer's query
    projection doubles as the saliency-token projector (shared parameters)."""

    def __init__(self, bag: ParamBag, name: str, h: int, n_heads: int,
                 n_layers: int, rng: np.random.Generator):
        self.layers = [
            AdaptiveCrossAttentionLayer(bag, f"{name}.layer{i}", h, n_heads, rng)
            for i in range(n_layers)
        ]

    @property
    def saliency_query_proj(self) -> Linear:
        return self.layers[-1].q_proj

    def __call__(self, clips: Tensor, words: Tensor, dummies: Tensor | None,
                 variant: str = "aca", drop: float = 0.0,
                 rng: np.random.Generator | None = None) -> AttentionRecord:
        n_words = words.shape[0]
        fused = clips
        map_sum: Tensor | None = None
        per_head: list[np.ndarray] = []
        for layer in self.layers:
            fused, weights = layer(fused, words, dummies, variant, drop, rng)
            head_avg = ad.tmean(weights, axis=0)
            map_sum = head_avg if map_sum is None else ad.add(map_sum, head_avg)
            per_head.append(weights.data.copy())
        avg_map = ad.mul(map_sum, 1.0 / len(self.layers))
        if variant == "sigmoid":
            # logistic weights are not normalized; the mean over text keys is
            # the bounded analog of the text-mass sum
            corr = ad.tmean(avg_map[:, :n_words], axis=-1)
        else:
            corr = query_correspondence(avg_map, n_words)
        return AttentionRecord(
            attention=avg_map, correspondence=corr, fused=fused,
            per_head=per_head, n_words=n_words,
        )


def query_correspondence(attention_map: Tensor, n_words: int) -> Tensor:
    """Per-clip total attention mass on text keys: the sum over the first
    ``n_words`` columns of the (head-averaged) attention map."""
    return ad.tsum(attention_map[:, :n_words], axis=-1)


def loss_bce(correspondence: Tensor, relevance: np.ndarray) -> Tensor:
    """Binary cross-entropy between query correspondence and clip relevance,
    mean over clips, with the correspondence clamped to [eps, 1 - eps]."""
    relevance = np.asarray(relevance, dtype=np.float64)
    if correspondence.shape != relevance.shape:
        raise ShapeError(
            f"correspondence {correspondence.shape} vs relevance {relevance.shape}")
    p = ad.clip(correspondence, BCE_EPS, 1.0 - BCE_EPS)
    a = Tensor(relevance)
    ll = ad.add(ad.mul(a, ad.log(p)), ad.mul(1.0 - relevance, ad.log(ad.sub(1.0, p))))
    return ad.mul(ad.tmean(ll), -1.0)


def loss_ortho(encoded_dummies: Tensor) -> Tensor:
    """Mean absolute pairwise cosine between encoded dummies; zero when all
    pairs are orthogonal, and identically zero for a single dummy."""
    n = encoded_dummies.shape[0]
    if n < 2:
        return Tensor(0.0)
    unit = ad.l2_normalize(encoded_dummies, axis=-1)
    gram = ad.matmul(unit, ad.transpose(unit))
    off_diag = Tensor(1.0 - np.eye(n))
    total = ad.tsum(ad.mul(ad.absolute(gram), off_diag))
    return ad.mul(total, 1.0 / (n * (n - 1)))

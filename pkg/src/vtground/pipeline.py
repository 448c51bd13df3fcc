"""Model assembly, training loop, checkpointing and the gradient checker.

The full forward pass wires the components in order: input projections with
modality vectors -> dummy encoding -> adaptive cross-attention (weights,
correspondence, fused clips) -> correlation learner (training only) ->
saliency token -> encoder over [token; clips] -> saliency scores -> decoder.
Ablation rows toggle components purely through :class:`core.ModelConfig`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import attention as attn_mod
from . import correlation as corr_mod
from . import objectives as obj_mod
from . import saliency as sal_mod
from .autodiff import Tensor
from .core import (
    ConfigError,
    FeatureSequence,
    GroundTruth,
    IoError,
    LossWeights,
    ModelConfig,
    NumericsError,
    ParseError,
    Prediction,
    validate_config,
)
from .data import DatasetRecord, PARAM_MAGIC
from .heads import Decoder, DecoderOutput, Encoder, decoder_prediction, loss_mr, match
from .nn import Linear, LayerNorm, ParamBag, SelfAttentionBlock

CHECKPOINT_MAGIC = b"CGCKPT01"


@dataclass
class ForwardResult:
    prediction: Prediction
    scores: Tensor
    decoder_output: DecoderOutput
    saliency_token: Tensor
    attention: attn_mod.AttentionRecord | None = None
    encoded_dummies: Tensor | None = None
    prototypes: corr_mod.PrototypeSet | None = None
    guidance: np.ndarray | None = None
    candidate_w: Tensor | None = None
    topk: np.ndarray | None = None

    def intermediates(self) -> dict:
        """Numpy snapshots of the quantities tests and analyses inspect."""
        out: dict = {
            "saliency_scores": self.scores.data.copy(),
            "saliency_token": self.saliency_token.data.copy(),
        }
        if self.attention is not None:
            out["attention"] = self.attention.attention.data.copy()
            out["attention_per_head"] = [m.copy() for m in self.attention.per_head]
            out["correspondence"] = self.attention.correspondence.data.copy()
            out["fused"] = self.attention.fused.data.copy()
        if self.guidance is not None:
            out["guidance"] = self.guidance.copy()
        if self.candidate_w is not None:
            out["candidate_weights"] = self.candidate_w.data.copy()
            out["topk"] = None if self.topk is None else self.topk.copy()
        return out


class GroundingModel:
    """All learnable state for one configuration; parameter layout is a pure
    function of the config and init seed."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = validate_config(cfg)
        self.seed = seed
        rng = np.random.default_rng([seed, 0x517EED])
        bag = ParamBag()
        self.bag = bag
        h, heads = cfg.hidden, cfg.n_heads

        self.vid_proj = Linear(bag, "input.vid", cfg.d_feat, h, rng)
        self.vid_norm = LayerNorm(bag, "input.vid_norm", h)
        self.txt_proj = Linear(bag, "input.txt", cfg.d_feat, h, rng)
        self.txt_norm = LayerNorm(bag, "input.txt_norm", h)
        self.vid_modality = bag.param("input.vid_modality", rng.normal(0.0, 0.02, size=h))
        self.txt_modality = bag.param("input.txt_modality", rng.normal(0.0, 0.02, size=h))

        if cfg.use_dummies:
            self.dummies = bag.param("dummies.raw", rng.normal(0.0, 0.02, size=(cfg.n_dummies, h)))
            if cfg.use_dummy_encoder and cfg.dummy_enc_layers > 0:
                self.dummy_encoder = attn_mod.DummyEncoder(
                    bag, "dummy_enc", h, heads, cfg.dummy_enc_layers, rng)
            else:
                self.dummy_encoder = None
        else:
            self.dummies = None
            self.dummy_encoder = None

        self.aca = attn_mod.AdaptiveCrossAttention(bag, "aca", h, heads, cfg.aca_layers, rng)
        if not cfg.use_cross_attention:
            self.fusion = [SelfAttentionBlock(bag, f"fusion.layer{i}", h, heads, rng)
                           for i in range(cfg.aca_layers)]
        else:
            self.fusion = None

        if cfg.use_correlation:
            self.moment_token = bag.param("corr.moment_token", rng.normal(0.0, 0.02, size=h))
            self.sentence_token = bag.param("corr.sentence_token", rng.normal(0.0, 0.02, size=h))
            self.moment_pooler = corr_mod.PrototypePooler(
                bag, "corr.moment", h, heads, cfg.moment_enc_layers, rng)
            self.sentence_pooler = corr_mod.PrototypePooler(
                bag, "corr.sentence", h, heads, cfg.sentence_enc_layers, rng)
        else:
            self.moment_pooler = self.sentence_pooler = None
            self.moment_token = self.sentence_token = None

        if cfg.use_saliency_detector:
            self.pool = bag.param("msd.pool", rng.normal(0.0, 0.02, size=(cfg.pool_size, h)))
            self.plain_token = None
        else:
            self.pool = None
            self.plain_token = bag.param("msd.plain_token", rng.normal(0.0, 0.02, size=h))

        self.encoder = Encoder(bag, "encoder", h, heads, cfg.enc_layers, rng)
        self.decoder = Decoder(bag, "decoder", h, heads, cfg.dec_layers,
                               cfg.n_moment_queries, rng)

    # -- component passes -------------------------------------------------

    def _project_video(self, clips_raw: np.ndarray, training: bool,
                       rng: np.random.Generator | None) -> Tensor:
        drop = self.cfg.dropout if training else 0.0
        clips = ad.add(self.vid_norm(self.vid_proj(Tensor(clips_raw))), self.vid_modality)
        if drop > 0.0 and rng is not None:
            clips = ad.dropout(clips, drop, rng)
        return clips

    def _project_words(self, words_raw: np.ndarray, training: bool,
                       rng: np.random.Generator | None) -> Tensor:
        drop = self.cfg.dropout if training else 0.0
        words = ad.add(self.txt_norm(self.txt_proj(Tensor(words_raw))), self.txt_modality)
        if drop > 0.0 and rng is not None:
            words = ad.dropout(words, drop, rng)
        return words

    def _encode_dummies(self, words: Tensor, training: bool,
                        rng: np.random.Generator | None) -> Tensor | None:
        if self.dummies is None:
            return None
        if self.dummy_encoder is None:
            return self.dummies
        drop = self.cfg.dropout if training else 0.0
        return self.dummy_encoder(self.dummies, words, drop, rng)

    def _fuse(self, clips: Tensor, words: Tensor, encoded_dummies: Tensor | None,
              training: bool, rng: np.random.Generator | None,
              ) -> tuple[Tensor, attn_mod.AttentionRecord | None]:
        drop = self.cfg.dropout if training else 0.0
        if self.cfg.use_cross_attention:
            record = self.aca(clips, words, encoded_dummies,
                              self.cfg.attention_variant, drop, rng)
            return record.fused, record
        seq = ad.concat([clips, words], axis=0)
        for block in self.fusion:
            seq = block(seq, drop, rng)
        return seq[: clips.shape[0]], None

    def forward(self, features: FeatureSequence, gt: GroundTruth | None = None,
                training: bool = False, rng: np.random.Generator | None = None,
                frozen: dict | None = None, debug: bool = False) -> ForwardResult:
        cfg = self.cfg
        drop = cfg.dropout if training else 0.0
        clips = self._project_video(features.clips, training, rng)
        words = self._project_words(features.words, training, rng)
        encoded_dummies = self._encode_dummies(words, training, rng)
        fused, record = self._fuse(clips, words, encoded_dummies, training, rng)

        if record is not None:
            correspondence = record.correspondence
        else:
            correspondence = Tensor(np.ones(fused.shape[0]))

        prototypes = None
        guidance = None
        if training and cfg.use_correlation and gt is not None and record is not None:
            moment_pos, clips_pos, moment_neg = corr_mod.build_visual_prototypes(
                self.moment_pooler, self.moment_token, fused, gt.relevance, drop, rng)
            sent_pos, words_proj, sent_neg, dummies_proj = corr_mod.build_textual_prototypes(
                self.sentence_pooler, self.sentence_token, words, encoded_dummies, drop, rng)
            prototypes = corr_mod.PrototypeSet(
                moment_pos=moment_pos, moment_neg=moment_neg,
                sentence_pos=sent_pos, sentence_neg=sent_neg,
                clips_pos=clips_pos, words_proj=words_proj, dummies_proj=dummies_proj)
            if clips_pos is not None:
                if frozen is not None and "guidance" in frozen:
                    guidance = frozen["guidance"]
                else:
                    guidance = corr_mod.guidance_map(clips_pos, words_proj, dummies_proj)
                    if frozen is not None:
                        frozen["guidance"] = guidance

        candidate_w = None
        topk = None
        if cfg.use_saliency_detector:
            ctx = sal_mod.context_token(fused)
            candidate_w = sal_mod.candidate_weights(fused, ctx, self.pool, correspondence)
            frozen_idx = None if frozen is None else frozen.get("topk")
            token, topk = sal_mod.build_saliency_token(
                ctx, self.pool, candidate_w, cfg.top_k, frozen_idx)
            if frozen is not None:
                frozen.setdefault("topk", topk)
        else:
            token = self.plain_token

        seq = ad.concat([ad.reshape(token, (1, -1)), fused], axis=0)
        encoded = self.encoder(seq, drop=drop, rng=rng)
        scores = sal_mod.saliency_scores(encoded, self.aca.saliency_query_proj, cfg.hidden)
        dec_out = self.decoder(encoded[1:], drop, rng)

        prediction = Prediction(spans=tuple(decoder_prediction(dec_out)),
                                saliency=scores.data.copy())
        result = ForwardResult(
            prediction=prediction, scores=scores, decoder_output=dec_out,
            saliency_token=token, attention=record, encoded_dummies=encoded_dummies,
            prototypes=prototypes, guidance=guidance, candidate_w=candidate_w, topk=topk)
        if debug:
            _debug_assert(result, cfg)
        return result

    def negative_scores(self, features: FeatureSequence, partner: FeatureSequence,
                        training: bool, rng: np.random.Generator | None,
                        frozen: dict | None = None) -> tuple[Tensor, Tensor]:
        """Saliency scores and correspondence for this video paired with an
        unmatched query (the partner's words). The correlation branch and
        decoder are skipped: negative pairs feed only the suppression losses."""
        cfg = self.cfg
        drop = cfg.dropout if training else 0.0
        clips = self._project_video(features.clips, training, rng)
        words = self._project_words(partner.words, training, rng)
        encoded_dummies = self._encode_dummies(words, training, rng)
        fused, record = self._fuse(clips, words, encoded_dummies, training, rng)
        correspondence = record.correspondence if record is not None \
            else Tensor(np.ones(fused.shape[0]))
        if cfg.use_saliency_detector:
            ctx = sal_mod.context_token(fused)
            cw = sal_mod.candidate_weights(fused, ctx, self.pool, correspondence)
            frozen_idx = None if frozen is None else frozen.get("neg_topk")
            token, idx = sal_mod.build_saliency_token(ctx, self.pool, cw, cfg.top_k, frozen_idx)
            if frozen is not None:
                frozen.setdefault("neg_topk", idx)
        else:
            token = self.plain_token
        seq = ad.concat([ad.reshape(token, (1, -1)), fused], axis=0)
        encoded = self.encoder(seq, drop=drop, rng=rng)
        scores = sal_mod.saliency_scores(encoded, self.aca.saliency_query_proj, cfg.hidden)
        return scores, correspondence


def _debug_assert(result: ForwardResult, cfg: ModelConfig) -> None:
    if result.attention is not None:
        if cfg.attention_variant in ("aca", "plain_softmax"):
            for per_head in result.attention.per_head:
                sums = per_head.sum(axis=-1)
                if not np.allclose(sums, 1.0, atol=1e-6):
                    raise NumericsError("attention rows do not sum to 1")
        corr = result.attention.correspondence.data
        if corr.min() < -1e-9 or corr.max() > 1.0 + 1e-9:
            raise NumericsError("correspondence left [0, 1]")
    if result.guidance is not None and result.guidance.size:
        if not np.allclose(result.guidance.sum(axis=-1), 1.0, atol=1e-6):
            raise NumericsError("guidance rows do not sum to 1")


# -- batch losses -------------------------------------------------------------------


def batch_losses(model: GroundingModel, batch: list[DatasetRecord], weights: LossWeights,
                 rng: np.random.Generator | None, training: bool = True,
                 frozen: dict[str, dict] | None = None,
                 ) -> tuple[dict[str, Tensor], dict[str, float]]:
    """All loss terms, each averaged over the batch in a fixed order.

    ``frozen`` (keyed by query id) pins data-dependent discrete structure --
    matching assignments, top-K selections, margin pairs -- across repeated
    calls, which the finite-difference harness relies on.
    """
    cfg = model.cfg
    n = len(batch)
    zero = Tensor(0.0)
    acc = {k: zero for k in ("mr", "margin", "rank", "neg", "attn", "bce",
                             "ortho", "align", "distill")}
    neg_partners = obj_mod.negative_pair_indices([r.features.video_id for r in batch])

    results: list[ForwardResult] = []
    plans: list[dict] = []
    for rec in batch:
        plan = None if frozen is None else frozen.setdefault(rec.features.query_id, {})
        plans.append(plan)
        results.append(model.forward(rec.features, rec.gt, training=training,
                                     rng=rng, frozen=plan))

    neg_scores: list[Tensor | None] = [None] * n
    neg_corr: list[Tensor | None] = [None] * n
    for b, partner in enumerate(neg_partners):
        if partner is None:
            continue
        s, c = model.negative_scores(batch[b].features, batch[partner].features,
                                     training, rng, plans[b])
        neg_scores[b] = s
        neg_corr[b] = c if cfg.use_cross_attention else None

    n_neg = sum(1 for s in neg_scores if s is not None)

    protos: list[corr_mod.PrototypeSet] = []
    for b, (rec, res, plan) in enumerate(zip(batch, results, plans)):
        gt = rec.gt
        assignment = None if plan is None else plan.get("assignment")
        mr, assignment = loss_mr(res.decoder_output, list(gt.spans), weights, assignment)
        if plan is not None:
            plan.setdefault("assignment", assignment)
        acc["mr"] = ad.add(acc["mr"], mr)

        pair = None if plan is None else plan.get("pair")
        if pair is None:
            pair = obj_mod.sample_margin_pair(gt.saliency, rng) if rng is not None else None
            if plan is not None and pair is not None:
                plan.setdefault("pair", pair)
        hd = obj_mod.highlight_losses(res.scores, gt.saliency, pair, neg_scores[b], weights)
        acc["margin"] = ad.add(acc["margin"], hd["margin"])
        acc["rank"] = ad.add(acc["rank"], hd["rank"])
        acc["neg"] = ad.add(acc["neg"], _scaled(hd["neg"], n, n_neg))

        if cfg.use_dummy_losses and res.attention is not None and res.encoded_dummies is not None:
            corr = res.attention.correspondence
            acc["bce"] = ad.add(acc["bce"], attn_mod.loss_bce(corr, gt.relevance.astype(float)))
            acc["ortho"] = ad.add(acc["ortho"], attn_mod.loss_ortho(res.encoded_dummies))
            abar_hd = obj_mod.highlight_losses(corr, gt.saliency, pair, neg_corr[b], weights)
            acc["attn"] = ad.add(acc["attn"], ad.add(ad.add(abar_hd["margin"], abar_hd["rank"]),
                                                     _scaled(abar_hd["neg"], n, n_neg)))

        if cfg.use_correlation and res.prototypes is not None:
            protos.append(res.prototypes)
            if res.guidance is not None:
                acc["distill"] = ad.add(acc["distill"], corr_mod.loss_distill(
                    res.attention.attention, res.guidance, gt.relevance,
                    cfg.distill_normalize_by_positives))

    for key in ("mr", "margin", "rank", "neg", "attn", "bce", "ortho", "distill"):
        acc[key] = ad.mul(acc[key], 1.0 / n)
    if protos:
        acc["align"] = corr_mod.loss_align(protos, weights.tau_align)
    acc["hl"] = ad.add(ad.add(acc["margin"], acc["rank"]), acc["neg"])

    breakdown = {k: float(v.data) for k, v in acc.items()}
    return acc, breakdown


def _scaled(term: Tensor, n: int, n_neg: int) -> Tensor:
    """Average the negative-pair term over pairs that exist while the outer
    loop divides by the full batch size."""
    if n_neg == 0:
        return Tensor(0.0)
    return ad.mul(term, n / n_neg)


# -- optimizer -----------------------------------------------------------------------


class Adam:
    """Adam with additive (L2-style) weight decay on the gradient and an
    optional global-norm gradient clip (standard in this model family)."""

    def __init__(self, bag: ParamBag, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4,
                 grad_clip: float | None = None):
        self.bag = bag
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in bag.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in bag.items()}

    def step(self) -> None:
        self.t += 1
        scale = 1.0
        if self.grad_clip is not None:
            sq = 0.0
            for name in self.bag.names():
                g = self.bag[name].grad
                if g is not None:
                    sq += float((g * g).sum())
            norm = np.sqrt(sq)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name in self.bag.names():
            p = self.bag[name]
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)


# -- training loop ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float | None = 1.0   # global gradient-norm clip; None disables
    eval_interval: int = 0          # 0: evaluate only after the final epoch
    target_r1_05: float | None = None      # early stop once both targets hit
    target_hd_map: float | None = None

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class TrainState:
    model: GroundingModel
    optimizer: Adam
    weights: LossWeights
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(cfg: ModelConfig, weights: LossWeights | None = None,
               train_cfg: TrainConfig | None = None, seed: int = 0) -> TrainState:
    weights = weights or LossWeights()
    train_cfg = train_cfg or TrainConfig()
    model = GroundingModel(cfg, seed=seed)
    optimizer = Adam(model.bag, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
                     grad_clip=train_cfg.grad_clip)
    rng = np.random.default_rng([seed, 0x7EA1])
    return TrainState(model=model, optimizer=optimizer, weights=weights, rng=rng, seed=seed)


def train(records: list[DatasetRecord], cfg: ModelConfig,
          weights: LossWeights | None = None, train_cfg: TrainConfig | None = None,
          seed: int = 0, eval_records: list[DatasetRecord] | None = None,
          state: TrainState | None = None, log=None, epoch_hook=None) -> TrainState:
    """Mini-batch training, deterministic given the seed. Emits one history
    entry per epoch with the loss breakdown and (optionally) eval metrics.
    A non-finite loss aborts with NumericsError, leaving the state at the
    last completed step."""
    from .evalkit import evaluate_dataset

    if not records:
        raise ConfigError("empty training dataset")
    weights = weights or LossWeights()
    train_cfg = train_cfg or TrainConfig()
    if state is None:
        state = init_state(cfg, weights, train_cfg, seed)

    n = len(records)
    for epoch in range(state.epoch, train_cfg.epochs):
        # fresh permutation each epoch: resuming from a checkpoint replays
        # the identical batch order because only the rng state matters
        order = state.rng.permutation(n)
        epoch_losses: list[float] = []
        parts_sum: dict[str, float] = {}
        for start in range(0, n, train_cfg.batch_size):
            batch = [records[i] for i in order[start:start + train_cfg.batch_size]]
            state.model.bag.zero_grad()
            parts, breakdown = batch_losses(state.model, batch, weights, state.rng)
            total = obj_mod.total_loss(parts, weights)
            if not np.isfinite(total.data):
                raise NumericsError(f"non-finite loss at step {state.step}")
            total.backward()
            state.optimizer.step()
            state.step += 1
            epoch_losses.append(float(total.data))
            for k, v in breakdown.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v
        state.epoch = epoch + 1

        entry = {
            "epoch": state.epoch,
            "loss": float(np.mean(epoch_losses)),
            "parts": {k: v / max(len(epoch_losses), 1) for k, v in sorted(parts_sum.items())},
        }
        due = train_cfg.eval_interval and state.epoch % train_cfg.eval_interval == 0
        last = state.epoch == train_cfg.epochs
        if eval_records and (due or last):
            report = evaluate_dataset(state.model, eval_records)
            entry["metrics"] = report.to_json()
            if (train_cfg.target_r1_05 is not None and train_cfg.target_hd_map is not None
                    and report.r1[0.5] >= train_cfg.target_r1_05
                    and report.hd_map >= train_cfg.target_hd_map):
                state.history.append(entry)
                if log:
                    log(entry)
                break
        state.history.append(entry)
        if log:
            log(entry)
        if epoch_hook:
            epoch_hook(state)
    return state


def predict_dataset(model: GroundingModel, records: list[DatasetRecord],
                    ) -> list[tuple[DatasetRecord, Prediction, np.ndarray | None]]:
    """Inference over a dataset: (record, prediction, correspondence) per
    instance; the correlation branch never runs at inference."""
    out = []
    with ad.no_grad():
        for rec in records:
            res = model.forward(rec.features, rec.gt, training=False)
            corr = None if res.attention is None else res.attention.correspondence.data.copy()
            out.append((rec, res.prediction, corr))
    return out


# -- checkpoints -------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path: Path | str) -> None:
    """Single-file checkpoint: magic, length-prefixed JSON manifest, then
    float64 tensor blocks (params and Adam moments) in the shared binary
    matrix layout. Bit-exact round trip."""
    bag = state.model.bag
    names = bag.names()
    header = {
        "version": 1,
        "config": asdict(state.model.cfg),
        "loss_weights": asdict(state.weights),
        "seed": state.seed,
        "init_seed": state.model.seed,
        "step": state.step,
        "epoch": state.epoch,
        "adam": {"lr": state.optimizer.lr, "weight_decay": state.optimizer.weight_decay,
                 "grad_clip": state.optimizer.grad_clip, "t": state.optimizer.t},
        "rng_state": state.rng.bit_generator.state,
        "tensors": names,
        "shapes": {n: list(bag[n].data.shape) for n in names},
    }
    blob = json.dumps(header).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for group in (
                {n: bag[n].data for n in names},
                {n: state.optimizer.m[n] for n in names},
                {n: state.optimizer.v[n] for n in names},
            ):
                for n in names:
                    _write_block(fh, group[n])
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def _write_block(fh, array: np.ndarray) -> None:
    mat = np.ascontiguousarray(np.atleast_2d(array), dtype="<f8")
    fh.write(PARAM_MAGIC)
    fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
    fh.write(mat.tobytes())


def _read_block(buf: memoryview, offset: int) -> tuple[np.ndarray, int]:
    if bytes(buf[offset:offset + 8]) != PARAM_MAGIC:
        raise ParseError("bad tensor block magic in checkpoint")
    rows, cols = struct.unpack("<II", buf[offset + 8:offset + 16])
    end = offset + 16 + rows * cols * 8
    data = np.frombuffer(buf[offset + 16:end], dtype="<f8").reshape(rows, cols)
    return data.astype(np.float64), end


def load_checkpoint(path: Path | str) -> TrainState:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    weights = LossWeights(**header["loss_weights"])
    state = init_state(cfg, weights,
                       TrainConfig(lr=header["adam"]["lr"],
                                   weight_decay=header["adam"]["weight_decay"],
                                   grad_clip=header["adam"].get("grad_clip")),
                       seed=header["seed"])
    state.step = header["step"]
    state.epoch = header["epoch"]
    state.optimizer.t = header["adam"]["t"]
    state.rng.bit_generator.state = header["rng_state"]

    buf = memoryview(blob)
    offset = 16 + hlen
    names = header["tensors"]
    shapes = header["shapes"]
    for target in ("params", "m", "v"):
        for n in names:
            data, offset = _read_block(buf, offset)
            data = data.reshape(shapes[n])
            if target == "params":
                state.model.bag[n].data = data.copy()
            elif target == "m":
                state.optimizer.m[n] = data.copy()
            else:
                state.optimizer.v[n] = data.copy()
    return state


# -- gradient checking ---------------------------------------------------------------------

GRADCHECK_TERMS = ("bce", "ortho", "align", "distill", "mr", "margin", "rank", "neg")


def _gradcheck_fixture(seed: int) -> tuple[GroundingModel, list[DatasetRecord], LossWeights]:
    from .core import desk_config
    from .core import MomentSpan

    cfg = desk_config(
        hidden=8, n_heads=2, d_feat=5, n_dummies=2, pool_size=3, top_k=2,
        n_moment_queries=3, enc_layers=1, dec_layers=1, aca_layers=1,
        dummy_enc_layers=1, moment_enc_layers=1, sentence_enc_layers=1,
        dropout=0.0,
    )
    rng = np.random.default_rng([seed, 0xF1D0])
    records = []
    for b in range(2):
        clips = rng.normal(size=(4, cfg.d_feat))
        words = rng.normal(size=(3, cfg.d_feat))
        saliency = np.array([0, 3, 4, 0]) if b == 0 else np.array([4, 0, 0, 2])
        span = MomentSpan(center=0.5, width=0.5) if b == 0 else MomentSpan(center=0.25, width=0.4)
        features = FeatureSequence(clips=clips, words=words,
                                   video_id=f"gc_v{b}", query_id=f"gc_q{b}")
        gt = GroundTruth(spans=(span,), saliency=saliency)
        records.append(DatasetRecord(features=features, gt=gt, duration_s=8.0))
    model = GroundingModel(cfg, seed=seed)
    # move parameters off their init point so no probe sits on a symmetry
    for _, p in model.bag.items():
        p.data = p.data + rng.normal(0.0, 0.05, size=p.data.shape)
    return model, records, LossWeights()


def _term_losses(model: GroundingModel, records: list[DatasetRecord],
                 weights: LossWeights, frozen: dict, term_rng_seed: int) -> dict[str, Tensor]:
    """One batch pass split into the eight checkable loss terms."""
    rng = np.random.default_rng(term_rng_seed)
    parts, _ = batch_losses(model, records, weights, rng, training=True, frozen=frozen)
    return {term: parts[term] for term in GRADCHECK_TERMS}


def gradient_check(seed: int = 0, coords_per_group: int = 3, step: float = 1e-4,
                   terms: tuple[str, ...] = GRADCHECK_TERMS) -> dict[str, dict]:
    """Compare analytic gradients of every loss term against central finite
    differences at sampled coordinates of every parameter group.

    Discrete structure (matching, top-K, margin pairs) is frozen at the base
    point. Relative error uses a 1e-3 floor in the denominator so that
    near-zero gradients are compared at an absolute tolerance of ~1e-7.
    """
    model, records, weights = _gradcheck_fixture(seed)
    frozen: dict[str, dict] = {r.features.query_id: {} for r in records}
    probe_rng = np.random.default_rng([seed, 0xFD])

    # base pass fills the frozen plans (assignments, pairs, top-K)
    _term_losses(model, records, weights, frozen, term_rng_seed=seed + 1)

    report: dict[str, dict] = {}
    for term in terms:
        model.bag.zero_grad()
        losses = _term_losses(model, records, weights, frozen, seed + 1)
        losses[term].backward()
        grads = {n: (model.bag[n].grad.copy() if model.bag[n].grad is not None
                     else np.zeros_like(model.bag[n].data)) for n in model.bag.names()}
        worst = 0.0
        worst_param = ""
        checked = 0
        for name in model.bag.names():
            p = model.bag[name]
            k = min(coords_per_group, p.data.size)
            coords = probe_rng.choice(p.data.size, size=k, replace=False)
            for flat in coords:
                orig = p.data.flat[flat]
                p.data.flat[flat] = orig + step
                with ad.no_grad():
                    f_plus = float(_term_losses(model, records, weights, frozen, seed + 1)[term].data)
                p.data.flat[flat] = orig - step
                with ad.no_grad():
                    f_minus = float(_term_losses(model, records, weights, frozen, seed + 1)[term].data)
                p.data.flat[flat] = orig
                fd = (f_plus - f_minus) / (2.0 * step)
                an = grads[name].flat[flat]
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
                checked += 1
                if rel > worst:
                    worst, worst_param = rel, name
        report[term] = {
            "max_rel_err": worst,
            "worst_param": worst_param,
            "coords_checked": checked,
            "passed": bool(worst <= 1e-4),
        }
    return report

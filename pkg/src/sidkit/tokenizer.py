"""Residual-quantization tokenizers.

Two families live here. The RQ-VAE couples per-modality MLP encoders and
decoders with L learnable codebooks trained by reconstruction + commitment
losses; it optionally routes gradients through the *whole* codebook by adding
a cosine-similarity surrogate term that cancels in the forward pass, so dead
centroids keep receiving updates. The residual k-means baseline has no
encoder or decoder: each level runs Lloyd's algorithm on the residuals left
by the previous one, and assignment afterwards is plain nearest-centroid.

All gradients are hand-written reverse mode over the fixed graph and are
validated against central finite differences with assignments frozen.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, EmbeddingRecord
from .errors import DataError, NumericalError, ShapeError
from .fusion import FusionConfig, ModalitySpec, fuse_encode_batch, multi_decode
from .nn import (
    AdamState,
    MlpParams,
    adam_step,
    cosine_sim_backward,
    cosine_sim_forward,
    mlp_backward,
    mlp_forward,
    mlp_init,
)

ASSIGNMENT_RULES = ("cosine", "dot", "abs_dot", "l2")

_QUANTIZE_CHUNK = 2048


@dataclass(frozen=True)
class SemanticId:
    """Ordered per-level codes, optionally extended with a dedup token."""

    codes: tuple[int, ...]
    dedup: int | None = None

    def __post_init__(self):
        if any(c < 0 for c in self.codes):
            raise ValueError(f"negative code in {self.codes}")
        if self.dedup is not None and self.dedup < 0:
            raise ValueError(f"negative dedup token {self.dedup}")

    @property
    def levels(self) -> int:
        return len(self.codes)

    def with_dedup(self, token: int) -> "SemanticId":
        return SemanticId(self.codes, token)

    def base(self) -> "SemanticId":
        return SemanticId(self.codes) if self.dedup is not None else self


@dataclass
class Codebook:
    """K centroid rows in the hidden space at one quantization level."""

    level: int
    centroids: np.ndarray  # (K, n)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(np.asarray(self.centroids, dtype=np.float64))
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ShapeError(
                f"codebook level {self.level} wants (K>=2, n) centroids, got {self.centroids.shape}"
            )

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class QuantizationTrace:
    """Per-level residuals h^0..h^L, chosen codes, and score vectors."""

    residuals: list[np.ndarray]
    codes: list[int]
    scores: list[np.ndarray]
    degenerate: bool = False


def level_scores(h: np.ndarray, centroids: np.ndarray, rule: str) -> np.ndarray:
    """Batched assignment scores (B, K); the chosen code maximizes its row.

    For rule "l2" the score is the negated squared distance, so argmax still
    selects the nearest centroid. Ties resolve to the lowest code index via
    first-occurrence argmax.
    """
    if rule == "cosine":
        sims, _ = cosine_sim_forward(h, centroids)
        return sims
    if rule == "dot":
        return h @ centroids.T
    if rule == "abs_dot":
        return np.abs(h @ centroids.T)
    if rule == "l2":
        diff = h[:, None, :] - centroids[None, :, :]
        return -np.sum(diff * diff, axis=2)
    raise ValueError(f"unknown assignment rule {rule!r}")


def quantize_residuals(
    codebooks: list[Codebook],
    h0: np.ndarray,
    rule: str,
    frozen_codes: np.ndarray | None = None,
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Run the residual recurrence over a batch of hidden vectors.

    Returns (codes (B, L), residuals [H^0..H^L], per-level score matrices,
    degenerate flags). With frozen_codes the argmax is skipped and the given
    assignments replayed, which keeps the loss smooth under perturbation.
    """
    h = np.asarray(h0, dtype=np.float64)
    if h.ndim != 2:
        raise ShapeError(f"quantize wants (batch, n) input, got shape {h.shape}")
    if h.shape[1] != codebooks[0].dim:
        raise ShapeError(
            f"hidden dim {h.shape[1]} != codebook dim {codebooks[0].dim}"
        )
    n_items = h.shape[0]
    codes = np.zeros((n_items, len(codebooks)), dtype=np.int64)
    residuals = [h]
    scores_per_level = []
    degenerate = np.zeros(n_items, dtype=bool)
    for level, book in enumerate(codebooks):
        if rule == "cosine":
            degenerate |= np.linalg.norm(h, axis=1) == 0.0
        scores = level_scores(h, book.centroids, rule)
        scores_per_level.append(scores)
        if frozen_codes is None:
            codes[:, level] = np.argmax(scores, axis=1)
        else:
            codes[:, level] = frozen_codes[:, level]
        h = h - book.centroids[codes[:, level]]
        residuals.append(h)
    return codes, residuals, scores_per_level, degenerate


@dataclass
class TokenizerModel:
    """RQ-VAE state: per-modality encoder/decoder pairs plus L codebooks."""

    fusion: FusionConfig
    codebooks: list[Codebook]
    assignment_rule: str = "cosine"
    ste_enabled: bool = True
    commitment_beta: float = 0.25

    def __post_init__(self):
        if self.assignment_rule not in ASSIGNMENT_RULES:
            raise ValueError(f"unknown assignment rule {self.assignment_rule!r}")
        for cb in self.codebooks:
            if cb.dim != self.fusion.hidden_dim:
                raise ShapeError(
                    f"codebook level {cb.level} dim {cb.dim} != hidden dim {self.fusion.hidden_dim}"
                )

    @property
    def levels(self) -> int:
        return len(self.codebooks)

    @property
    def hidden_dim(self) -> int:
        return self.fusion.hidden_dim

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(cb.size for cb in self.codebooks)

    def param_dict(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable tensor."""
        params: dict[str, np.ndarray] = {}
        for cb in self.codebooks:
            params[f"codebooks.{cb.level}"] = cb.centroids
        for spec in self.fusion.modalities:
            params.update(spec.encoder.param_items(f"enc.{spec.name}"))
            params.update(spec.decoder.param_items(f"dec.{spec.name}"))
        return params

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.param_dict().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        params = self.param_dict()
        for k, v in snap.items():
            params[k][...] = v

    def encode_batch(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        fused, _ = fuse_encode_batch(self.fusion, inputs)
        return fused

    def encode_records(self, records: list[EmbeddingRecord]) -> np.ndarray:
        return self.encode_batch(batch_inputs(self.fusion, records))

    def quantize_batch(self, h0: np.ndarray) -> np.ndarray:
        codes, _, _, _ = quantize_residuals(self.codebooks, h0, self.assignment_rule)
        return codes


def batch_inputs(
    config: FusionConfig, records: list[EmbeddingRecord]
) -> dict[str, np.ndarray]:
    """Stack per-modality matrices from records, erroring on missing ones."""
    out = {}
    for spec in config.modalities:
        rows = []
        for rec in records:
            if spec.name not in rec.vectors:
                raise DataError(f"item {rec.item_id!r} is missing modality {spec.name!r}")
            rows.append(rec.vectors[spec.name])
        out[spec.name] = np.stack(rows)
    return out


def build_rqvae(
    modality_dims: dict[str, int],
    hidden_dim: int,
    levels: int,
    codebook_size: int | list[int],
    seed: int,
    enc_hidden: tuple[int, ...] = (512, 256),
    activation: str = "relu",
    assignment_rule: str = "cosine",
    ste_enabled: bool = True,
    commitment_beta: float = 0.25,
    codebook_init_scale: float = 0.1,
) -> TokenizerModel:
    """Construct an RQ-VAE with random parameters and random codebooks.

    Encoders run d -> enc_hidden... -> hidden_dim and decoders mirror them.
    Codebooks start as scaled Gaussian rows; training may replace them with
    a k-means warm start (see TrainConfig.codebook_init).
    """
    rng = np.random.default_rng(seed)
    sizes = (
        [codebook_size] * levels if isinstance(codebook_size, int) else list(codebook_size)
    )
    if len(sizes) != levels:
        raise ShapeError(f"{levels} levels but {len(sizes)} codebook sizes")
    modalities = []
    for name, dim in modality_dims.items():
        enc_dims = [dim, *enc_hidden, hidden_dim]
        dec_dims = [hidden_dim, *reversed(enc_hidden), dim]
        acts = [activation] * (len(enc_dims) - 2) + ["identity"]
        encoder = mlp_init(enc_dims, acts, rng)
        decoder = mlp_init(dec_dims, acts, rng)
        modalities.append(ModalitySpec(name, dim, encoder, decoder))
    codebooks = [
        Codebook(l, rng.normal(0.0, codebook_init_scale, size=(sizes[l], hidden_dim)))
        for l in range(levels)
    ]
    return TokenizerModel(
        fusion=FusionConfig(modalities),
        codebooks=codebooks,
        assignment_rule=assignment_rule,
        ste_enabled=ste_enabled,
        commitment_beta=commitment_beta,
    )


def quantize(model: TokenizerModel, h0: np.ndarray) -> tuple[SemanticId, QuantizationTrace]:
    """Quantize one already-encoded hidden vector into a SemanticId."""
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.ndim != 1:
        raise ShapeError(f"quantize wants a 1-d hidden vector, got shape {h0.shape}")
    codes, residuals, scores, degenerate = quantize_residuals(
        model.codebooks, h0[None, :], model.assignment_rule
    )
    trace = QuantizationTrace(
        residuals=[r[0] for r in residuals],
        codes=[int(c) for c in codes[0]],
        scores=[s[0] for s in scores],
        degenerate=bool(degenerate[0]),
    )
    return SemanticId(tuple(trace.codes)), trace


def decode(model: TokenizerModel, sid: SemanticId) -> dict[str, np.ndarray]:
    """Reconstruct every modality from the centroid sum of sid."""
    if sid.levels != model.levels:
        raise ShapeError(f"sid has {sid.levels} levels, model has {model.levels}")
    return multi_decode(model.fusion, sid, [cb.centroids for cb in model.codebooks])


def ste_decode_forward(model: TokenizerModel, trace: QuantizationTrace) -> np.ndarray:
    """Decoder input with the straight-through terms.

    The cosine-similarity surrogate and its stop-gradient copy cancel term by
    term, so the returned vector equals the plain centroid sum exactly; the
    surrogate only matters for the gradient path (see rqvae_loss_and_grads).
    """
    if not model.ste_enabled:
        raise ValueError("ste_decode_forward called with ste_enabled=False")
    if len(trace.codes) != model.levels:
        raise ShapeError(f"trace has {len(trace.codes)} levels, model has {model.levels}")
    quantized = np.zeros(model.hidden_dim)
    for level, code in enumerate(trace.codes):
        quantized = quantized + model.codebooks[level].centroids[code]
    for level in range(model.levels):
        h = trace.residuals[level][None, :]
        sims, _ = cosine_sim_forward(h, model.codebooks[level].centroids)
        surrogate = (sims @ model.codebooks[level].centroids)[0]
        quantized = quantized + (surrogate - surrogate)
    return quantized


@dataclass
class RqvaeLoss:
    total: float
    recon: float
    commit: float


@dataclass
class SgRefs:
    """Pinned copies of every stop-gradient operand in the loss.

    Stop-gradient means "treat as constant": the analytic gradient never
    differentiates through these values, so a finite-difference oracle must
    hold them fixed while parameters are perturbed. Capture them once at the
    evaluation point and pass them back into rqvae_loss_and_grads.
    """

    residuals: list[np.ndarray]  # h^l per level (B, n)
    selected: list[np.ndarray]  # C_l[sid_l] rows per item (B, n)
    surrogate: list[np.ndarray] | None  # sim(h^l, C_l) @ C_l per level (B, n)


def capture_sg_refs(
    model: TokenizerModel, inputs: dict[str, np.ndarray], codes: np.ndarray
) -> SgRefs:
    """Record the stop-gradient operands at the current parameter point."""
    fused, _ = fuse_encode_batch(model.fusion, inputs)
    _, residuals, _, _ = quantize_residuals(
        model.codebooks, fused, model.assignment_rule, codes
    )
    selected = [
        model.codebooks[l].centroids[codes[:, l]].copy() for l in range(model.levels)
    ]
    surrogate = None
    if model.ste_enabled:
        surrogate = []
        for level in range(model.levels):
            sims, _ = cosine_sim_forward(
                residuals[level], model.codebooks[level].centroids
            )
            surrogate.append(sims @ model.codebooks[level].centroids)
    return SgRefs(
        residuals=[residuals[l].copy() for l in range(model.levels)],
        selected=selected,
        surrogate=surrogate,
    )


def rqvae_loss_and_grads(
    model: TokenizerModel,
    inputs: dict[str, np.ndarray],
    frozen_codes: np.ndarray | None = None,
    sg_refs: SgRefs | None = None,
    want_grads: bool = True,
) -> tuple[RqvaeLoss, dict[str, np.ndarray] | None, np.ndarray]:
    """Joint reconstruction + commitment loss and its exact gradients.

    recon averages the squared reconstruction error over items and modalities
    (per-modality weights applied); commit averages, over items and levels,
    ||sg[h^l] - C_l[sid_l]||^2 + beta * ||h^l - sg[C_l[sid_l]]||^2. With the
    straight-through path enabled the decoder input picks up a full-codebook
    similarity term whose forward contribution cancels, so every centroid row
    receives gradient; with it disabled only selected rows do.

    Returns (loss, grads or None, codes). Assignments are recomputed unless
    frozen_codes pins them; sg_refs additionally pins the stop-gradient
    operands, which together make the loss value a smooth function of the
    parameters suitable for finite differencing.
    """
    config = model.fusion
    n_items = inputs[config.names[0]].shape[0]
    if n_items == 0:
        raise DataError("empty batch")
    n_mod = len(config.modalities)
    n_levels = model.levels

    fused, enc_tapes = fuse_encode_batch(config, inputs)
    codes, residuals, _, _ = quantize_residuals(
        model.codebooks, fused, model.assignment_rule, frozen_codes
    )

    quantized = np.zeros_like(fused)
    for level in range(n_levels):
        quantized += model.codebooks[level].centroids[codes[:, level]]

    cos_tapes = []
    sims_per_level = []
    z = quantized
    if model.ste_enabled:
        for level in range(n_levels):
            sims, tape = cosine_sim_forward(
                residuals[level], model.codebooks[level].centroids
            )
            sims_per_level.append(sims)
            cos_tapes.append(tape)
            if sg_refs is not None:
                # Live surrogate minus its pinned stop-gradient copy: zero at
                # the capture point, nonzero once parameters move.
                z = z + (sims @ model.codebooks[level].centroids - sg_refs.surrogate[level])

    recon = 0.0
    dec_out = {}
    dec_tapes = {}
    per_item_recon = np.zeros(n_items)
    for spec in config.modalities:
        y_hat, tape = mlp_forward(spec.decoder, z)
        dec_out[spec.name] = y_hat
        dec_tapes[spec.name] = tape
        diff = y_hat - inputs[spec.name]
        w = config.weights[spec.name]
        per_item = (diff * diff).sum(axis=1)
        per_item_recon += (w / n_mod) * per_item
        recon += (w / n_mod) * float(per_item.mean())

    commit = 0.0
    per_item_commit = np.zeros(n_items)
    d1_per_level = []
    d2_per_level = []
    for level in range(n_levels):
        sel_rows = model.codebooks[level].centroids[codes[:, level]]
        sg_h = sg_refs.residuals[level] if sg_refs is not None else residuals[level]
        sg_c = sg_refs.selected[level] if sg_refs is not None else sel_rows
        d1 = sg_h - sel_rows  # sg[h^l] - C_l[sid_l]
        d2 = residuals[level] - sg_c  # h^l - sg[C_l[sid_l]]
        d1_per_level.append(d1)
        d2_per_level.append(d2)
        sq = (d1 * d1).sum(axis=1) + model.commitment_beta * (d2 * d2).sum(axis=1)
        per_item_commit += sq / n_levels
        commit += float(sq.mean()) / n_levels

    total = recon + commit
    if not np.isfinite(total):
        per_item = per_item_recon + per_item_commit
        bad = np.flatnonzero(~np.isfinite(per_item))
        idx = int(bad[0]) if bad.size else -1
        raise NumericalError(f"non-finite loss term at batch item {idx}")
    loss = RqvaeLoss(total=total, recon=recon, commit=commit)
    if not want_grads:
        return loss, None, codes

    grads = {k: np.zeros_like(v) for k, v in model.param_dict().items()}

    # Decoder path: d(recon)/d(y_hat) -> decoder params and the shared z.
    g_z = np.zeros_like(z)
    for spec in config.modalities:
        w = config.weights[spec.name]
        g_y = (2.0 * w / (n_mod * n_items)) * (dec_out[spec.name] - inputs[spec.name])
        layer_grads, g_in = mlp_backward(spec.decoder, dec_tapes[spec.name], g_y)
        for i, (dw, db) in enumerate(layer_grads):
            grads[f"dec.{spec.name}.w{i}"] += dw
            grads[f"dec.{spec.name}.b{i}"] += db
        g_z += g_in

    # Direct gradient into each residual level (filled below, consumed by the
    # reverse residual-chain sweep).
    g_resid = [np.zeros_like(fused) for _ in range(n_levels)]

    for level in range(n_levels):
        sel = codes[:, level]
        # z = sum_l C_l[sid_l] (+ cancelling surrogate): selected rows.
        np.add.at(grads[f"codebooks.{level}"], sel, g_z)
        if model.ste_enabled:
            # Surrogate sims @ C: gradient reaches every row of C and h^l.
            book = model.codebooks[level].centroids
            g_sims = g_z @ book.T
            grads[f"codebooks.{level}"] += sims_per_level[level].T @ g_z
            dh, dc = cosine_sim_backward(cos_tapes[level], g_sims)
            grads[f"codebooks.{level}"] += dc
            g_resid[level] += dh

    commit_coef = 2.0 / (n_items * n_levels)
    for level in range(n_levels):
        sel = codes[:, level]
        # ||sg[h] - C||^2 pushes selected rows toward residuals.
        np.add.at(grads[f"codebooks.{level}"], sel, -commit_coef * d1_per_level[level])
        # beta * ||h - sg[C]||^2 pulls the residual (hence encoder) in.
        g_resid[level] += commit_coef * model.commitment_beta * d2_per_level[level]

    # Reverse sweep of h^{l+1} = h^l - C_l[sid_l].
    acc = np.zeros_like(fused)  # d(loss)/d(h^{level+1})
    for level in range(n_levels - 1, -1, -1):
        np.add.at(grads[f"codebooks.{level}"], codes[:, level], -acc)
        acc = acc + g_resid[level]

    # acc is now d(loss)/d(h^0); the fused sum feeds it to every encoder.
    for spec in config.modalities:
        layer_grads, _ = mlp_backward(spec.encoder, enc_tapes[spec.name], acc)
        for i, (dw, db) in enumerate(layer_grads):
            grads[f"enc.{spec.name}.w{i}"] += dw
            grads[f"enc.{spec.name}.b{i}"] += db

    return loss, grads, codes


def rqvae_loss(model: TokenizerModel, records: list[EmbeddingRecord]) -> RqvaeLoss:
    """Loss triple (total, recon, commit) for a batch of records."""
    if not records:
        raise DataError("empty batch")
    loss, _, _ = rqvae_loss_and_grads(
        model, batch_inputs(model.fusion, records), want_grads=False
    )
    return loss


def kmeans_fit(
    x: np.ndarray, k: int, rng: np.random.Generator, n_iter: int = 50
) -> np.ndarray:
    """Seeded k-means++ plus Lloyd iterations; returns (k, n) centroids.

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid. Fewer distinct rows than k falls back to jittered sampling.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise DataError(f"k-means wants >= {k} rows, got {n}")
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] < k:
        warnings.warn(
            f"only {distinct.shape[0]} distinct rows for k={k}; sampling with jitter",
            stacklevel=2,
        )
        idx = rng.integers(0, n, size=k)
        scale = float(np.abs(x).max()) or 1.0
        return x[idx] + rng.normal(0.0, 1e-6 * scale, size=(k, x.shape[1]))

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(0, n))]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = x[int(rng.integers(0, n))]
        else:
            centroids[j] = x[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))

    x_norm = (x * x).sum(axis=1)
    for _ in range(n_iter):
        # Expanded ||x - c||^2; cheaper than broadcasting (n, k, dim).
        dist2 = x_norm[:, None] - 2.0 * (x @ centroids.T) + (centroids * centroids).sum(axis=1)
        assign = np.argmin(dist2, axis=1)
        point_d2 = dist2[np.arange(n), assign]
        new_centroids = centroids.copy()
        used = set()
        for j in range(k):
            members = assign == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
            else:
                order = np.argsort(-point_d2, kind="stable")
                pick = next(int(i) for i in order if int(i) not in used)
                used.add(pick)
                new_centroids[j] = x[pick]
        if np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    return centroids


def init_codebooks(
    warmup_batch: np.ndarray,
    levels: int,
    codebook_size: int | list[int],
    seed: int,
    rule: str = "l2",
) -> list[Codebook]:
    """Greedy residual k-means warm start over an encoded warmup batch.

    Level 0 clusters the batch itself; each deeper level clusters the
    residuals left after assigning with the codebooks built so far.
    """
    warmup = np.asarray(warmup_batch, dtype=np.float64)
    sizes = (
        [codebook_size] * levels if isinstance(codebook_size, int) else list(codebook_size)
    )
    if warmup.shape[0] < max(sizes):
        raise DataError(
            f"warmup batch has {warmup.shape[0]} rows, need >= {max(sizes)}"
        )
    rng = np.random.default_rng(seed)
    books: list[Codebook] = []
    h = warmup
    for level in range(levels):
        centroids = kmeans_fit(h, sizes[level], rng)
        book = Codebook(level, centroids)
        scores = level_scores(h, book.centroids, rule)
        chosen = np.argmax(scores, axis=1)
        h = h - book.centroids[chosen]
        books.append(book)
    return books


@dataclass
class EpochMetrics:
    epoch: int
    recon: float
    commit: float
    utilization: list[float]
    probe_uniqueness: float


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    codebook_init: str = "kmeans"  # "kmeans" warm start or keep "random" rows
    warmup_items: int = 2048
    probe_items: int = 2000
    divergence_threshold: float = 1e6


@dataclass
class TrainResult:
    model: TokenizerModel
    epochs: list[EpochMetrics] = field(default_factory=list)
    aborted: bool = False


def train(model: TokenizerModel, corpus: Corpus, config: TrainConfig) -> TrainResult:
    """Train the RQ-VAE; deterministic given config.seed.

    Epoch 0 optionally replaces the random codebooks with a k-means warm
    start over an encoded warmup subset. Divergence (non-finite or huge loss)
    aborts and restores the last end-of-epoch checkpoint.
    """
    if config.epochs == 0:
        return TrainResult(model=model)
    if config.codebook_init not in ("kmeans", "random"):
        raise DataError(f"unknown codebook_init {config.codebook_init!r}")
    rng = np.random.default_rng(config.seed)
    ids = corpus.ids
    records = [corpus[i] for i in ids]
    inputs_all = batch_inputs(model.fusion, records)

    if config.codebook_init == "kmeans":
        n_warm = min(config.warmup_items, len(ids))
        warm_idx = rng.choice(len(ids), size=n_warm, replace=False)
        warm_inputs = {k: v[warm_idx] for k, v in inputs_all.items()}
        encoded = model.encode_batch(warm_inputs)
        books = init_codebooks(
            encoded,
            model.levels,
            [cb.size for cb in model.codebooks],
            seed=int(rng.integers(0, 2**63 - 1)),
            rule=model.assignment_rule,
        )
        for cb, fresh in zip(model.codebooks, books):
            cb.centroids[...] = fresh.centroids

    params = model.param_dict()
    state = AdamState.init(params)
    # The probe is held out: probe items never contribute gradient steps.
    probe_n = min(config.probe_items, max(1, len(ids) // 5))
    split = rng.permutation(len(ids))
    probe_idx = split[:probe_n]
    train_idx = split[probe_n:] if probe_n < len(ids) else split
    probe_inputs = {k: v[probe_idx] for k, v in inputs_all.items()}
    checkpoint = model.snapshot()
    result = TrainResult(model=model)

    for epoch in range(config.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        recon_sum = commit_sum = 0.0
        n_batches = 0
        diverged = False
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            batch = {k: v[batch_idx] for k, v in inputs_all.items()}
            try:
                loss, grads, _ = rqvae_loss_and_grads(model, batch)
            except NumericalError:
                diverged = True
                break
            if loss.total > config.divergence_threshold:
                diverged = True
                break
            adam_step(
                params, grads, state,
                lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                eps=config.adam_eps,
            )
            recon_sum += loss.recon
            commit_sum += loss.commit
            n_batches += 1
        if diverged:
            model.restore(checkpoint)
            result.aborted = True
            break
        checkpoint = model.snapshot()

        probe_h = model.encode_batch(probe_inputs)
        probe_codes = model.quantize_batch(probe_h)
        utilization = [
            len(np.unique(probe_codes[:, l])) / model.codebooks[l].size
            for l in range(model.levels)
        ]
        distinct = len({tuple(row) for row in probe_codes})
        result.epochs.append(
            EpochMetrics(
                epoch=epoch,
                recon=recon_sum / max(n_batches, 1),
                commit=commit_sum / max(n_batches, 1),
                utilization=utilization,
                probe_uniqueness=distinct / probe_n,
            )
        )
    return result


class RqKmeansTokenizer:
    """Residual k-means baseline: codebooks over raw embeddings, l2 rule.

    Multi-modality corpora are tokenized on the per-item concatenation of the
    modality vectors in declared order.
    """

    def __init__(self, codebooks: list[Codebook]):
        self.codebooks = codebooks
        self.assignment_rule = "l2"

    @property
    def levels(self) -> int:
        return len(self.codebooks)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(cb.size for cb in self.codebooks)

    def encode_records(self, records: list[EmbeddingRecord]) -> np.ndarray:
        return np.stack(
            [np.concatenate(list(r.vectors.values())) for r in records]
        )

    def quantize_batch(self, h0: np.ndarray) -> np.ndarray:
        codes, _, _, _ = quantize_residuals(self.codebooks, h0, "l2")
        return codes


def rq_kmeans_fit(corpus: Corpus, levels: int, codebook_size: int, seed: int) -> RqKmeansTokenizer:
    """Fit the residual k-means baseline on raw (concatenated) embeddings."""
    x = corpus.concat_matrix()
    if x.shape[0] < codebook_size:
        raise DataError(
            f"corpus has {x.shape[0]} items, need >= {codebook_size} for k-means"
        )
    rng = np.random.default_rng(seed)
    books: list[Codebook] = []
    h = x
    for level in range(levels):
        centroids = kmeans_fit(h, codebook_size, rng)
        book = Codebook(level, centroids)
        chosen = np.argmax(level_scores(h, centroids, "l2"), axis=1)
        h = h - centroids[chosen]
        books.append(book)
    return RqKmeansTokenizer(books)


@dataclass
class TokenizedCorpus:
    """item_id -> SemanticId pairs in id order, plus per-item rejects."""

    pairs: list[tuple[str, SemanticId]]
    rejects: list[tuple[str, str]] = field(default_factory=list)

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sids(self) -> dict[str, SemanticId]:
        return dict(self.pairs)


def tokenize_corpus(model, corpus: Corpus) -> TokenizedCorpus:
    """Assign one SemanticId per item, in ascending item_id order.

    Items missing a configured modality are collected into rejects rather
    than failing the whole corpus.
    """
    usable: list[EmbeddingRecord] = []
    rejects: list[tuple[str, str]] = []
    required = (
        [m.name for m in model.fusion.modalities]
        if isinstance(model, TokenizerModel)
        else None
    )
    for rec in corpus:
        if required is not None:
            missing = [m for m in required if m not in rec.vectors]
            if missing:
                rejects.append((rec.item_id, f"missing modality {missing[0]!r}"))
                continue
        usable.append(rec)
    pairs: list[tuple[str, SemanticId]] = []
    for start in range(0, len(usable), _QUANTIZE_CHUNK):
        chunk = usable[start : start + _QUANTIZE_CHUNK]
        h0 = model.encode_records(chunk)
        codes = model.quantize_batch(h0)
        pairs.extend(
            (rec.item_id, SemanticId(tuple(int(c) for c in row)))
            for rec, row in zip(chunk, codes)
        )
    return TokenizedCorpus(pairs=pairs, rejects=rejects)

"""Multi-source embedding fusion.

Each modality owns an encoder into the shared hidden space and a decoder
back out; the fused representation is the plain sum of encoder outputs, and
every decoder reconstructs its own modality from the same quantized code.
A single-modality config reduces exactly to the unfused pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Corpus
from .errors import DataError, ShapeError
from .nn import MlpParams, MlpTape, mlp_apply, mlp_forward


@dataclass
class ModalitySpec:
    """One embedding source: its input dim and its encoder/decoder pair."""

    name: str
    dim: int
    encoder: MlpParams
    decoder: MlpParams

    def __post_init__(self):
        if self.encoder.in_dim != self.dim:
            raise ShapeError(
                f"modality {self.name!r}: encoder in-dim {self.encoder.in_dim} != input dim {self.dim}"
            )
        if self.decoder.out_dim != self.dim:
            raise ShapeError(
                f"modality {self.name!r}: decoder out-dim {self.decoder.out_dim} != input dim {self.dim}"
            )
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ShapeError(
                f"modality {self.name!r}: encoder out-dim {self.encoder.out_dim} != decoder in-dim {self.decoder.in_dim}"
            )


@dataclass
class FusionConfig:
    """Ordered modality list plus per-modality reconstruction weights.

    Weights default to 1.0. A weight of 0.0 is allowed and removes that
    modality's reconstruction term (and hence its decoder gradient) entirely.
    """

    modalities: list[ModalitySpec]
    weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.modalities:
            raise DataError("fusion config wants at least one modality")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate modality names: {names}")
        dims = {m.encoder.out_dim for m in self.modalities}
        if len(dims) != 1:
            raise ShapeError(f"modality encoders disagree on hidden dim: {sorted(dims)}")
        self.weights = {m.name: float(self.weights.get(m.name, 1.0)) for m in self.modalities}
        for name, w in self.weights.items():
            if w < 0.0:
                raise DataError(f"modality {name!r} has negative weight {w}")

    @property
    def hidden_dim(self) -> int:
        return self.modalities[0].encoder.out_dim

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def modality(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(name)


def _check_inputs(config: FusionConfig, inputs: dict[str, np.ndarray]) -> None:
    for spec in config.modalities:
        if spec.name not in inputs:
            raise DataError(f"missing modality {spec.name!r} in inputs")
        got = np.asarray(inputs[spec.name]).shape[-1]
        if got != spec.dim:
            raise ShapeError(
                f"modality {spec.name!r}: input dim {got} != configured dim {spec.dim}"
            )


def fuse_encode(config: FusionConfig, inputs: dict[str, np.ndarray]) -> np.ndarray:
    """Sum of per-modality encoder outputs for a single item."""
    _check_inputs(config, inputs)
    fused = np.zeros(config.hidden_dim)
    for spec in config.modalities:
        fused = fused + mlp_apply(spec.encoder, np.asarray(inputs[spec.name])[None, :])[0]
    return fused


def fuse_encode_batch(
    config: FusionConfig, inputs: dict[str, np.ndarray]
) -> tuple[np.ndarray, dict[str, MlpTape]]:
    """Batched fused encoding with per-modality tapes for backprop.

    inputs maps modality name to an (N, d_m) matrix; rows are items.
    """
    _check_inputs(config, inputs)
    tapes: dict[str, MlpTape] = {}
    fused = None
    for spec in config.modalities:
        out, tape = mlp_forward(spec.encoder, inputs[spec.name])
        tapes[spec.name] = tape
        fused = out if fused is None else fused + out
    return fused, tapes


def multi_decode(
    config: FusionConfig, sid, codebooks: list[np.ndarray]
) -> dict[str, np.ndarray]:
    """Apply every modality decoder to the quantized centroid sum of sid."""
    z = np.zeros(codebooks[0].shape[1])
    for level, code in enumerate(sid.codes):
        book = codebooks[level]
        if not 0 <= code < book.shape[0]:
            raise IndexError(
                f"code {code} out of range at level {level} (codebook has {book.shape[0]} rows)"
            )
        z = z + book[code]
    return {
        spec.name: mlp_apply(spec.decoder, z[None, :])[0] for spec in config.modalities
    }


@dataclass
class VarianceReport:
    """Per-dimension variance of each encoded modality and of the fused sum."""

    per_modality: dict[str, np.ndarray]
    fused: np.ndarray
    per_modality_trace: dict[str, float]
    fused_trace: float


def input_variance_report(corpus: Corpus, config: FusionConfig) -> VarianceReport:
    """Variance diagnostics over encoder outputs (population variance)."""
    if len(corpus) < 2:
        raise DataError(f"variance report wants >= 2 items, corpus has {len(corpus)}")
    per_mod = {}
    fused = None
    for spec in config.modalities:
        enc = mlp_apply(spec.encoder, corpus.matrix(spec.name))
        per_mod[spec.name] = enc.var(axis=0)
        fused = enc if fused is None else fused + enc
    fused_var = fused.var(axis=0)
    return VarianceReport(
        per_modality=per_mod,
        fused=fused_var,
        per_modality_trace={k: float(v.sum()) for k, v in per_mod.items()},
        fused_trace=float(fused_var.sum()),
    )

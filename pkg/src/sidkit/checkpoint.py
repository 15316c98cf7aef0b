"""Self-describing binary checkpoints for tokenizer models ("SIDF" files).

Layout: magic, format version, model kind, then dimensions / rule / flags,
then every tensor as row-major little-endian float64 in declaration order.
Float64 round-trips exactly, so a reloaded model quantizes bit-identically.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .fusion import FusionConfig, ModalitySpec
from .nn import Layer, MlpParams, ACTIVATIONS
from .tokenizer import ASSIGNMENT_RULES, Codebook, RqKmeansTokenizer, TokenizerModel

SIDF_MAGIC = b"SIDF"
SIDF_VERSION = 1

_KIND_RQVAE = 0
_KIND_RQKMEANS = 1

_FLAG_STE = 1


def _pack_tensor(buf: bytearray, arr: np.ndarray) -> None:
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _pack_mlp(buf: bytearray, mlp: MlpParams) -> None:
    buf += struct.pack("<I", len(mlp.layers))
    for layer in mlp.layers:
        buf += struct.pack(
            "<IIB",
            layer.weight.shape[0],
            layer.weight.shape[1],
            ACTIVATIONS.index(layer.activation),
        )


def _mlp_tensors(mlp: MlpParams) -> list[np.ndarray]:
    out = []
    for layer in mlp.layers:
        out.append(layer.weight)
        out.append(layer.bias)
    return out


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def unpack(self, fmt: str):
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += struct.calcsize(fmt)
        return vals

    def tensor(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        arr = np.frombuffer(self.blob, dtype="<f8", count=count, offset=self.pos)
        self.pos += 8 * count
        return arr.reshape(shape).astype(np.float64)

    def text(self) -> str:
        (n,) = self.unpack("<H")
        s = self.blob[self.pos : self.pos + n].decode("utf-8")
        self.pos += n
        return s


def save_model(model, path: str | Path) -> None:
    """Serialize a TokenizerModel or RqKmeansTokenizer to a SIDF file."""
    buf = bytearray()
    buf += SIDF_MAGIC
    buf += struct.pack("<I", SIDF_VERSION)
    if isinstance(model, RqKmeansTokenizer):
        buf += struct.pack("<B", _KIND_RQKMEANS)
        buf += struct.pack("<II", model.codebooks[0].dim, model.levels)
        for cb in model.codebooks:
            buf += struct.pack("<I", cb.size)
        for cb in model.codebooks:
            _pack_tensor(buf, cb.centroids)
    elif isinstance(model, TokenizerModel):
        buf += struct.pack("<B", _KIND_RQVAE)
        buf += struct.pack("<II", model.hidden_dim, model.levels)
        for cb in model.codebooks:
            buf += struct.pack("<I", cb.size)
        buf += struct.pack("<B", ASSIGNMENT_RULES.index(model.assignment_rule))
        buf += struct.pack("<I", _FLAG_STE if model.ste_enabled else 0)
        buf += struct.pack("<d", model.commitment_beta)
        buf += struct.pack("<I", len(model.fusion.modalities))
        for spec in model.fusion.modalities:
            name = spec.name.encode("utf-8")
            buf += struct.pack("<H", len(name)) + name
            buf += struct.pack("<I", spec.dim)
            buf += struct.pack("<d", model.fusion.weights[spec.name])
            _pack_mlp(buf, spec.encoder)
            _pack_mlp(buf, spec.decoder)
        for cb in model.codebooks:
            _pack_tensor(buf, cb.centroids)
        for spec in model.fusion.modalities:
            for t in _mlp_tensors(spec.encoder) + _mlp_tensors(spec.decoder):
                _pack_tensor(buf, t)
    else:
        raise DataError(f"cannot checkpoint object of type {type(model).__name__}")
    Path(path).write_bytes(bytes(buf))


def _read_mlp_arch(r: _Reader) -> list[tuple[int, int, str]]:
    (n_layers,) = r.unpack("<I")
    arch = []
    for _ in range(n_layers):
        d_in, d_out, act = r.unpack("<IIB")
        arch.append((d_in, d_out, ACTIVATIONS[act]))
    return arch


def _read_mlp_tensors(r: _Reader, arch: list[tuple[int, int, str]]) -> MlpParams:
    layers = []
    for d_in, d_out, act in arch:
        w = r.tensor((d_in, d_out))
        b = r.tensor((d_out,))
        layers.append(Layer(w, b, act))
    return MlpParams(layers)


def load_model(path: str | Path):
    """Load a SIDF checkpoint back into the matching model class."""
    blob = Path(path).read_bytes()
    if blob[:4] != SIDF_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, want {SIDF_MAGIC!r}")
    r = _Reader(blob)
    r.pos = 4
    (version,) = r.unpack("<I")
    if version != SIDF_VERSION:
        raise DataError(f"{path}: unsupported SIDF version {version}")
    (kind,) = r.unpack("<B")
    if kind == _KIND_RQKMEANS:
        dim, levels = r.unpack("<II")
        sizes = [r.unpack("<I")[0] for _ in range(levels)]
        books = [Codebook(l, r.tensor((sizes[l], dim))) for l in range(levels)]
        return RqKmeansTokenizer(books)
    if kind != _KIND_RQVAE:
        raise DataError(f"{path}: unknown model kind {kind}")
    hidden, levels = r.unpack("<II")
    sizes = [r.unpack("<I")[0] for _ in range(levels)]
    (rule_tag,) = r.unpack("<B")
    (flags,) = r.unpack("<I")
    (beta,) = r.unpack("<d")
    (n_mod,) = r.unpack("<I")
    mod_meta = []
    for _ in range(n_mod):
        name = r.text()
        (dim,) = r.unpack("<I")
        (weight,) = r.unpack("<d")
        enc_arch = _read_mlp_arch(r)
        dec_arch = _read_mlp_arch(r)
        mod_meta.append((name, dim, weight, enc_arch, dec_arch))
    books = [Codebook(l, r.tensor((sizes[l], hidden))) for l in range(levels)]
    modalities = []
    weights = {}
    for name, dim, weight, enc_arch, dec_arch in mod_meta:
        enc = _read_mlp_tensors(r, enc_arch)
        dec = _read_mlp_tensors(r, dec_arch)
        modalities.append(ModalitySpec(name, dim, enc, dec))
        weights[name] = weight
    return TokenizerModel(
        fusion=FusionConfig(modalities, weights),
        codebooks=books,
        assignment_rule=ASSIGNMENT_RULES[rule_tag],
        ste_enabled=bool(flags & _FLAG_STE),
        commitment_beta=beta,
    )

"""Pipeline configuration: one sectioned text file, fail-closed parsing.

Format: `[section]` headers and `key = value` lines; `#` starts a comment.
Unknown sections or keys are errors, every experiment seed is explicit, and
referenced input files must exist at validation time. The config hash (over
the raw text) is stamped into every report header so reruns are attributable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_list(s: str) -> list[int]:
    return [int(tok) for tok in s.split(",") if tok.strip()]


def _parse_str_list(s: str) -> list[str]:
    return [tok.strip() for tok in s.split(",") if tok.strip()]


def _parse_named_floats(s: str) -> dict[str, float] | float:
    """Either a scalar float or name:value pairs ("a:0.1,b:0.2")."""
    if ":" not in s:
        return float(s)
    out = {}
    for tok in s.split(","):
        tok = tok.strip()
        if not tok:
            continue
        name, _, value = tok.partition(":")
        out[name.strip()] = float(value)
    return out


def _parse_named_ints(s: str) -> dict[str, int]:
    out = {}
    for tok in s.split(","):
        tok = tok.strip()
        if not tok:
            continue
        name, _, value = tok.partition(":")
        if not value:
            raise ConfigError(f"expected name:dim pairs, got {s!r}")
        out[name.strip()] = int(value)
    return out


@dataclass
class TokenizerSettings:
    family: str = "rqvae"  # or "rq_kmeans"
    levels: int = 3
    codebook_size: list[int] = field(default_factory=lambda: [32])
    hidden_dim: int = 16
    enc_hidden: list[int] = field(default_factory=lambda: [64])
    activation: str = "relu"
    assignment_rule: str = "cosine"
    ste: bool = True
    commitment_beta: float = 0.25
    codebook_init: str = "kmeans"
    codebook_init_scale: float = 0.1
    epochs: int = 8
    batch_size: int = 256
    lr: float = 1e-3
    modalities: list[str] = field(default_factory=list)  # empty = all

    def sizes(self) -> list[int]:
        if len(self.codebook_size) == 1:
            return self.codebook_size * self.levels
        if len(self.codebook_size) != self.levels:
            raise ConfigError(
                f"{self.levels} levels but {len(self.codebook_size)} codebook sizes"
            )
        return list(self.codebook_size)


@dataclass
class GrSettings:
    model: str = "transformer"  # or "ngram"
    max_history: int = 32
    layers: int = 2
    width: int = 64
    heads: int = 4
    epochs: int = 3
    batch_size: int = 64
    lr: float = 3e-3
    beam_width: int = 10
    ngram_order: int = 3
    positions_per_user: int = 10
    holdout_fraction: float = 0.1


@dataclass
class RetrievalSettings:
    budget: int = 1000
    mode: str = "depth"
    top_k: int = 10
    per_sid: int = 100
    strategy: str = "relevance_guided"
    spillover: bool = False


@dataclass
class SynthSettings:
    items: int = 10_000
    clusters: int = 32
    spread: dict[str, float] | float = field(
        default_factory=lambda: {"text": 0.25, "visual": 0.05, "audio": 0.15}
    )
    cluster_scale: float = 0.4
    mean_scale: float = 2.0
    modalities: dict[str, int] = field(
        default_factory=lambda: {"text": 24, "visual": 16, "audio": 12}
    )
    users: int = 600
    seq_min: int = 48
    seq_max: int = 64
    pattern_strength: float = 0.9
    lag: int = 1
    relevance_temp: float = 0.1
    targets: int = 1


@dataclass
class ExperimentSettings:
    name: str = ""
    k_values: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    history_values: list[int] = field(default_factory=lambda: [8, 32])


@dataclass
class PipelineConfig:
    seed: int
    out_dir: Path
    raw_text: str
    tokenizer: TokenizerSettings = field(default_factory=TokenizerSettings)
    gr: GrSettings = field(default_factory=GrSettings)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    modality_paths: dict[str, Path] = field(default_factory=dict)
    modality_dims: dict[str, int] = field(default_factory=dict)
    metadata_path: Path | None = None
    logs_path: Path | None = None

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.raw_text.encode("utf-8")).hexdigest()[:12]


# Per-section key tables: key -> (target attribute, converter).
_TOKENIZER_KEYS = {
    "family": ("family", str),
    "levels": ("levels", int),
    "codebook_size": ("codebook_size", _parse_int_list),
    "hidden_dim": ("hidden_dim", int),
    "enc_hidden": ("enc_hidden", _parse_int_list),
    "activation": ("activation", str),
    "assignment_rule": ("assignment_rule", str),
    "ste": ("ste", _parse_bool),
    "commitment_beta": ("commitment_beta", float),
    "codebook_init": ("codebook_init", str),
    "codebook_init_scale": ("codebook_init_scale", float),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "modalities": ("modalities", _parse_str_list),
}
_GR_KEYS = {
    "model": ("model", str),
    "max_history": ("max_history", int),
    "layers": ("layers", int),
    "width": ("width", int),
    "heads": ("heads", int),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "beam_width": ("beam_width", int),
    "ngram_order": ("ngram_order", int),
    "positions_per_user": ("positions_per_user", int),
    "holdout_fraction": ("holdout_fraction", float),
}
_RETRIEVAL_KEYS = {
    "budget": ("budget", int),
    "mode": ("mode", str),
    "top_k": ("top_k", int),
    "per_sid": ("per_sid", int),
    "strategy": ("strategy", str),
    "spillover": ("spillover", _parse_bool),
}
_SYNTH_KEYS = {
    "items": ("items", int),
    "clusters": ("clusters", int),
    "spread": ("spread", _parse_named_floats),
    "cluster_scale": ("cluster_scale", float),
    "mean_scale": ("mean_scale", float),
    "modalities": ("modalities", _parse_named_ints),
    "users": ("users", int),
    "seq_min": ("seq_min", int),
    "seq_max": ("seq_max", int),
    "pattern_strength": ("pattern_strength", float),
    "lag": ("lag", int),
    "relevance_temp": ("relevance_temp", float),
    "targets": ("targets", int),
}
_EXPERIMENT_KEYS = {
    "name": ("name", str),
    "k_values": ("k_values", _parse_int_list),
    "seeds": ("seeds", _parse_int_list),
    "history_values": ("history_values", _parse_int_list),
}


def _parse_sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise ConfigError(f"line {lineno}: duplicate section [{current}]")
            sections[current] = {}
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any section: {line!r}")
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = value.strip()
    return sections


def _apply(section: str, raw: dict[str, str], obj, keys) -> None:
    for key, value in raw.items():
        if key not in keys:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        attr, conv = keys[key]
        try:
            setattr(obj, attr, conv(value))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent)


def parse_config(text: str, base_dir: str | Path = ".") -> PipelineConfig:
    base = Path(base_dir)
    sections = _parse_sections(text)
    if "run" not in sections:
        raise ConfigError("missing required section [run]")
    run = sections.pop("run")
    for key in run:
        if key not in ("seed", "out_dir"):
            raise ConfigError(f"unknown key {key!r} in section [run]")
    if "seed" not in run:
        raise ConfigError("[run] wants an explicit seed (no ambient randomness)")
    if "out_dir" not in run:
        raise ConfigError("[run] wants out_dir")
    # out_dir is taken relative to the working directory; input file paths
    # below resolve relative to the config file so data can travel with it.
    config = PipelineConfig(
        seed=int(run["seed"]), out_dir=Path(run["out_dir"]), raw_text=text
    )

    for name, raw in sections.items():
        if name == "tokenizer":
            _apply(name, raw, config.tokenizer, _TOKENIZER_KEYS)
        elif name == "gr":
            _apply(name, raw, config.gr, _GR_KEYS)
        elif name == "retrieval":
            _apply(name, raw, config.retrieval, _RETRIEVAL_KEYS)
        elif name == "synth":
            _apply(name, raw, config.synth, _SYNTH_KEYS)
        elif name == "experiment":
            _apply(name, raw, config.experiment, _EXPERIMENT_KEYS)
        elif name == "data":
            for key, value in raw.items():
                if key == "metadata":
                    config.metadata_path = base / value
                elif key == "logs":
                    config.logs_path = base / value
                else:
                    raise ConfigError(f"unknown key {key!r} in section [data]")
        elif name.startswith("modality "):
            mod = name.split(None, 1)[1]
            for key, value in raw.items():
                if key == "dim":
                    config.modality_dims[mod] = int(value)
                elif key == "path":
                    config.modality_paths[mod] = base / value
                else:
                    raise ConfigError(f"unknown key {key!r} in section [{name}]")
        else:
            raise ConfigError(f"unknown section [{name}]")

    for mod, p in config.modality_paths.items():
        if not p.exists():
            raise ConfigError(f"modality {mod!r}: file not found: {p}")
    for label, p in (("metadata", config.metadata_path), ("logs", config.logs_path)):
        if p is not None and not p.exists():
            raise ConfigError(f"{label} file not found: {p}")
    if config.retrieval.mode not in ("depth", "breadth"):
        raise ConfigError(f"unknown retrieval mode {config.retrieval.mode!r}")
    if config.retrieval.top_k * config.retrieval.per_sid > config.retrieval.budget:
        raise ConfigError(
            f"retrieval plan {config.retrieval.top_k} x {config.retrieval.per_sid} "
            f"exceeds budget {config.retrieval.budget}"
        )
    return config


def synth_spec_from(config: PipelineConfig):
    """Build the synthetic-data spec for this config's [synth] section."""
    from .synth import SyntheticSpec

    s = config.synth
    return SyntheticSpec(
        n_items=s.items,
        n_clusters=s.clusters,
        cluster_spread=s.spread,
        cluster_scale=s.cluster_scale,
        mean_scale=s.mean_scale,
        modalities=dict(s.modalities),
        n_users=s.users,
        seq_len_min=s.seq_min,
        seq_len_max=s.seq_max,
        pattern_strength=s.pattern_strength,
        lag=s.lag,
        relevance_temp=s.relevance_temp,
        n_targets=s.targets,
        seed=config.seed,
    )

"""Synthetic corpora and interaction logs with controllable structure.

Items live in Gaussian clusters whose identity is shared across modalities
(noise independent per modality). User sequences follow a lagged cluster
process: with probability pattern_strength the next item's cluster is a fixed
permutation of the cluster seen `lag` steps back, otherwise uniform. Within a
cluster, items are drawn with probability proportional to exp(relevance/temp),
so relevance-guided resolution aligns with actual consumption. Everything is
a pure function of SyntheticSpec.seed, and vectors are rounded through float32
so the in-memory corpus matches a write/ingest round trip bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    Corpus,
    EmbeddingRecord,
    write_embeddings,
    write_metadata,
    write_user_logs,
)
from .errors import DataError


@dataclass
class SyntheticSpec:
    n_items: int = 10_000
    n_clusters: int = 32
    # Scalar, or per-modality map. A small spread makes a modality nearly
    # blind to item identity within a cluster (near-duplicate embeddings).
    cluster_spread: float | dict[str, float] = 0.2
    cluster_scale: float = 0.4
    mean_scale: float = 2.0
    modalities: dict[str, int] = field(
        default_factory=lambda: {"text": 24, "visual": 16, "audio": 12}
    )
    n_users: int = 600
    seq_len_min: int = 48
    seq_len_max: int = 64
    pattern_strength: float = 0.9
    lag: int = 1
    relevance_temp: float = 0.1
    n_targets: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters > self.n_items:
            raise DataError(
                f"{self.n_clusters} clusters but only {self.n_items} items"
            )
        if not 0.0 <= self.pattern_strength <= 1.0:
            raise DataError(f"pattern_strength {self.pattern_strength} outside [0, 1]")
        if self.seq_len_min < self.n_targets + 1:
            raise DataError("sequences too short to hold out targets")
        if self.lag < 1:
            raise DataError(f"lag wants >= 1, got {self.lag}")


@dataclass
class SyntheticData:
    corpus: Corpus
    logs: dict[str, list[tuple[str, int]]]
    cluster_of: dict[str, int]
    spec: SyntheticSpec


def _item_id(i: int) -> str:
    return f"item_{i:06d}"


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path | None = None) -> SyntheticData:
    """Sample a corpus plus user logs; optionally write them to out_dir.

    Files written: one <name>.semb per modality, metadata.tsv, logs.tsv.
    Deterministic given spec.seed (same seed, same bytes).
    """
    rng = np.random.default_rng(spec.seed)
    names = list(spec.modalities)
    # A dominant shared offset per modality makes the input distribution
    # homogeneous (directions nearly parallel); cluster_scale controls how
    # much real structure sits on top of it.
    centers = {}
    for name, dim in spec.modalities.items():
        mean = rng.normal(size=dim) * spec.mean_scale
        centers[name] = mean + rng.normal(size=(spec.n_clusters, dim)) * spec.cluster_scale
    clusters = np.arange(spec.n_items) % spec.n_clusters
    matrices = {}
    for name, dim in spec.modalities.items():
        spread = (
            spec.cluster_spread[name]
            if isinstance(spec.cluster_spread, dict)
            else spec.cluster_spread
        )
        noise = rng.normal(size=(spec.n_items, dim)) * spread
        raw = centers[name][clusters] + noise
        matrices[name] = raw.astype(np.float32).astype(np.float64)
    relevance = np.round(rng.uniform(size=spec.n_items), 6)
    freshness = rng.integers(1_600_000_000, 1_700_000_000, size=spec.n_items)

    records = {}
    cluster_of = {}
    for i in range(spec.n_items):
        item_id = _item_id(i)
        cluster_of[item_id] = int(clusters[i])
        records[item_id] = EmbeddingRecord(
            item_id=item_id,
            vectors={name: matrices[name][i] for name in names},
            relevance=float(relevance[i]),
            freshness=int(freshness[i]),
        )
    corpus = Corpus(records)

    # Per-cluster relevance-weighted sampling distributions.
    members: list[np.ndarray] = [
        np.flatnonzero(clusters == c) for c in range(spec.n_clusters)
    ]
    probs = []
    for c in range(spec.n_clusters):
        w = np.exp(relevance[members[c]] / spec.relevance_temp)
        probs.append(w / w.sum())

    step = rng.permutation(spec.n_clusters)
    logs: dict[str, list[tuple[str, int]]] = {}
    events: list[tuple[str, str, int]] = []
    for u in range(spec.n_users):
        user_id = f"user_{u:05d}"
        length = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
        seq_clusters: list[int] = []
        for t in range(length):
            if t >= spec.lag and rng.uniform() < spec.pattern_strength:
                c = int(step[seq_clusters[t - spec.lag]])
            else:
                c = int(rng.integers(0, spec.n_clusters))
            seq_clusters.append(c)
        user_events = []
        for t, c in enumerate(seq_clusters):
            pick = int(rng.choice(members[c], p=probs[c]))
            user_events.append((_item_id(pick), t))
        logs[user_id] = user_events
        events.extend((user_id, item, ts) for item, ts in user_events)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in names:
            write_embeddings(out / f"{name}.semb", matrices[name])
        write_metadata(
            out / "metadata.tsv",
            [
                (_item_id(i), float(relevance[i]), int(freshness[i]))
                for i in range(spec.n_items)
            ],
        )
        write_user_logs(out / "logs.tsv", events)
    return SyntheticData(corpus=corpus, logs=logs, cluster_of=cluster_of, spec=spec)


def standard_benchmark_spec(seed: int = 0, **overrides) -> SyntheticSpec:
    """The fixed 32-cluster, 10k-item corpus used by the built-in experiments."""
    base = dict(
        n_items=10_000,
        n_clusters=32,
        cluster_spread={"text": 0.25, "visual": 0.05, "audio": 0.15},
        cluster_scale=0.4,
        mean_scale=2.0,
        modalities={"text": 24, "visual": 16, "audio": 12},
        n_users=600,
        seq_len_min=48,
        seq_len_max=64,
        pattern_strength=0.9,
        lag=1,
        relevance_temp=0.1,
        seed=seed,
    )
    base.update(overrides)
    return SyntheticSpec(**base)

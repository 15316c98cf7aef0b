"""SID-to-item inverted index and collision handling.

Multiple items routinely share a Semantic ID, so the index keeps a posting
list per SID with the metadata needed to disambiguate: dedup tokens make
extended SIDs globally unique, resolve() picks items out of a shared SID
either randomly or by relevance/freshness, and allocate_budget() splits a
retrieval budget between a few deep SIDs or many shallow ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus
from .errors import DataError
from .tokenizer import SemanticId


@dataclass(frozen=True)
class PostingItem:
    item_id: str
    relevance: float
    freshness: int


@dataclass
class PostingList:
    """Items sharing one base SID, kept sorted by item_id."""

    sid: SemanticId
    items: list[PostingItem]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class SidIndex:
    postings: dict[SemanticId, PostingList]
    total_items: int
    shape: tuple[int, ...]

    def __contains__(self, sid: SemanticId) -> bool:
        return sid.base() in self.postings

    @property
    def distinct_sids(self) -> int:
        return len(self.postings)


def build_index(tokenized, corpus: Corpus, shape: tuple[int, ...]) -> SidIndex:
    """Materialize the SID -> items map from (item_id, sid) pairs.

    Metadata (relevance, freshness) is looked up in the corpus. Posting lists
    are ordered by item_id; duplicate item ids are rejected.
    """
    postings: dict[SemanticId, list[PostingItem]] = {}
    seen: set[str] = set()
    total = 0
    for item_id, sid in tokenized:
        if item_id in seen:
            raise DataError(f"duplicate item_id {item_id!r} in tokenized corpus")
        seen.add(item_id)
        for level, code in enumerate(sid.codes):
            if not 0 <= code < shape[level]:
                raise DataError(
                    f"item {item_id!r}: code {code} out of range at level {level} (K={shape[level]})"
                )
        rec = corpus[item_id]
        postings.setdefault(sid.base(), []).append(
            PostingItem(item_id, rec.relevance, rec.freshness)
        )
        total += 1
    built = {
        sid: PostingList(sid, sorted(items, key=lambda it: it.item_id))
        for sid, items in sorted(postings.items(), key=lambda kv: kv[0].codes)
    }
    return SidIndex(postings=built, total_items=total, shape=tuple(shape))


def assign_dedup_tokens(index: SidIndex) -> dict[str, SemanticId]:
    """Extend every item's SID with a dedup token; result is injective.

    Within each posting list, items sorted by ascending item_id receive
    tokens 0, 1, 2, ...
    """
    out: dict[str, SemanticId] = {}
    for sid, plist in index.postings.items():
        for token, item in enumerate(plist.items):
            out[item.item_id] = sid.with_dedup(token)
    return out


def uniqueness(index: SidIndex) -> float:
    """Distinct used SIDs over total items; 1.0 means collision-free."""
    if index.total_items == 0:
        raise DataError("uniqueness is undefined on an empty index")
    return index.distinct_sids / index.total_items


def extended_uniqueness(index: SidIndex) -> float:
    """Uniqueness recomputed over dedup-extended SIDs (always 1.0)."""
    if index.total_items == 0:
        raise DataError("uniqueness is undefined on an empty index")
    extended = set(assign_dedup_tokens(index).values())
    return len(extended) / index.total_items


@dataclass
class UtilizationMetrics:
    used_fraction: list[float]
    perplexity: list[float]


def utilization_metrics(tokenized, shape: tuple[int, ...]) -> UtilizationMetrics:
    """Per-level used-code fraction and exp-entropy of the code histogram."""
    counts = [np.zeros(k, dtype=np.int64) for k in shape]
    n = 0
    for _, sid in tokenized:
        for level, code in enumerate(sid.codes):
            counts[level][code] += 1
        n += 1
    if n == 0:
        raise DataError("utilization metrics want a nonempty tokenized corpus")
    used, perp = [], []
    for level_counts in counts:
        used.append(int((level_counts > 0).sum()) / len(level_counts))
        p = level_counts[level_counts > 0] / n
        entropy = float(-(p * np.log(p)).sum())
        perp.append(math.exp(entropy))
    return UtilizationMetrics(used_fraction=used, perplexity=perp)


@dataclass
class ResolveResult:
    item_ids: list[str]
    found: bool


def resolve(
    index: SidIndex,
    sid: SemanticId,
    count: int,
    strategy: str = "relevance_guided",
    seed: int | None = None,
) -> ResolveResult:
    """Pick up to count items out of sid's posting list.

    "relevance_guided" orders by relevance desc, then freshness desc, then
    item_id asc; "random" samples without replacement under the given seed.
    An unknown SID yields an empty result with found=False rather than an
    error, since unconstrained generation can emit unseen SIDs.
    """
    if count < 1:
        raise DataError(f"resolve wants count >= 1, got {count}")
    plist = index.postings.get(sid.base())
    if plist is None:
        return ResolveResult([], found=False)
    if strategy == "relevance_guided":
        ordered = sorted(
            plist.items, key=lambda it: (-it.relevance, -it.freshness, it.item_id)
        )
    elif strategy == "random":
        if seed is None:
            raise DataError("random resolution strategy wants an explicit seed")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(plist.items))
        ordered = [plist.items[i] for i in order]
    else:
        raise DataError(f"unknown resolution strategy {strategy!r}")
    return ResolveResult([it.item_id for it in ordered[:count]], found=True)


@dataclass(frozen=True)
class BudgetMode:
    """How to spend a retrieval budget: how many SIDs, how many items each."""

    kind: str  # "depth" or "breadth"
    top_k: int
    per_sid: int


def depth_mode(top_k: int = 10, per_sid: int = 100) -> BudgetMode:
    return BudgetMode("depth", top_k, per_sid)


def breadth_mode(top_k: int = 100, per_sid: int = 10) -> BudgetMode:
    return BudgetMode("breadth", top_k, per_sid)


@dataclass
class RetrievalPlan:
    entries: list[tuple[SemanticId, int]]
    budget: int
    truncated: bool = False

    @property
    def planned_total(self) -> int:
        return sum(q for _, q in self.entries)


def allocate_budget(
    candidates: list[SemanticId], budget: int, mode: BudgetMode
) -> RetrievalPlan:
    """Quota the first top_k candidate SIDs at per_sid items each.

    Unconsumed budget stays unallocated; duplicate candidate SIDs keep their
    first (best-ranked) occurrence. Fewer candidates than top_k yields a
    truncated plan rather than an error.
    """
    if not candidates:
        raise DataError("allocate_budget wants a nonempty candidate list")
    if mode.top_k < 1 or mode.per_sid < 1:
        raise DataError(f"top_k and per_sid must be positive, got {mode}")
    if mode.top_k * mode.per_sid > budget:
        raise DataError(
            f"plan {mode.top_k} x {mode.per_sid} exceeds budget {budget}"
        )
    seen: set[SemanticId] = set()
    entries: list[tuple[SemanticId, int]] = []
    for sid in candidates:
        if sid in seen:
            continue
        seen.add(sid)
        entries.append((sid, mode.per_sid))
        if len(entries) == mode.top_k:
            break
    return RetrievalPlan(
        entries=entries, budget=budget, truncated=len(entries) < mode.top_k
    )


def save_index(index: SidIndex, path: str | Path) -> None:
    """Persist as a sorted flat file, one line per item.

    Columns: item_id, L codes space-separated, dedup token, relevance,
    freshness (tab-separated). Dedup tokens are the canonical assignment.
    """
    extended = assign_dedup_tokens(index)
    rows = []
    for sid, plist in index.postings.items():
        for item in plist.items:
            ext = extended[item.item_id]
            rows.append(
                (
                    item.item_id,
                    " ".join(str(c) for c in sid.codes),
                    ext.dedup,
                    item.relevance,
                    item.freshness,
                )
            )
    rows.sort(key=lambda r: r[0])
    with open(path, "w") as f:
        for item_id, codes, dedup, relevance, freshness in rows:
            f.write(f"{item_id}\t{codes}\t{dedup}\t{relevance!r}\t{freshness}\n")


def load_index(path: str | Path, shape: tuple[int, ...] | None = None) -> SidIndex:
    """Rebuild a SidIndex from the flat file written by save_index."""
    postings: dict[SemanticId, list[PostingItem]] = {}
    total = 0
    max_code: list[int] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: want 5 fields, got {len(parts)}")
            item_id, code_str, _dedup, relevance, freshness = parts
            codes = tuple(int(c) for c in code_str.split())
            if not max_code:
                max_code = [0] * len(codes)
            for level, c in enumerate(codes):
                max_code[level] = max(max_code[level], c)
            sid = SemanticId(codes)
            postings.setdefault(sid, []).append(
                PostingItem(item_id, float(relevance), int(freshness))
            )
            total += 1
    if shape is None:
        shape = tuple(c + 1 for c in max_code)
    built = {
        sid: PostingList(sid, sorted(items, key=lambda it: it.item_id))
        for sid, items in sorted(postings.items(), key=lambda kv: kv[0].codes)
    }
    return SidIndex(postings=built, total_items=total, shape=tuple(shape))

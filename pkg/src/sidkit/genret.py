"""Desk-scale generative retrieval over SID token sequences.

User histories become flat token sequences (one begin token, then L codes
per item); a small causal transformer (or an n-gram fallback) learns to
predict the next item's codes; decoding is beam search constrained to a trie
of SIDs that actually exist in the index, so every emitted SID is resolvable.
The transformer is pure NumPy with a hand-written backward pass, trained by
Adam on next-token cross-entropy over the target positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError, ShapeError
from .nn import AdamState, adam_step
from .sid_index import BudgetMode, SidIndex, allocate_budget, resolve
from .tokenizer import SemanticId


@dataclass(frozen=True)
class SidVocabulary:
    """Flat token space: specials, then one disjoint code range per level."""

    shape: tuple[int, ...]

    PAD = 0
    BEGIN = 1
    END = 2

    @property
    def levels(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return 3 + sum(self.shape)

    def level_offset(self, level: int) -> int:
        return 3 + sum(self.shape[:level])

    def token(self, level: int, code: int) -> int:
        if not 0 <= code < self.shape[level]:
            raise DataError(
                f"code {code} out of range at level {level} (K={self.shape[level]})"
            )
        return self.level_offset(level) + code

    def code(self, token: int) -> tuple[int, int]:
        """Invert a code token to (level, code); specials are rejected."""
        if token < 3 or token >= self.size:
            raise DataError(f"token {token} is not a code token")
        for level in range(self.levels):
            off = self.level_offset(level)
            if token < off + self.shape[level]:
                return level, token - off
        raise DataError(f"token {token} is not a code token")

    def encode_sid(self, sid: SemanticId) -> list[int]:
        return [self.token(l, c) for l, c in enumerate(sid.codes)]


class SidTrie:
    """Prefix tree over the distinct length-L SIDs present in an index."""

    def __init__(self, levels: int):
        self.levels = levels
        self.root: dict = {}
        self.size = 0

    @classmethod
    def from_sids(cls, sids, levels: int) -> "SidTrie":
        trie = cls(levels)
        for sid in sids:
            if len(sid.codes) != levels:
                raise ShapeError(
                    f"sid {sid.codes} has {len(sid.codes)} levels, trie wants {levels}"
                )
            trie.insert(sid)
        return trie

    def insert(self, sid: SemanticId) -> None:
        node = self.root
        for code in sid.codes[:-1]:
            node = node.setdefault(code, {})
        leaf_code = sid.codes[-1]
        if leaf_code not in node:
            node[leaf_code] = sid.base()
            self.size += 1

    def children(self, prefix: tuple[int, ...]) -> list[int]:
        """Feasible next codes under prefix, sorted ascending."""
        node = self.root
        for code in prefix:
            node = node.get(code)
            if node is None or isinstance(node, SemanticId):
                return []
        return sorted(node)

    def __contains__(self, sid: SemanticId) -> bool:
        node = self.root
        for code in sid.codes[:-1]:
            node = node.get(code)
            if not isinstance(node, dict):
                return False
        return sid.codes[-1] in node

    def leaves(self) -> list[SemanticId]:
        out: list[SemanticId] = []

        def walk(node):
            for code in sorted(node):
                child = node[code]
                if isinstance(child, SemanticId):
                    out.append(child)
                else:
                    walk(child)

        walk(self.root)
        return out


@dataclass
class UserSequence:
    """Chronological item ids with a split separating history from targets."""

    user_id: str
    items: list[str]
    split: int

    def __post_init__(self):
        if not 0 < self.split <= len(self.items):
            raise DataError(
                f"user {self.user_id!r}: split {self.split} outside 1..{len(self.items)}"
            )

    @property
    def history(self) -> list[str]:
        return self.items[: self.split]

    @property
    def targets(self) -> list[str]:
        return self.items[self.split :]


def user_sequences_from_logs(
    logs: dict[str, list[tuple[str, int]]], n_targets: int = 1
) -> list[UserSequence]:
    """Hold out each user's last n_targets items as evaluation targets."""
    out = []
    for user_id, events in logs.items():
        items = [item for item, _ in events]
        if len(items) <= n_targets:
            continue
        out.append(UserSequence(user_id, items, split=len(items) - n_targets))
    return out


@dataclass
class GrExample:
    tokens: np.ndarray  # begin + history codes + target codes
    prompt_len: int  # index of the first target token


@dataclass
class GrDataset:
    examples: list[GrExample]
    vocab: SidVocabulary
    levels: int
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.examples)


def history_tokens(
    vocab: SidVocabulary,
    sids: dict[str, SemanticId],
    items: list[str],
    max_history: int,
) -> list[int] | None:
    """BEGIN plus the flattened SIDs of the most recent max_history items.

    Items missing a SID make the whole window unusable (returns None).
    """
    window = items[-max_history:] if max_history else []
    tokens = [SidVocabulary.BEGIN]
    for item in window:
        sid = sids.get(item)
        if sid is None:
            return None
        tokens.extend(vocab.encode_sid(sid))
    return tokens


def build_training_sequences(
    users: list[UserSequence],
    sids: dict[str, SemanticId],
    vocab: SidVocabulary,
    max_history: int,
) -> GrDataset:
    """One example per in-history position: recent window in, next SID out.

    Truncation keeps the most recent items. Positions whose target or window
    items lack a SID are dropped and counted.
    """
    if max_history < 1:
        raise DataError(f"max_history wants >= 1, got {max_history}")
    examples = []
    dropped = 0
    for user in users:
        hist = user.history
        for t in range(1, len(hist)):
            target_sid = sids.get(hist[t])
            window = hist[max(0, t - max_history) : t]
            prompt = history_tokens(vocab, sids, window, max_history)
            if target_sid is None or prompt is None:
                dropped += 1
                continue
            tokens = prompt + vocab.encode_sid(target_sid)
            examples.append(
                GrExample(np.array(tokens, dtype=np.int64), prompt_len=len(prompt))
            )
    return GrDataset(examples, vocab, levels=vocab.levels, dropped=dropped)


# ---------------------------------------------------------------------------
# NumPy causal transformer with manual backward
# ---------------------------------------------------------------------------

_RMS_EPS = 1e-5


def _rmsnorm_fwd(x):
    ms = (x * x).mean(axis=-1, keepdims=True) + _RMS_EPS
    scale = ms**-0.5
    return x * scale, scale


def _rmsnorm_bwd(g, x, scale):
    d = x.shape[-1]
    xg = (x * g).sum(axis=-1, keepdims=True)
    return scale * (g - (scale * scale / d) * x * xg)


def _relu2_fwd(x):
    return np.maximum(x, 0.0) ** 2


def _relu2_bwd(g, x):
    return g * 2.0 * np.maximum(x, 0.0)


def _attention_fwd(q, k, v, n_heads):
    b, t, d = q.shape
    dh = d // n_heads
    qh = q.reshape(b, t, n_heads, dh)
    kh = k.reshape(b, t, n_heads, dh)
    vh = v.reshape(b, t, n_heads, dh)
    scores = np.einsum("bihd,bjhd->bhij", qh, kh) / math.sqrt(dh)
    mask = np.triu(np.full((t, t), -np.inf), 1)
    scores = scores + mask[None, None]
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = np.einsum("bhij,bjhd->bihd", weights, vh)
    return out.reshape(b, t, d), weights


def _attention_bwd(g, q, k, v, weights, n_heads):
    b, t, d = q.shape
    dh = d // n_heads
    gh = g.reshape(b, t, n_heads, dh)
    qh = q.reshape(b, t, n_heads, dh)
    kh = k.reshape(b, t, n_heads, dh)
    vh = v.reshape(b, t, n_heads, dh)
    g_w = np.einsum("bihd,bjhd->bhij", gh, vh)
    g_s = weights * (g_w - (weights * g_w).sum(axis=-1, keepdims=True))
    g_q = np.einsum("bhij,bjhd->bihd", g_s, kh) / math.sqrt(dh)
    g_k = np.einsum("bhij,bihd->bjhd", g_s, qh) / math.sqrt(dh)
    g_v = np.einsum("bhij,bihd->bjhd", weights, gh)
    return (
        g_q.reshape(b, t, d),
        g_k.reshape(b, t, d),
        g_v.reshape(b, t, d),
    )


@dataclass
class GrConfig:
    vocab_size: int
    max_seq: int
    n_layers: int = 2
    width: int = 128
    n_heads: int = 4
    max_history: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ShapeError(f"width {self.width} not divisible by {self.n_heads} heads")


class GrTransformer:
    """Small causal decoder over SID tokens; parameters in a flat dict."""

    def __init__(self, config: GrConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        v, d, t = config.vocab_size, config.width, config.max_seq
        self.params: dict[str, np.ndarray] = {
            "wte": rng.normal(0.0, 0.02, size=(v, d)),
            "wpe": rng.normal(0.0, 0.02, size=(t, d)),
            "lm_head": rng.normal(0.0, 0.02, size=(v, d)),
        }
        for i in range(config.n_layers):
            for name in ("wq", "wk", "wv"):
                self.params[f"layer{i}.{name}"] = rng.normal(0.0, 0.02, size=(d, d))
            # Residual branches start at zero for stable early training.
            self.params[f"layer{i}.wo"] = np.zeros((d, d))
            self.params[f"layer{i}.fc1"] = rng.normal(0.0, 0.02, size=(4 * d, d))
            self.params[f"layer{i}.fc2"] = np.zeros((d, 4 * d))

    @property
    def max_history(self) -> int:
        return self.config.max_history

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k][...] = v

    def _forward(self, tokens: np.ndarray):
        p = self.params
        b, t = tokens.shape
        if t > self.config.max_seq:
            raise ShapeError(f"sequence length {t} > max_seq {self.config.max_seq}")
        x = p["wte"][tokens] + p["wpe"][:t]
        cache = {"tokens": tokens, "x_pre_emb_norm": x}
        x, s_emb = _rmsnorm_fwd(x)
        cache["s_emb"] = s_emb
        cache["layers"] = []
        for i in range(self.config.n_layers):
            c: dict = {"x_in": x}
            a_in, s1 = _rmsnorm_fwd(x)
            c["a_in"], c["s1"] = a_in, s1
            q = a_in @ p[f"layer{i}.wq"].T
            k = a_in @ p[f"layer{i}.wk"].T
            v = a_in @ p[f"layer{i}.wv"].T
            attn, w = _attention_fwd(q, k, v, self.config.n_heads)
            c["q"], c["k"], c["v"], c["attn"], c["w"] = q, k, v, attn, w
            x = x + attn @ p[f"layer{i}.wo"].T
            c["x_mid"] = x
            m_in, s2 = _rmsnorm_fwd(x)
            c["m_in"], c["s2"] = m_in, s2
            h1 = m_in @ p[f"layer{i}.fc1"].T
            c["h1"] = h1
            h2 = _relu2_fwd(h1)
            c["h2"] = h2
            x = x + h2 @ p[f"layer{i}.fc2"].T
            cache["layers"].append(c)
        cache["x_final"] = x
        logits = x @ p["lm_head"].T
        return logits, cache

    def loss_and_grads(self, tokens: np.ndarray, loss_start: int):
        """Mean next-token cross-entropy over positions >= loss_start - 1.

        tokens is a (B, T) batch of equal-length sequences whose targets
        start at index loss_start; predictions at positions loss_start-1 ..
        T-2 are scored against tokens at loss_start .. T-1.
        """
        logits, cache = self._forward(tokens)
        b, t = tokens.shape
        pos = np.arange(loss_start - 1, t - 1)
        targets = tokens[:, pos + 1]
        sub = logits[:, pos, :]
        sub = sub - sub.max(axis=-1, keepdims=True)
        # Log-space cross-entropy: diverging logits yield a huge (finite)
        # loss instead of saturating at an epsilon floor.
        logp = sub - np.log(np.exp(sub).sum(axis=-1, keepdims=True))
        probs = np.exp(logp)
        n_terms = b * len(pos)
        picked = logp[np.arange(b)[:, None], np.arange(len(pos))[None, :], targets]
        loss = float(-picked.mean())
        if not math.isfinite(loss):
            raise NumericalError("non-finite generative-retrieval loss")

        g_logits = np.zeros_like(logits)
        g_sub = probs.copy()
        g_sub[np.arange(b)[:, None], np.arange(len(pos))[None, :], targets] -= 1.0
        g_logits[:, pos, :] = g_sub / n_terms
        grads = self._backward(g_logits, cache)
        return loss, grads

    def _backward(self, g_logits: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        tokens = cache["tokens"]
        b, t = tokens.shape
        flat_g = g_logits.reshape(-1, g_logits.shape[-1])
        grads["lm_head"] += flat_g.T @ cache["x_final"].reshape(-1, self.config.width)
        g_x = g_logits @ p["lm_head"]
        for i in range(self.config.n_layers - 1, -1, -1):
            c = cache["layers"][i]
            # MLP block.
            g_mlp_out = g_x
            g_h2 = g_mlp_out @ p[f"layer{i}.fc2"]
            grads[f"layer{i}.fc2"] += g_mlp_out.reshape(-1, self.config.width).T @ c[
                "h2"
            ].reshape(-1, 4 * self.config.width)
            g_h1 = _relu2_bwd(g_h2, c["h1"])
            grads[f"layer{i}.fc1"] += g_h1.reshape(-1, 4 * self.config.width).T @ c[
                "m_in"
            ].reshape(-1, self.config.width)
            g_m_in = g_h1 @ p[f"layer{i}.fc1"]
            g_x = g_mlp_out + _rmsnorm_bwd(g_m_in, c["x_mid"], c["s2"])
            # Attention block.
            g_attn_out = g_x
            g_attn = g_attn_out @ p[f"layer{i}.wo"]
            grads[f"layer{i}.wo"] += g_attn_out.reshape(-1, self.config.width).T @ c[
                "attn"
            ].reshape(-1, self.config.width)
            g_q, g_k, g_v = _attention_bwd(
                g_attn, c["q"], c["k"], c["v"], c["w"], self.config.n_heads
            )
            flat_a_in = c["a_in"].reshape(-1, self.config.width)
            grads[f"layer{i}.wq"] += g_q.reshape(-1, self.config.width).T @ flat_a_in
            grads[f"layer{i}.wk"] += g_k.reshape(-1, self.config.width).T @ flat_a_in
            grads[f"layer{i}.wv"] += g_v.reshape(-1, self.config.width).T @ flat_a_in
            g_a_in = (
                g_q @ p[f"layer{i}.wq"]
                + g_k @ p[f"layer{i}.wk"]
                + g_v @ p[f"layer{i}.wv"]
            )
            g_x = g_attn_out + _rmsnorm_bwd(g_a_in, c["x_in"], c["s1"])
        g_emb = _rmsnorm_bwd(g_x, cache["x_pre_emb_norm"], cache["s_emb"])
        np.add.at(grads["wte"], tokens, g_emb)
        grads["wpe"][:t] += g_emb.sum(axis=0)
        return grads

    def logprobs_batch(self, tokens: np.ndarray) -> np.ndarray:
        """Log softmax over the vocabulary at each sequence's last position."""
        logits, _ = self._forward(tokens)
        last = logits[:, -1, :]
        last = last - last.max(axis=-1, keepdims=True)
        return last - np.log(np.exp(last).sum(axis=-1, keepdims=True))

    def logprobs(self, prefix: list[int]) -> np.ndarray:
        return self.logprobs_batch(np.array([prefix], dtype=np.int64))[0]


class NgramModel:
    """Count-based next-token model with backoff; a deterministic harness.

    Uses the longest context (up to `order` tokens) that has been observed,
    Laplace-smoothed; unseen contexts back off toward the unigram and
    finally the uniform distribution.
    """

    def __init__(self, vocab_size: int, order: int = 3, alpha: float = 0.1, max_history: int = 32):
        self.vocab_size = vocab_size
        self.order = order
        self.alpha = alpha
        self.max_history = max_history
        self.tables: list[dict[tuple[int, ...], np.ndarray]] = [
            {} for _ in range(order + 1)
        ]

    def fit(self, dataset: GrDataset) -> "NgramModel":
        for ex in dataset.examples:
            toks = ex.tokens.tolist()
            for t in range(1, len(toks)):
                nxt = toks[t]
                for n in range(self.order + 1):
                    if t - n < 0:
                        continue
                    ctx = tuple(toks[t - n : t])
                    table = self.tables[n]
                    if ctx not in table:
                        table[ctx] = np.zeros(self.vocab_size)
                    table[ctx][nxt] += 1.0
        return self

    def logprobs(self, prefix: list[int]) -> np.ndarray:
        for n in range(min(self.order, len(prefix)), -1, -1):
            ctx = tuple(prefix[len(prefix) - n :])
            counts = self.tables[n].get(ctx)
            if counts is not None:
                probs = (counts + self.alpha) / (counts.sum() + self.alpha * self.vocab_size)
                return np.log(probs)
        return np.full(self.vocab_size, -math.log(self.vocab_size))

    def logprobs_batch(self, tokens: np.ndarray) -> np.ndarray:
        return np.stack([self.logprobs(list(row)) for row in tokens])


@dataclass
class TrainGrConfig:
    epochs: int
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.1
    divergence_threshold: float = 1e6


@dataclass
class GrEpochMetrics:
    epoch: int
    train_loss: float
    holdout_loss: float


@dataclass
class GrTrainResult:
    model: GrTransformer
    epochs: list[GrEpochMetrics] = field(default_factory=list)
    aborted: bool = False


def _bucket_batches(examples, indices, batch_size):
    """Group example indices by sequence length, then slice into batches."""
    by_len: dict[int, list[int]] = {}
    for idx in indices:
        by_len.setdefault(len(examples[idx].tokens), []).append(idx)
    for length in sorted(by_len):
        bucket = by_len[length]
        for start in range(0, len(bucket), batch_size):
            yield bucket[start : start + batch_size]


def _mean_loss(model: GrTransformer, examples, indices, batch_size) -> float:
    total, count = 0.0, 0
    for batch_idx in _bucket_batches(examples, indices, batch_size):
        tokens = np.stack([examples[i].tokens for i in batch_idx])
        loss_start = examples[batch_idx[0]].prompt_len
        loss, _ = model.loss_and_grads(tokens, loss_start)
        total += loss * len(batch_idx)
        count += len(batch_idx)
    return total / max(count, 1)


def train_gr(model: GrTransformer, dataset: GrDataset, config: TrainGrConfig) -> GrTrainResult:
    """Adam on next-token cross-entropy; deterministic given config.seed."""
    if config.epochs == 0:
        return GrTrainResult(model=model)
    if not dataset.examples:
        raise DataError("empty training dataset")
    rng = np.random.default_rng(config.seed)
    n = len(dataset.examples)
    perm = rng.permutation(n)
    n_holdout = max(1, int(config.holdout_fraction * n)) if n > 1 else 0
    holdout_idx = perm[:n_holdout].tolist()
    train_idx = perm[n_holdout:].tolist()
    if not train_idx:
        raise DataError("no training examples left after holdout split")

    state = AdamState.init(model.params)
    checkpoint = model.snapshot()
    result = GrTrainResult(model=model)
    for epoch in range(config.epochs):
        order = [train_idx[i] for i in rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        diverged = False
        for batch_idx in _bucket_batches(dataset.examples, order, config.batch_size):
            tokens = np.stack([dataset.examples[i].tokens for i in batch_idx])
            loss_start = dataset.examples[batch_idx[0]].prompt_len
            try:
                loss, grads = model.loss_and_grads(tokens, loss_start)
            except NumericalError:
                diverged = True
                break
            if loss > config.divergence_threshold:
                diverged = True
                break
            adam_step(model.params, grads, state, lr=config.lr)
            total += loss * len(batch_idx)
            count += len(batch_idx)
        if diverged:
            model.restore(checkpoint)
            result.aborted = True
            break
        checkpoint = model.snapshot()
        holdout_loss = (
            _mean_loss(model, dataset.examples, holdout_idx, config.batch_size)
            if holdout_idx
            else float("nan")
        )
        result.epochs.append(
            GrEpochMetrics(epoch=epoch, train_loss=total / max(count, 1), holdout_loss=holdout_loss)
        )
    return result


def beam_search_constrained(
    model,
    prefix_tokens: list[int],
    beam_width: int,
    trie: SidTrie,
    vocab: SidVocabulary,
) -> list[tuple[SemanticId, float]]:
    """Trie-constrained beam search over the L levels of a SID.

    At each level, per-beam log-probabilities are renormalized over the
    trie-feasible tokens, so scores stay comparable across beams. Returns
    min(beam_width, |leaves|) results sorted by score descending, ties broken
    by lexicographic code order.
    """
    if beam_width < 1:
        raise DataError(f"beam_width wants >= 1, got {beam_width}")
    if trie.size == 0:
        raise DataError("empty SID trie")
    beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    for _level in range(trie.levels):
        rows = np.stack(
            [
                np.array(
                    prefix_tokens + [vocab.token(l, c) for l, c in enumerate(codes)],
                    dtype=np.int64,
                )
                for _, codes in beams
            ]
        )
        logprobs = model.logprobs_batch(rows)
        candidates: list[tuple[float, tuple[int, ...]]] = []
        for row, (score, codes) in enumerate(beams):
            feasible = trie.children(codes)
            toks = [vocab.token(len(codes), c) for c in feasible]
            lp = logprobs[row][toks]
            norm = lp - _logsumexp(lp)
            for c, lp_c in zip(feasible, norm):
                candidates.append((score + float(lp_c), codes + (c,)))
        candidates.sort(key=lambda sc: (-sc[0], sc[1]))
        beams = candidates[:beam_width]
    return [(SemanticId(codes), score) for score, codes in beams]


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + math.log(float(np.exp(x - m).sum()))


def beam_search_constrained_batch(
    model,
    prompts: list[list[int]],
    beam_width: int,
    trie: SidTrie,
    vocab: SidVocabulary,
) -> list[list[tuple[SemanticId, float]]]:
    """beam_search_constrained over many prompts with shared model calls.

    Prompts are grouped by length so each level's forward pass is one batch
    per group; per-prompt pruning and tie-breaking match the single-prompt
    path. Used by the experiment drivers, where per-user calls dominate.
    """
    if trie.size == 0:
        raise DataError("empty SID trie")
    results: list[list[tuple[SemanticId, float]] | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    for length in sorted(by_len):
        group = by_len[length]
        beams: dict[int, list[tuple[float, tuple[int, ...]]]] = {
            i: [(0.0, ())] for i in group
        }
        for _level in range(trie.levels):
            rows = []
            owners = []
            for i in group:
                for _, codes in beams[i]:
                    rows.append(
                        prompts[i] + [vocab.token(l, c) for l, c in enumerate(codes)]
                    )
                    owners.append(i)
            logprobs = model.logprobs_batch(np.array(rows, dtype=np.int64))
            candidates: dict[int, list[tuple[float, tuple[int, ...]]]] = {
                i: [] for i in group
            }
            row = 0
            for i in group:
                for score, codes in beams[i]:
                    feasible = trie.children(codes)
                    toks = [vocab.token(len(codes), c) for c in feasible]
                    lp = logprobs[row][toks]
                    norm = lp - _logsumexp(lp)
                    for c, lp_c in zip(feasible, norm):
                        candidates[i].append((score + float(lp_c), codes + (c,)))
                    row += 1
            for i in group:
                candidates[i].sort(key=lambda sc: (-sc[0], sc[1]))
                beams[i] = candidates[i][:beam_width]
        for i in group:
            results[i] = [(SemanticId(codes), score) for score, codes in beams[i]]
    return results  # type: ignore[return-value]


@dataclass
class RetrieveResult:
    item_ids: list[str]
    candidate_sids: list[tuple[SemanticId, float]]
    all_unknown: bool = False


def retrieve(
    model,
    index: SidIndex,
    trie: SidTrie,
    vocab: SidVocabulary,
    history_items: list[str],
    sids: dict[str, SemanticId],
    mode: BudgetMode,
    budget: int,
    beam_width: int | None = None,
    strategy: str = "relevance_guided",
    seed: int = 0,
    spillover: bool = False,
) -> RetrieveResult:
    """Generate candidate SIDs, allocate the budget, resolve to items.

    Items are concatenated in plan order; each base SID maps items uniquely,
    so the output never repeats an item and never exceeds the budget.
    """
    prefix = history_tokens(vocab, sids, history_items, model.max_history)
    if prefix is None:
        raise DataError("history contains items without SIDs")
    width = beam_width if beam_width is not None else mode.top_k
    candidates = beam_search_constrained(model, prefix, width, trie, vocab)
    return resolve_candidates(
        index, candidates, mode, budget, strategy=strategy, seed=seed, spillover=spillover
    )


def resolve_candidates(
    index: SidIndex,
    candidates: list[tuple[SemanticId, float]],
    mode: BudgetMode,
    budget: int,
    strategy: str = "relevance_guided",
    seed: int = 0,
    spillover: bool = False,
) -> RetrieveResult:
    """Budget allocation plus per-SID resolution over ranked candidates."""
    plan = allocate_budget([sid for sid, _ in candidates], budget, mode)
    items: list[str] = []
    seen: set[str] = set()
    any_found = False
    consumed = set()
    for rank, (sid, quota) in enumerate(plan.entries):
        consumed.add(sid)
        got = resolve(index, sid, quota, strategy=strategy, seed=seed + rank)
        any_found = any_found or got.found
        for item in got.item_ids:
            if item not in seen and len(items) < budget:
                seen.add(item)
                items.append(item)
    if spillover and len(items) < min(budget, plan.planned_total):
        for rank, (sid, _) in enumerate(candidates):
            if sid in consumed or len(items) >= budget:
                continue
            got = resolve(
                index, sid, mode.per_sid, strategy=strategy, seed=seed + len(candidates) + rank
            )
            any_found = any_found or got.found
            for item in got.item_ids:
                if item not in seen and len(items) < budget:
                    seen.add(item)
                    items.append(item)
    return RetrieveResult(
        item_ids=items, candidate_sids=candidates, all_unknown=not any_found
    )


@dataclass
class MetricTable:
    """Macro-averaged Recall@K / NDCG@K over users."""

    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    short_result_lists: int = 0


def eval_recall_ndcg(
    results: dict[str, list[str]],
    truth: dict[str, list[str]],
    k_values: list[int],
) -> MetricTable:
    """Binary-gain metrics against per-user ground truth.

    Recall@K = |hits in top K| / |truth|; NDCG@K uses 1/log2(rank+1) gains
    normalized by the ideal DCG. Result lists shorter than K are evaluated
    over their available prefix and counted in short_result_lists.
    """
    users = sorted(truth)
    if not users:
        raise DataError("no users to evaluate")
    for user in users:
        if not truth[user]:
            raise DataError(f"user {user!r} has no ground-truth items")
    recall = {k: 0.0 for k in k_values}
    ndcg = {k: 0.0 for k in k_values}
    short = 0
    max_k = max(k_values)
    for user in users:
        ranked = results.get(user, [])
        if len(ranked) < max_k:
            short += 1
        truth_set = set(truth[user])
        for k in k_values:
            top = ranked[:k]
            hits = [i for i, item in enumerate(top) if item in truth_set]
            recall[k] += len(hits) / len(truth_set)
            dcg = sum(1.0 / math.log2(i + 2) for i in hits)
            ideal = sum(
                1.0 / math.log2(i + 2) for i in range(min(k, len(truth_set)))
            )
            ndcg[k] += dcg / ideal
    n = len(users)
    return MetricTable(
        recall={k: v / n for k, v in recall.items()},
        ndcg={k: v / n for k, v in ndcg.items()},
        n_users=n,
        short_result_lists=short,
    )


def next_sid_accuracy(
    model, dataset: GrDataset, trie: SidTrie, vocab: SidVocabulary
) -> float:
    """Greedy constrained decode vs the true next SID, over a dataset."""
    if not dataset.examples:
        raise DataError("empty dataset")
    hits = 0
    for ex in dataset.examples:
        prompt = ex.tokens[: ex.prompt_len].tolist()
        predicted = beam_search_constrained(model, prompt, 1, trie, vocab)[0][0]
        target_tokens = ex.tokens[ex.prompt_len :].tolist()
        target = tuple(vocab.code(t)[1] for t in target_tokens)
        hits += predicted.codes == target
    return hits / len(dataset.examples)

"""Acceptance suite: one test per release criterion, each printing a
pass/fail line. Run with `pytest tests/test_acceptance.py -v -s`.

The trend criteria (collapse mitigation, shape sweep, history sweep) drive
the shipped experiment pipeline on the standard synthetic corpus with pinned
seeds, so their outcomes are exact reproductions, not statistical hopes.
"""

import math
import time

import numpy as np
import pytest

from conftest import tiny_rqvae, random_inputs
from test_genret import FixedModel, _brute_force_metrics, _enumerate_leaf_scores
from test_tokenizer import oracle_codes, _frozen_loss_fn

from sidkit.config import parse_config
from sidkit.experiments import run_experiment
from sidkit.genret import (
    SidTrie,
    SidVocabulary,
    beam_search_constrained,
    eval_recall_ndcg,
)
from sidkit.nn import grad_check
from sidkit.report import read_csv
from sidkit.sid_index import build_index, extended_uniqueness
from sidkit.tokenizer import (
    SemanticId,
    quantize,
    rqvae_loss_and_grads,
    ste_decode_forward,
)


def _report(criterion: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}"
    if detail:
        line += f" — {detail}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# Numerics criteria
# ---------------------------------------------------------------------------


def test_gradient_correctness():
    """Full loss, fusion x straight-through, 16-item batch, rel err < 1e-4."""
    start = time.perf_counter()
    worst = 0.0
    for ste in (False, True):
        for n_mod in (1, 2):
            model = tiny_rqvae(
                seed=11, n_modalities=n_mod, ste_enabled=ste, levels=3, k=5, hidden=4
            )
            inputs = random_inputs(model, 16, seed=n_mod * 10 + ste)
            rep = grad_check(
                _frozen_loss_fn(model, inputs),
                model.param_dict(),
                epsilon=1e-5,
                tolerance=1e-4,
            )
            worst = max(worst, rep.max_rel_error)
            assert rep.passed, f"ste={ste} mods={n_mod}: {rep.max_rel_error}"
    elapsed = time.perf_counter() - start
    _report(
        "gradient correctness (fusion x STE, 16-item batch, <1e-4)",
        worst < 1e-4 and elapsed < 60,
        f"max rel err {worst:.2e}, {elapsed:.1f}s",
    )


def test_ste_forward_equivalence():
    """1000 (model, input) pairs: ste forward == plain sum within 1e-12."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for model_seed in range(50):
        model = tiny_rqvae(seed=model_seed, levels=3, k=4, hidden=3, ste_enabled=True)
        for _ in range(20):
            h0 = rng.normal(size=3)
            sid, trace = quantize(model, h0)
            plain = sum(
                model.codebooks[l].centroids[c] for l, c in enumerate(sid.codes)
            )
            ste = ste_decode_forward(model, trace)
            worst = max(worst, float(np.max(np.abs(ste - plain))))
    _report(
        "STE forward-equivalence (1000 pairs, inf-norm < 1e-12)",
        worst < 1e-12,
        f"worst {worst:.2e}",
    )


def test_ste_gradient_contrast():
    """Unselected level-0 rows: exactly zero grad without STE, nonzero with."""
    inputs = None
    ok = True
    detail = []
    for ste in (False, True):
        model = tiny_rqvae(seed=21, ste_enabled=ste, levels=2, k=6, hidden=3)
        if inputs is None:
            inputs = random_inputs(model, 4, seed=3)
        _, grads, codes = rqvae_loss_and_grads(model, inputs)
        unselected = sorted(set(range(6)) - set(codes[:, 0].tolist()))
        assert unselected
        g0 = grads["codebooks.0"]
        if ste:
            nonzero = all(np.any(g0[k] != 0.0) for k in unselected)
            ok &= nonzero
            detail.append(f"STE on: {len(unselected)} unselected rows all nonzero")
        else:
            exact_zero = all(np.array_equal(g0[k], np.zeros(3)) for k in unselected)
            ok &= exact_zero
            detail.append("STE off: exactly zero")
    _report("STE gradient contrast (zero vs nonzero on unselected rows)", ok, "; ".join(detail))


def test_assignment_oracle():
    """10k quantizations across all four rules match exhaustive scans."""
    rng = np.random.default_rng(5)
    total = agree = 0
    for rule in ("cosine", "dot", "abs_dot", "l2"):
        for model_seed in range(5):
            model = tiny_rqvae(seed=model_seed, rule=rule, levels=3, k=6, hidden=4)
            for _ in range(500):
                h0 = rng.normal(size=4)
                sid, _ = quantize(model, h0)
                total += 1
                agree += list(sid.codes) == oracle_codes(model.codebooks, h0, rule)
    _report(
        "assignment oracle (10k quantizations, 4 rules, 100% agreement)",
        total == 10_000 and agree == total,
        f"{agree}/{total}",
    )


def test_residual_identity():
    """h0 - sum of selected centroids reproduces the final residual."""
    rng = np.random.default_rng(9)
    worst = 0.0
    for model_seed in range(20):
        model = tiny_rqvae(seed=model_seed, levels=3, k=5, hidden=4)
        for _ in range(100):
            h0 = rng.normal(size=4)
            sid, trace = quantize(model, h0)
            recon = sum(
                model.codebooks[l].centroids[c] for l, c in enumerate(sid.codes)
            )
            worst = max(
                worst, float(np.max(np.abs((h0 - recon) - trace.residuals[-1])))
            )
    _report("residual identity (within 1e-12)", worst < 1e-12, f"worst {worst:.2e}")


# ---------------------------------------------------------------------------
# Experiment-scale criteria on the standard synthetic corpus
# ---------------------------------------------------------------------------

_STANDARD_SYNTH = """
[synth]
items = 10000
clusters = 32
spread = text:0.25,visual:0.05,audio:0.15
cluster_scale = 0.4
mean_scale = 2.0
modalities = text:24,visual:16,audio:12
users = 600
seq_min = 48
seq_max = 64
relevance_temp = 0.1
"""

_ABLATION_CONF = (
    """
[run]
seed = 0
out_dir = {out}
"""
    + _STANDARD_SYNTH
    + """
pattern_strength = 0.9
lag = 1

[tokenizer]
family = rqvae
levels = 3
codebook_size = 32
hidden_dim = 16
enc_hidden = 64
activation = relu
assignment_rule = l2
codebook_init = random
codebook_init_scale = 0.1
epochs = 20
batch_size = 256
lr = 0.003
modalities = visual,text,audio

[experiment]
name = ablation
seeds = 0,1,2
"""
)


def test_collapse_mitigation_trend(tmp_path):
    """STE beats the collapsed baseline; a 2nd modality beats one, per seed."""
    config = parse_config(_ABLATION_CONF.format(out=tmp_path / "ablation"))
    start = time.perf_counter()
    result = run_experiment(config)
    elapsed = time.perf_counter() - start
    by_key = {(r["treatment"], r["seed"]): r["uniqueness"] for r in result.rows}
    ok = True
    details = []
    for seed in (0, 1, 2):
        base = by_key[("baseline", seed)]
        ste = by_key[("+ ste", seed)]
        two = by_key[("+ text", seed)]
        ok &= ste > base and two > ste
        details.append(f"seed {seed}: {base:.4f} < {ste:.4f} < {two:.4f}")
    n_runs = len(result.rows)
    per_run = elapsed / max(n_runs, 1)
    ok &= per_run < 600
    _report(
        "collapse mitigation trend (uniq: +STE > baseline, +modality > one)",
        ok,
        "; ".join(details) + f"; {per_run:.0f}s/run",
    )


_SWEEP_CONF = (
    """
[run]
seed = 0
out_dir = {out}
"""
    + _STANDARD_SYNTH
    + """
pattern_strength = 0.9
lag = 1

[tokenizer]
family = rq_kmeans
levels = 3

[gr]
model = ngram
max_history = 8
beam_width = 10
positions_per_user = 4

[retrieval]
budget = 1000
top_k = 10
per_sid = 100

[experiment]
name = shape_sweep
k_values = 8,16,32,64
seeds = 0,1,2
"""
)


def test_shape_sweep_monotonicity(tmp_path):
    """Uniqueness non-decreasing in K over {8,16,32,64} for each seed."""
    config = parse_config(_SWEEP_CONF.format(out=tmp_path / "sweep"))
    result = run_experiment(config)
    ok = True
    details = []
    for seed in (0, 1, 2):
        series = sorted(
            (r["k"], r["uniqueness"]) for r in result.rows if r["seed"] == seed
        )
        values = [u for _, u in series]
        ok &= all(values[i] <= values[i + 1] for i in range(len(values) - 1))
        details.append(f"seed {seed}: " + " <= ".join(f"{u:.4f}" for u in values))
    _report("shape-sweep monotonicity (K in 8..64, 3 seeds)", ok, "; ".join(details))


def test_dedup_completeness():
    """Extended SIDs are globally unique: uniqueness exactly 1.0."""
    from conftest import clustered_corpus

    rng = np.random.default_rng(3)
    ok = True
    for n, k in ((500, 3), (2000, 4)):
        corpus = clustered_corpus(n_items=n, n_clusters=8, dims=(5,), seed=1)
        pairs = [
            (item_id, SemanticId(tuple(rng.integers(0, k, size=3).tolist())))
            for item_id in corpus.ids
        ]
        index = build_index(pairs, corpus, shape=(k, k, k))
        ok &= extended_uniqueness(index) == 1.0
    _report("dedup completeness (uniqueness exactly 1.0)", ok)


def test_constrained_beam_soundness_and_optimality():
    """No out-of-trie SIDs in 1000 decodes; full width equals enumeration."""
    rng = np.random.default_rng(2)
    vocab = SidVocabulary((6, 6, 6))
    sids = [
        SemanticId((a, b, c))
        for a in range(6)
        for b in range(6)
        for c in range(6)
        if rng.uniform() < 0.5
    ]
    trie = SidTrie.from_sids(sids, levels=3)
    sound = 0
    decodes = 0
    for i in range(1000):
        model = FixedModel(vocab.size, fn=lambda p: rng.normal(size=vocab.size))
        out = beam_search_constrained(model, [SidVocabulary.BEGIN, 3 + i % 6], 4, trie, vocab)
        decodes += 1
        sound += all(sid in trie for sid, _ in out)

    # Optimality at full width over a K^L = 16^3 = 4096 leaf space.
    vocab_big = SidVocabulary((16, 16, 16))
    all_sids = [
        SemanticId((a, b, c)) for a in range(16) for b in range(16) for c in range(16)
    ]
    trie_big = SidTrie.from_sids(all_sids, levels=3)
    table = {}

    def fn(prefix):
        key = tuple(prefix)
        if key not in table:
            table[key] = rng.normal(size=vocab_big.size)
        return table[key]

    model = FixedModel(vocab_big.size, fn=fn)
    beam = beam_search_constrained(
        model, [SidVocabulary.BEGIN], len(all_sids), trie_big, vocab_big
    )
    oracle = _enumerate_leaf_scores(model, [SidVocabulary.BEGIN], trie_big, vocab_big)
    exact_order = [s.codes for s, _ in beam] == [s.codes for s, _ in oracle]
    scores_match = np.allclose(
        [sc for _, sc in beam], [sc for _, sc in oracle], atol=1e-12
    )
    _report(
        "constrained-beam soundness and optimality",
        sound == decodes and exact_order and scores_match,
        f"{sound}/{decodes} sound; 4096-leaf order exact",
    )


def test_metric_oracle():
    """Recall/NDCG match an independent brute-force evaluator to 1e-12."""
    rng = np.random.default_rng(7)
    items = [f"i{j}" for j in range(80)]
    results, truth = {}, {}
    for u in range(100):
        order = rng.permutation(80)
        results[f"u{u}"] = [items[i] for i in order[:25]]
        t_n = int(rng.integers(1, 5))
        truth[f"u{u}"] = [items[int(i)] for i in rng.choice(80, size=t_n, replace=False)]
    table = eval_recall_ndcg(results, truth, [5, 10])
    worst = 0.0
    for k in (5, 10):
        r_bf, n_bf = _brute_force_metrics(results, truth, k)
        worst = max(worst, abs(table.recall[k] - r_bf), abs(table.ndcg[k] - n_bf))
    _report("metric oracle (100 users, diff < 1e-12)", worst < 1e-12, f"worst {worst:.2e}")


_GR_SWEEP_CONF = (
    """
[run]
seed = 0
out_dir = {out}
"""
    + _STANDARD_SYNTH
    + """
pattern_strength = 0.9
lag = 12

[tokenizer]
family = rq_kmeans
levels = 2
codebook_size = 32

[gr]
model = transformer
layers = 2
width = 64
heads = 4
epochs = 3
batch_size = 64
lr = 0.003
beam_width = 5
positions_per_user = 8

[retrieval]
budget = 100
top_k = 5
per_sid = 20

[experiment]
name = gr_history_sweep
seeds = 0,1,2
history_values = 8,32
"""
)


def test_gr_history_length_trend(tmp_path):
    """Recall@5 at max_history 32 >= at 8 for each of 3 seeds, < 30 min."""
    config = parse_config(_GR_SWEEP_CONF.format(out=tmp_path / "grsweep"))
    start = time.perf_counter()
    result = run_experiment(config)
    elapsed = time.perf_counter() - start
    by_key = {(r["max_history"], r["seed"]): r["recall_at_5"] for r in result.rows}
    ok = elapsed < 1800
    details = []
    for seed in (0, 1, 2):
        short, long_ = by_key[(8, seed)], by_key[(32, seed)]
        ok &= long_ >= short
        details.append(f"seed {seed}: R@5 {long_:.4f} >= {short:.4f}")
    _report(
        "GR history-length trend (mh=32 >= mh=8, 3 seeds)",
        ok,
        "; ".join(details) + f"; total {elapsed:.0f}s",
    )


_DEPTH_BREADTH_CONF = (
    """
[run]
seed = 0
out_dir = {out}
"""
    + _STANDARD_SYNTH
    + """
pattern_strength = 0.9
lag = 1

[tokenizer]
family = rq_kmeans
levels = 3
codebook_size = 8

[gr]
model = ngram
max_history = 16
beam_width = 100
positions_per_user = 8

[retrieval]
budget = 1000
top_k = 10
per_sid = 100

[experiment]
name = depth_breadth
seeds = 0,1
"""
)


def test_depth_breadth_harness(tmp_path):
    """Paired depth(10,100)/breadth(100,10) rows; budget and item-uniqueness
    constraints hold on every row."""
    config = parse_config(_DEPTH_BREADTH_CONF.format(out=tmp_path / "db"))
    result = run_experiment(config)
    variants = {r["variant"] for r in result.rows}
    ok = {
        "random_10_per_sid_top_100",
        "random_100_per_sid_top_10",
        "relevance_100_per_sid_top_10",
    } <= variants
    for seed in (0, 1):
        seeded = [r for r in result.rows if r["seed"] == seed]
        ok &= len(seeded) == 3
    ok &= all(r["budget_ok"] and r["items_unique"] for r in result.rows)
    ok &= all(r["max_items"] <= 1000 for r in result.rows)
    depth = [r for r in result.rows if r["variant"] == "random_100_per_sid_top_10"]
    breadth = [r for r in result.rows if r["variant"] == "random_10_per_sid_top_100"]
    relevance = [r for r in result.rows if r["variant"] == "relevance_100_per_sid_top_10"]
    summary = (
        f"set recall: depth {np.mean([r['set_recall'] for r in depth]):.4f} vs "
        f"breadth {np.mean([r['set_recall'] for r in breadth]):.4f}; "
        f"R@10: relevance {np.mean([r['recall_at_10'] for r in relevance]):.4f} vs "
        f"random {np.mean([r['recall_at_10'] for r in depth]):.4f} (reported)"
    )
    _report("depth-vs-breadth harness (paired rows, constraints verified)", ok, summary)


_REPRO_CONF = """
[run]
seed = 4
out_dir = {out}

[synth]
items = 600
clusters = 8
spread = a:0.05,b:0.25
modalities = a:8,b:10
users = 50
seq_min = 12
seq_max = 16
pattern_strength = 1.0
lag = 1

[tokenizer]
family = rq_kmeans
levels = 2
codebook_size = 8

[gr]
model = ngram
max_history = 4
beam_width = 5
positions_per_user = 5

[retrieval]
budget = 50
top_k = 5
per_sid = 10

[experiment]
name = shape_sweep
k_values = 4,8
seeds = 0,1
"""


def test_reproducibility_byte_identical(tmp_path):
    """Re-running an experiment from the same config+seed gives identical CSV."""
    config_a = parse_config(_REPRO_CONF.format(out=tmp_path / "x"))
    config_a.out_dir = tmp_path / "first"
    config_b = parse_config(_REPRO_CONF.format(out=tmp_path / "x"))
    config_b.out_dir = tmp_path / "second"
    a = run_experiment(config_a)
    b = run_experiment(config_b)
    identical = a.csv_path.read_bytes() == b.csv_path.read_bytes()
    _report("reproducibility (byte-identical CSV reports)", identical)

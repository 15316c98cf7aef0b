"""Experiment drivers: the four built-in studies and their report files.

Each experiment owns its output directory (lockfile), generates or reloads
the synthetic corpus under <out>/data, runs its variants seeded and in a
fixed order, and persists completed rows after every variant so a partial
failure keeps its progress. Re-running with the same config resumes (rows
already present are kept) and a finished run is byte-reproducible.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig, synth_spec_from
from .data import Corpus, ingest_embeddings, read_user_logs
from .errors import ConfigError, DataError
from .genret import (
    GrConfig,
    GrDataset,
    GrExample,
    GrTransformer,
    NgramModel,
    SidTrie,
    SidVocabulary,
    TrainGrConfig,
    UserSequence,
    beam_search_constrained_batch,
    eval_recall_ndcg,
    history_tokens,
    resolve_candidates,
    train_gr,
    user_sequences_from_logs,
)
from .report import (
    plot_ablation,
    plot_depth_breadth,
    plot_history_sweep,
    plot_shape_sweep,
    read_csv,
    relative_view,
    text_table,
    write_csv,
)
from .sid_index import (
    BudgetMode,
    SidIndex,
    breadth_mode,
    build_index,
    depth_mode,
    uniqueness,
    utilization_metrics,
)
from .synth import gen_synthetic
from .tokenizer import TrainConfig, build_rqvae, rq_kmeans_fit, tokenize_corpus, train

EXPERIMENTS = ("shape_sweep", "ablation", "depth_breadth", "gr_history_sweep")


@contextmanager
def output_lock(out_dir: Path):
    """Exclusive ownership of an experiment output directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory {out_dir} is locked by another experiment "
            f"(remove {lock} if stale)"
        ) from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def ensure_synthetic_data(config: PipelineConfig) -> tuple[Corpus, dict]:
    """Generate the experiment corpus under <out>/data, or reload it."""
    data_dir = config.out_dir / "data"
    meta = data_dir / "metadata.tsv"
    spec = synth_spec_from(config)
    if meta.exists():
        paths = {name: data_dir / f"{name}.semb" for name in spec.modalities}
        corpus = ingest_embeddings(paths, meta)
        logs = read_user_logs(data_dir / "logs.tsv")
        return corpus, logs
    data = gen_synthetic(spec, data_dir)
    return data.corpus, data.logs


@dataclass
class ExperimentResult:
    name: str
    csv_path: Path
    figure_path: Path
    text_path: Path
    rows: list[dict]


_CONVERTERS = {
    "k": int,
    "seed": int,
    "max_history": int,
    "levels": int,
    "uniqueness": float,
    "uniqueness_improvement_pct": str,
    "treatment": str,
    "variant": str,
    "recall_at_5": float,
    "recall_at_10": float,
    "ndcg_at_5": float,
    "ndcg_at_10": float,
    "set_recall": float,
    "recon": float,
    "train_loss": float,
    "holdout_loss": float,
    "budget_ok": lambda s: s == "true",
    "items_unique": lambda s: s == "true",
    "max_items": int,
    "status": str,
}


def _typed(columns: list[str], raw: list[list[str]]) -> list[dict]:
    rows = []
    for cells in raw:
        row = {}
        for col, cell in zip(columns, cells):
            conv = _CONVERTERS.get(col, float if col[-1].isdigit() else str)
            row[col] = conv(cell)
        rows.append(row)
    return rows


def _load_resume(path: Path, columns: list[str], config: PipelineConfig) -> list[dict]:
    if not path.exists():
        return []
    meta, got_cols, raw = read_csv(path)
    if meta.get("config_hash") != config.config_hash:
        raise ConfigError(
            f"{path} was produced by config_hash={meta.get('config_hash')}, "
            f"current config is {config.config_hash}; refusing to resume"
        )
    if got_cols != columns:
        raise ConfigError(f"{path} has columns {got_cols}, expected {columns}")
    return _typed(columns, raw)


def _persist(path: Path, columns: list[str], rows: list[dict], config: PipelineConfig):
    write_csv(
        path, columns, [[r[c] for c in columns] for r in rows],
        config.config_hash, config.seed,
    )


def _tokenizer_modalities(config: PipelineConfig, corpus: Corpus) -> list[str]:
    return config.tokenizer.modalities or corpus.modalities


def _fit_tokenizer(
    config: PipelineConfig,
    corpus: Corpus,
    seed: int,
    k: int | None = None,
    modalities: list[str] | None = None,
    ste: bool | None = None,
):
    """Train/fit the configured tokenizer family and tokenize the corpus."""
    tk = config.tokenizer
    sizes = [k] * tk.levels if k is not None else tk.sizes()
    mods = modalities or _tokenizer_modalities(config, corpus)
    if tk.family == "rq_kmeans":
        sub = _restrict(corpus, mods)
        model = rq_kmeans_fit(sub, tk.levels, sizes[0], seed)
        tokenized = tokenize_corpus(model, sub)
        return model, tokenized
    if tk.family != "rqvae":
        raise ConfigError(f"unknown tokenizer family {tk.family!r}")
    dims = {m: corpus.modality_dim(m) for m in mods}
    model = build_rqvae(
        modality_dims=dims,
        hidden_dim=tk.hidden_dim,
        levels=tk.levels,
        codebook_size=sizes,
        seed=seed,
        enc_hidden=tuple(tk.enc_hidden),
        activation=tk.activation,
        assignment_rule=tk.assignment_rule,
        ste_enabled=tk.ste if ste is None else ste,
        codebook_init_scale=tk.codebook_init_scale,
    )
    train(
        model,
        corpus,
        TrainConfig(
            epochs=tk.epochs,
            batch_size=tk.batch_size,
            lr=tk.lr,
            seed=seed,
            codebook_init=tk.codebook_init,
        ),
    )
    tokenized = tokenize_corpus(model, corpus)
    return model, tokenized


def _restrict(corpus: Corpus, mods: list[str]) -> Corpus:
    from .data import EmbeddingRecord

    return Corpus(
        {
            rid: EmbeddingRecord(rid, {m: r.vectors[m] for m in mods}, r.relevance, r.freshness)
            for rid, r in corpus.records.items()
        }
    )


def _gr_dataset(
    users: list[UserSequence],
    sids: dict,
    vocab: SidVocabulary,
    max_history: int,
    positions_per_user: int,
) -> GrDataset:
    """Training sequences capped to each user's most recent positions."""
    examples, dropped = [], 0
    for u in users:
        hist = u.history
        start = max(1, len(hist) - positions_per_user)
        for t in range(start, len(hist)):
            target = sids.get(hist[t])
            prompt = history_tokens(vocab, sids, hist[max(0, t - max_history) : t], max_history)
            if target is None or prompt is None:
                dropped += 1
                continue
            examples.append(
                GrExample(
                    np.array(prompt + vocab.encode_sid(target), dtype=np.int64),
                    prompt_len=len(prompt),
                )
            )
    return GrDataset(examples, vocab, vocab.levels, dropped)


def _fit_gr(config: PipelineConfig, dataset: GrDataset, vocab: SidVocabulary, max_history: int, seed: int):
    g = config.gr
    if g.model == "ngram":
        model = NgramModel(vocab.size, order=g.ngram_order, max_history=max_history)
        model.fit(dataset)
        return model, None
    if g.model != "transformer":
        raise ConfigError(f"unknown gr model {g.model!r}")
    gr_config = GrConfig(
        vocab_size=vocab.size,
        max_seq=1 + max_history * vocab.levels + vocab.levels,
        n_layers=g.layers,
        width=g.width,
        n_heads=g.heads,
        max_history=max_history,
        seed=seed,
    )
    model = GrTransformer(gr_config)
    result = train_gr(
        model,
        dataset,
        TrainGrConfig(
            epochs=g.epochs,
            batch_size=g.batch_size,
            lr=g.lr,
            seed=seed,
            holdout_fraction=g.holdout_fraction,
        ),
    )
    return model, result


def _eval_gr(
    model,
    users: list[UserSequence],
    sids: dict,
    vocab: SidVocabulary,
    trie: SidTrie,
    index: SidIndex,
    mode: BudgetMode,
    budget: int,
    beam_width: int,
    strategy: str,
    seed: int,
    max_history: int,
):
    """Batched retrieval for every user plus metric evaluation."""
    usable = [u for u in users if history_tokens(vocab, sids, u.history[-max_history:], max_history)]
    prompts = [history_tokens(vocab, sids, u.history[-max_history:], max_history) for u in usable]
    candidates = beam_search_constrained_batch(model, prompts, beam_width, trie, vocab)
    results, truth = {}, {}
    budget_ok = True
    items_unique = True
    max_items = 0
    set_recall = 0.0
    for u, cand in zip(usable, candidates):
        got = resolve_candidates(index, cand, mode, budget, strategy=strategy, seed=seed)
        results[u.user_id] = got.item_ids
        truth[u.user_id] = u.targets
        budget_ok &= len(got.item_ids) <= budget
        items_unique &= len(set(got.item_ids)) == len(got.item_ids)
        max_items = max(max_items, len(got.item_ids))
        hit = set(got.item_ids) & set(u.targets)
        set_recall += len(hit) / len(u.targets)
    set_recall /= max(len(usable), 1)
    table = eval_recall_ndcg(results, truth, [5, 10])
    return table, budget_ok, items_unique, max_items, set_recall


def run_experiment(config: PipelineConfig, name: str | None = None) -> ExperimentResult:
    name = name or config.experiment.name
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    with output_lock(config.out_dir):
        corpus, logs = ensure_synthetic_data(config)
        if name == "shape_sweep":
            return _run_shape_sweep(config, corpus, logs)
        if name == "ablation":
            return _run_ablation(config, corpus)
        if name == "depth_breadth":
            return _run_depth_breadth(config, corpus, logs)
        return _run_gr_history_sweep(config, corpus, logs)


def _shape_columns(levels: int) -> list[str]:
    cols = ["k", "seed", "uniqueness"]
    cols += [f"utilization_l{l}" for l in range(levels)]
    cols += [f"perplexity_l{l}" for l in range(levels)]
    cols += ["recall_at_10", "status"]
    return cols


def _run_shape_sweep(config: PipelineConfig, corpus: Corpus, logs: dict) -> ExperimentResult:
    levels = config.tokenizer.levels
    columns = _shape_columns(levels)
    csv_path = config.out_dir / "shape_sweep.csv"
    rows = _load_resume(csv_path, columns, config)
    done = {(r["k"], r["seed"]) for r in rows}
    users = user_sequences_from_logs(logs, n_targets=config.synth.targets)
    for k in config.experiment.k_values:
        for seed in config.experiment.seeds:
            if (k, seed) in done:
                continue
            row = {c: "" for c in columns}
            row.update({"k": k, "seed": seed, "status": "ok"})
            try:
                model, tokenized = _fit_tokenizer(config, corpus, seed, k=k)
                index = build_index(tokenized, corpus, shape=model.shape)
                util = utilization_metrics(tokenized, model.shape)
                row["uniqueness"] = uniqueness(index)
                for l in range(levels):
                    row[f"utilization_l{l}"] = util.used_fraction[l]
                    row[f"perplexity_l{l}"] = util.perplexity[l]
                vocab = SidVocabulary(model.shape)
                trie = SidTrie.from_sids(index.postings.keys(), levels)
                dataset = _gr_dataset(
                    users, tokenized.sids, vocab, config.gr.max_history,
                    config.gr.positions_per_user,
                )
                gr_model, _ = _fit_gr(config, dataset, vocab, config.gr.max_history, seed)
                mode = _mode_from(config)
                table, _, _, _, _ = _eval_gr(
                    gr_model, users, tokenized.sids, vocab, trie, index,
                    mode, config.retrieval.budget, config.gr.beam_width,
                    config.retrieval.strategy, seed, config.gr.max_history,
                )
                row["recall_at_10"] = table.recall[10]
            except (DataError, ConfigError):
                raise
            except Exception:
                row["status"] = "failed"
                for c in columns:
                    if row[c] == "":
                        row[c] = float("nan") if c not in ("status",) else row[c]
            rows.append(row)
            _persist(csv_path, columns, rows, config)
    fig_path = config.out_dir / "shape_sweep.png"
    plot_shape_sweep([r for r in rows if r["status"] == "ok"], fig_path)
    text_path = config.out_dir / "shape_sweep.txt"
    text_path.write_text(text_table(columns, [[r[c] for c in columns] for r in rows]))
    return ExperimentResult("shape_sweep", csv_path, fig_path, text_path, rows)


def _mode_from(config: PipelineConfig) -> BudgetMode:
    if config.retrieval.mode == "depth":
        return depth_mode(config.retrieval.top_k, config.retrieval.per_sid)
    return breadth_mode(config.retrieval.top_k, config.retrieval.per_sid)


def _ablation_columns() -> list[str]:
    return [
        "treatment", "seed", "uniqueness", "uniqueness_improvement_pct",
        "utilization_l0", "perplexity_l0", "status",
    ]


def _run_ablation(config: PipelineConfig, corpus: Corpus) -> ExperimentResult:
    if config.tokenizer.family != "rqvae":
        raise ConfigError("the ablation experiment wants tokenizer family rqvae")
    ladder = _tokenizer_modalities(config, corpus)
    treatments: list[tuple[str, list[str], bool]] = [
        ("baseline", ladder[:1], False),
        ("+ ste", ladder[:1], True),
    ]
    for i in range(1, len(ladder)):
        treatments.append((f"+ {ladder[i]}", ladder[: i + 1], True))
    columns = _ablation_columns()
    csv_path = config.out_dir / "ablation.csv"
    rows = _load_resume(csv_path, columns, config)
    done = {(r["treatment"], r["seed"]) for r in rows}
    for seed in config.experiment.seeds:
        base_uniq: float | None = None
        for r in rows:
            if r["seed"] == seed and r["treatment"] == "baseline":
                base_uniq = r["uniqueness"]
        for treatment, mods, ste in treatments:
            if (treatment, seed) in done:
                continue
            model, tokenized = _fit_tokenizer(config, corpus, seed, modalities=mods, ste=ste)
            index = build_index(tokenized, corpus, shape=model.shape)
            util = utilization_metrics(tokenized, model.shape)
            uniq = uniqueness(index)
            if treatment == "baseline":
                base_uniq = uniq
                improvement = "Baseline"
            else:
                improvement = (
                    f"{100.0 * (uniq - base_uniq) / base_uniq:+.1f}%"
                    if base_uniq
                    else "n/a"
                )
            rows.append(
                {
                    "treatment": treatment,
                    "seed": seed,
                    "uniqueness": uniq,
                    "uniqueness_improvement_pct": improvement,
                    "utilization_l0": util.used_fraction[0],
                    "perplexity_l0": util.perplexity[0],
                    "status": "ok",
                }
            )
            _persist(csv_path, columns, rows, config)
    fig_path = config.out_dir / "ablation.png"
    plot_ablation(rows, fig_path)
    text_path = config.out_dir / "ablation.txt"
    text_path.write_text(text_table(columns, [[r[c] for c in columns] for r in rows]))
    return ExperimentResult("ablation", csv_path, fig_path, text_path, rows)


_DB_VARIANTS = [
    ("random_10_per_sid_top_100", "breadth", 100, 10, "random"),
    ("random_100_per_sid_top_10", "depth", 10, 100, "random"),
    ("relevance_100_per_sid_top_10", "depth", 10, 100, "relevance_guided"),
]


def _db_columns() -> list[str]:
    return [
        "variant", "seed", "recall_at_5", "recall_at_10", "ndcg_at_5", "ndcg_at_10",
        "set_recall", "max_items", "budget_ok", "items_unique", "status",
    ]


def _run_depth_breadth(config: PipelineConfig, corpus: Corpus, logs: dict) -> ExperimentResult:
    columns = _db_columns()
    csv_path = config.out_dir / "depth_breadth.csv"
    rows = _load_resume(csv_path, columns, config)
    done = {(r["variant"], r["seed"]) for r in rows}
    users = user_sequences_from_logs(logs, n_targets=config.synth.targets)
    budget = config.retrieval.budget
    for seed in config.experiment.seeds:
        if all((v[0], seed) in done for v in _DB_VARIANTS):
            continue
        model, tokenized = _fit_tokenizer(config, corpus, seed)
        index = build_index(tokenized, corpus, shape=model.shape)
        vocab = SidVocabulary(model.shape)
        trie = SidTrie.from_sids(index.postings.keys(), config.tokenizer.levels)
        dataset = _gr_dataset(
            users, tokenized.sids, vocab, config.gr.max_history,
            config.gr.positions_per_user,
        )
        gr_model, _ = _fit_gr(config, dataset, vocab, config.gr.max_history, seed)
        for variant, kind, top_k, per_sid, strategy in _DB_VARIANTS:
            if (variant, seed) in done:
                continue
            mode = depth_mode(top_k, per_sid) if kind == "depth" else breadth_mode(top_k, per_sid)
            table, budget_ok, items_unique, max_items, set_recall = _eval_gr(
                gr_model, users, tokenized.sids, vocab, trie, index,
                mode, budget, max(top_k, config.gr.beam_width), strategy, seed,
                config.gr.max_history,
            )
            rows.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "recall_at_5": table.recall[5],
                    "recall_at_10": table.recall[10],
                    "ndcg_at_5": table.ndcg[5],
                    "ndcg_at_10": table.ndcg[10],
                    "set_recall": set_recall,
                    "max_items": max_items,
                    "budget_ok": budget_ok,
                    "items_unique": items_unique,
                    "status": "ok",
                }
            )
            _persist(csv_path, columns, rows, config)
    fig_path = config.out_dir / "depth_breadth.png"
    plot_depth_breadth(rows, fig_path)
    text_path = config.out_dir / "depth_breadth.txt"
    text_path.write_text(text_table(columns, [[r[c] for c in columns] for r in rows]))
    return ExperimentResult("depth_breadth", csv_path, fig_path, text_path, rows)


def _history_columns() -> list[str]:
    return [
        "max_history", "seed", "recall_at_5", "recall_at_10", "ndcg_at_5",
        "ndcg_at_10", "train_loss", "holdout_loss", "status",
    ]


def _run_gr_history_sweep(config: PipelineConfig, corpus: Corpus, logs: dict) -> ExperimentResult:
    columns = _history_columns()
    csv_path = config.out_dir / "gr_history_sweep.csv"
    rows = _load_resume(csv_path, columns, config)
    done = {(r["max_history"], r["seed"]) for r in rows}
    users = user_sequences_from_logs(logs, n_targets=config.synth.targets)
    seed0 = config.experiment.seeds[0]
    model, tokenized = _fit_tokenizer(config, corpus, seed0)
    index = build_index(tokenized, corpus, shape=model.shape)
    vocab = SidVocabulary(model.shape)
    trie = SidTrie.from_sids(index.postings.keys(), config.tokenizer.levels)
    mode = _mode_from(config)
    for seed in config.experiment.seeds:
        for max_history in config.experiment.history_values:
            if (max_history, seed) in done:
                continue
            dataset = _gr_dataset(
                users, tokenized.sids, vocab, max_history, config.gr.positions_per_user
            )
            gr_model, train_result = _fit_gr(config, dataset, vocab, max_history, seed)
            table, _, _, _, _ = _eval_gr(
                gr_model, users, tokenized.sids, vocab, trie, index,
                mode, config.retrieval.budget, config.gr.beam_width,
                config.retrieval.strategy, seed, max_history,
            )
            last = train_result.epochs[-1] if train_result and train_result.epochs else None
            rows.append(
                {
                    "max_history": max_history,
                    "seed": seed,
                    "recall_at_5": table.recall[5],
                    "recall_at_10": table.recall[10],
                    "ndcg_at_5": table.ndcg[5],
                    "ndcg_at_10": table.ndcg[10],
                    "train_loss": last.train_loss if last else float("nan"),
                    "holdout_loss": last.holdout_loss if last else float("nan"),
                    "status": "ok",
                }
            )
            _persist(csv_path, columns, rows, config)
    fig_path = config.out_dir / "gr_history_sweep.png"
    plot_history_sweep(rows, fig_path)
    # Relative presentation against the shortest history baseline.
    baseline = min(config.experiment.history_values)
    rel_cols, rel_rows = relative_view(
        rows, "max_history",
        ["recall_at_5", "recall_at_10", "ndcg_at_5", "ndcg_at_10"],
        baseline,
    )
    text_path = config.out_dir / "gr_history_sweep.txt"
    text_path.write_text(
        text_table(columns, [[r[c] for c in columns] for r in rows])
        + "\nRelative to max_history="
        + str(baseline)
        + ":\n"
        + text_table(rel_cols, rel_rows)
    )
    return ExperimentResult("gr_history_sweep", csv_path, fig_path, text_path, rows)

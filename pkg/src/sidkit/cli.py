"""Command-line pipeline: ingest, synth, train, tokenize, index, retrieve,
experiments, reports.

Every command reads one config file; --seed and --out override its [run]
section. Exit codes: 0 success, 1 usage/config error, 2 data error, 3
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import PipelineConfig, load_config, synth_spec_from
from .data import Corpus, ingest_embeddings, read_user_logs
from .errors import ConfigError, DataError, NumericalError, SidkitError
from .experiments import EXPERIMENTS, ensure_synthetic_data, run_experiment
from .genret import (
    GrConfig,
    GrTransformer,
    SidTrie,
    SidVocabulary,
    TrainGrConfig,
    eval_recall_ndcg,
    retrieve,
    train_gr,
    user_sequences_from_logs,
)
from .report import (
    plot_ablation,
    plot_depth_breadth,
    plot_history_sweep,
    plot_shape_sweep,
    read_csv,
    text_table,
    write_csv,
)
from .sid_index import (
    breadth_mode,
    build_index,
    depth_mode,
    load_index,
    save_index,
    uniqueness,
    utilization_metrics,
)
from .synth import gen_synthetic
from .tokenizer import (
    SemanticId,
    TrainConfig,
    build_rqvae,
    rq_kmeans_fit,
    tokenize_corpus,
    train,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="sidkit", description=__doc__)
    parser.add_argument("--config", required=True, help="pipeline config file")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--out", help="override [run] out_dir")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", help="validate and summarize embedding inputs")
    sub.add_parser("synth", help="generate the synthetic corpus and logs")
    sub.add_parser("train-tokenizer", help="train/fit the configured tokenizer")
    sub.add_parser("tokenize", help="assign a SID to every corpus item")
    sub.add_parser("build-index", help="build and persist the SID index")
    sub.add_parser("metrics", help="emit uniqueness/utilization metrics CSV")
    sub.add_parser("train-gr", help="train the generative-retrieval model")
    p_ret = sub.add_parser("retrieve", help="run retrieval for users")
    p_ret.add_argument("--user", help="single user id (default: all eval users)")
    p_exp = sub.add_parser("experiment", help="run a named experiment")
    p_exp.add_argument(
        "--name", choices=EXPERIMENTS, help="override [experiment] name"
    )
    sub.add_parser("report", help="re-render figures and tables from CSVs")
    return parser


def _config_from(args) -> PipelineConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out_dir = Path(args.out)
    return config


def _load_corpus(config: PipelineConfig) -> Corpus:
    if config.modality_paths:
        if config.metadata_path is None:
            raise ConfigError("modality files given but no [data] metadata path")
        return ingest_embeddings(config.modality_paths, config.metadata_path)
    data_dir = config.out_dir / "data"
    meta = data_dir / "metadata.tsv"
    if not meta.exists():
        raise ConfigError(
            f"no corpus available: configure [modality ...] sections or run "
            f"`sidkit synth` first (looked in {data_dir})"
        )
    spec = synth_spec_from(config)
    paths = {name: data_dir / f"{name}.semb" for name in spec.modalities}
    return ingest_embeddings(paths, meta)


def _load_logs(config: PipelineConfig):
    if config.logs_path is not None:
        return read_user_logs(config.logs_path)
    path = config.out_dir / "data" / "logs.tsv"
    if not path.exists():
        raise ConfigError(f"no user logs: set [data] logs or run `sidkit synth`")
    return read_user_logs(path)


def _cmd_ingest(config: PipelineConfig) -> None:
    corpus = _load_corpus(config)
    dims = {m: corpus.modality_dim(m) for m in corpus.modalities}
    print(f"corpus ok: {len(corpus)} items, modalities {dims}")


def _cmd_synth(config: PipelineConfig) -> None:
    data_dir = config.out_dir / "data"
    data = gen_synthetic(synth_spec_from(config), data_dir)
    print(
        f"wrote {len(data.corpus)} items x {len(data.corpus.modalities)} modalities "
        f"and {len(data.logs)} user logs to {data_dir}"
    )


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"missing artifact {path}; run `sidkit {hint}` first")
    return path


def _tokenizer_path(config: PipelineConfig) -> Path:
    return config.out_dir / "tokenizer.sidf"


def _cmd_train_tokenizer(config: PipelineConfig) -> None:
    corpus = _load_corpus(config)
    tk = config.tokenizer
    mods = tk.modalities or corpus.modalities
    config.out_dir.mkdir(parents=True, exist_ok=True)
    if tk.family == "rq_kmeans":
        sub = Corpus({r.item_id: r for r in corpus if all(m in r.vectors for m in mods)})
        model = rq_kmeans_fit(sub, tk.levels, tk.sizes()[0], config.seed)
        checkpoint.save_model(model, _tokenizer_path(config))
        print(f"fitted rq_kmeans shape {model.shape}; saved {_tokenizer_path(config)}")
        return
    dims = {m: corpus.modality_dim(m) for m in mods}
    model = build_rqvae(
        modality_dims=dims,
        hidden_dim=tk.hidden_dim,
        levels=tk.levels,
        codebook_size=tk.sizes(),
        seed=config.seed,
        enc_hidden=tuple(tk.enc_hidden),
        activation=tk.activation,
        assignment_rule=tk.assignment_rule,
        ste_enabled=tk.ste,
        codebook_init_scale=tk.codebook_init_scale,
    )
    result = train(
        model,
        corpus,
        TrainConfig(
            epochs=tk.epochs, batch_size=tk.batch_size, lr=tk.lr,
            seed=config.seed, codebook_init=tk.codebook_init,
        ),
    )
    checkpoint.save_model(model, _tokenizer_path(config))
    columns = ["epoch", "recon", "commit", "probe_uniqueness"] + [
        f"utilization_l{l}" for l in range(tk.levels)
    ]
    rows = [
        [e.epoch, e.recon, e.commit, e.probe_uniqueness, *e.utilization]
        for e in result.epochs
    ]
    write_csv(config.out_dir / "training_log.csv", columns, rows, config.config_hash, config.seed)
    status = "aborted (divergence), best checkpoint kept" if result.aborted else "done"
    print(f"training {status}; saved {_tokenizer_path(config)}")


def _cmd_tokenize(config: PipelineConfig) -> None:
    corpus = _load_corpus(config)
    model = checkpoint.load_model(_require(_tokenizer_path(config), "train-tokenizer"))
    tokenized = tokenize_corpus(model, corpus)
    path = config.out_dir / "sids.tsv"
    with open(path, "w") as f:
        for item_id, sid in tokenized:
            f.write(f"{item_id}\t{' '.join(str(c) for c in sid.codes)}\n")
    print(
        f"tokenized {len(tokenized)} items ({len(tokenized.rejects)} rejected); wrote {path}"
    )


def _read_sids(path: Path) -> list[tuple[str, SemanticId]]:
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: want 2 fields, got {len(parts)}")
            pairs.append((parts[0], SemanticId(tuple(int(c) for c in parts[1].split()))))
    return pairs


def _cmd_build_index(config: PipelineConfig) -> None:
    corpus = _load_corpus(config)
    model = checkpoint.load_model(_require(_tokenizer_path(config), "train-tokenizer"))
    pairs = _read_sids(_require(config.out_dir / "sids.tsv", "tokenize"))
    index = build_index(pairs, corpus, shape=model.shape)
    path = config.out_dir / "index.tsv"
    save_index(index, path)
    print(
        f"indexed {index.total_items} items into {index.distinct_sids} SIDs "
        f"(uniqueness {uniqueness(index):.4f}); wrote {path}"
    )


def _cmd_metrics(config: PipelineConfig) -> None:
    model = checkpoint.load_model(_require(_tokenizer_path(config), "train-tokenizer"))
    index = load_index(_require(config.out_dir / "index.tsv", "build-index"), shape=model.shape)
    pairs = []
    for sid, plist in index.postings.items():
        pairs.extend((item.item_id, sid) for item in plist.items)
    util = utilization_metrics(pairs, index.shape)
    shape_str = "x".join(str(k) for k in index.shape)
    columns = (
        ["shape", "uniqueness"]
        + [f"utilization_l{l}" for l in range(len(index.shape))]
        + [f"perplexity_l{l}" for l in range(len(index.shape))]
    )
    rows = [[shape_str, uniqueness(index), *util.used_fraction, *util.perplexity]]
    path = config.out_dir / "metrics.csv"
    write_csv(path, columns, rows, config.config_hash, config.seed)
    print(text_table(columns, rows), end="")
    print(f"wrote {path}")


def _gr_path(config: PipelineConfig) -> Path:
    return config.out_dir / "gr_model.npz"


def _cmd_train_gr(config: PipelineConfig) -> None:
    from .experiments import _gr_dataset  # shared sequence-building logic

    if config.gr.model != "transformer":
        raise ConfigError("train-gr checkpoints the transformer model; set [gr] model = transformer")
    corpus = _load_corpus(config)
    model_tok = checkpoint.load_model(_require(_tokenizer_path(config), "train-tokenizer"))
    pairs = _read_sids(_require(config.out_dir / "sids.tsv", "tokenize"))
    sids = dict(pairs)
    logs = _load_logs(config)
    users = user_sequences_from_logs(logs, n_targets=config.synth.targets)
    vocab = SidVocabulary(model_tok.shape)
    dataset = _gr_dataset(
        users, sids, vocab, config.gr.max_history, config.gr.positions_per_user
    )
    gr_config = GrConfig(
        vocab_size=vocab.size,
        max_seq=1 + config.gr.max_history * vocab.levels + vocab.levels,
        n_layers=config.gr.layers,
        width=config.gr.width,
        n_heads=config.gr.heads,
        max_history=config.gr.max_history,
        seed=config.seed,
    )
    model = GrTransformer(gr_config)
    result = train_gr(
        model,
        dataset,
        TrainGrConfig(
            epochs=config.gr.epochs, batch_size=config.gr.batch_size,
            lr=config.gr.lr, seed=config.seed,
            holdout_fraction=config.gr.holdout_fraction,
        ),
    )
    meta = json.dumps(
        {
            "vocab_size": gr_config.vocab_size,
            "max_seq": gr_config.max_seq,
            "n_layers": gr_config.n_layers,
            "width": gr_config.width,
            "n_heads": gr_config.n_heads,
            "max_history": gr_config.max_history,
            "seed": gr_config.seed,
            "shape": list(model_tok.shape),
        }
    )
    np.savez(_gr_path(config), __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **model.params)
    losses = ", ".join(f"{e.holdout_loss:.4f}" for e in result.epochs)
    status = "aborted (divergence)" if result.aborted else "done"
    print(f"gr training {status} ({len(dataset)} examples, dropped {dataset.dropped}); "
          f"holdout loss per epoch: {losses}; saved {_gr_path(config)}")


def _load_gr(config: PipelineConfig) -> tuple[GrTransformer, tuple[int, ...]]:
    with np.load(_require(_gr_path(config), "train-gr")) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode())
        model = GrTransformer(
            GrConfig(
                vocab_size=meta["vocab_size"], max_seq=meta["max_seq"],
                n_layers=meta["n_layers"], width=meta["width"],
                n_heads=meta["n_heads"], max_history=meta["max_history"],
                seed=meta["seed"],
            )
        )
        for k in model.params:
            model.params[k][...] = archive[k]
    return model, tuple(meta["shape"])


def _cmd_retrieve(config: PipelineConfig, user: str | None) -> None:
    gr_model, shape = _load_gr(config)
    index = load_index(_require(config.out_dir / "index.tsv", "build-index"), shape=shape)
    pairs = []
    for sid, plist in index.postings.items():
        pairs.extend((item.item_id, sid) for item in plist.items)
    sids = dict(pairs)
    vocab = SidVocabulary(shape)
    trie = SidTrie.from_sids(index.postings.keys(), len(shape))
    logs = _load_logs(config)
    users = user_sequences_from_logs(logs, n_targets=config.synth.targets)
    if user is not None:
        users = [u for u in users if u.user_id == user]
        if not users:
            raise DataError(f"user {user!r} not found in logs")
    mode = (
        depth_mode(config.retrieval.top_k, config.retrieval.per_sid)
        if config.retrieval.mode == "depth"
        else breadth_mode(config.retrieval.top_k, config.retrieval.per_sid)
    )
    out_path = config.out_dir / "retrieval.tsv"
    results, truth = {}, {}
    with open(out_path, "w") as f:
        for u in users:
            got = retrieve(
                gr_model, index, trie, vocab, u.history, sids, mode,
                config.retrieval.budget,
                beam_width=max(config.gr.beam_width, mode.top_k),
                strategy=config.retrieval.strategy, seed=config.seed,
                spillover=config.retrieval.spillover,
            )
            results[u.user_id] = got.item_ids
            truth[u.user_id] = u.targets
            for rank, item in enumerate(got.item_ids):
                f.write(f"{u.user_id}\t{rank}\t{item}\n")
    print(f"wrote rankings for {len(users)} users to {out_path}")
    if all(truth.values()):
        table = eval_recall_ndcg(results, truth, [5, 10])
        columns = ["variant", "R@5", "R@10", "N@5", "N@10"]
        rows = [[
            f"{config.retrieval.mode}_{config.retrieval.strategy}",
            table.recall[5], table.recall[10], table.ndcg[5], table.ndcg[10],
        ]]
        write_csv(config.out_dir / "retrieval_metrics.csv", columns, rows,
                  config.config_hash, config.seed)
        print(text_table(columns, rows), end="")


def _cmd_report(config: PipelineConfig) -> None:
    plotters = {
        "shape_sweep": plot_shape_sweep,
        "ablation": plot_ablation,
        "depth_breadth": plot_depth_breadth,
        "gr_history_sweep": plot_history_sweep,
    }
    converters = {"k": int, "seed": int, "max_history": int}
    found = False
    summary = []
    for name, plotter in plotters.items():
        path = config.out_dir / f"{name}.csv"
        if not path.exists():
            continue
        found = True
        meta, columns, raw = read_csv(path)
        rows = []
        for cells in raw:
            row = {}
            for col, cell in zip(columns, cells):
                conv = converters.get(col)
                if conv is None:
                    try:
                        row[col] = float(cell)
                    except ValueError:
                        row[col] = cell
                else:
                    row[col] = conv(cell)
            rows.append(row)
        ok_rows = [r for r in rows if r.get("status", "ok") == "ok"]
        plotter(ok_rows, config.out_dir / f"{name}.png")
        summary.append(f"== {name} (config_hash={meta.get('config_hash')}) ==")
        summary.append(text_table(columns, [[r[c] for c in columns] for r in rows]))
    if not found:
        raise DataError(f"no experiment CSVs found in {config.out_dir}")
    report_path = config.out_dir / "report.txt"
    report_path.write_text("\n".join(summary))
    print("\n".join(summary))
    print(f"wrote {report_path} and refreshed figures")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _config_from(args)
        if args.command == "ingest":
            _cmd_ingest(config)
        elif args.command == "synth":
            _cmd_synth(config)
        elif args.command == "train-tokenizer":
            _cmd_train_tokenizer(config)
        elif args.command == "tokenize":
            _cmd_tokenize(config)
        elif args.command == "build-index":
            _cmd_build_index(config)
        elif args.command == "metrics":
            _cmd_metrics(config)
        elif args.command == "train-gr":
            _cmd_train_gr(config)
        elif args.command == "retrieve":
            _cmd_retrieve(config, args.user)
        elif args.command == "experiment":
            result = run_experiment(config, args.name or None)
            print(f"experiment {result.name}: wrote {result.csv_path}, "
                  f"{result.figure_path}, {result.text_path}")
        elif args.command == "report":
            _cmd_report(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SidkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

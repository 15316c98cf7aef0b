import numpy as np
import pytest

from sidkit.data import Corpus, EmbeddingRecord
from sidkit.fusion import FusionConfig, ModalitySpec
from sidkit.nn import identity_mlp, mlp_init
from sidkit.tokenizer import Codebook, TokenizerModel, build_rqvae


def tiny_rqvae(
    seed=0,
    n_modalities=1,
    ste_enabled=True,
    rule="cosine",
    levels=2,
    k=4,
    hidden=3,
    activation="tanh",
):
    """Small random RQ-VAE for gradient and oracle tests."""
    dims = {f"m{i}": 5 + i for i in range(n_modalities)}
    return build_rqvae(
        modality_dims=dims,
        hidden_dim=hidden,
        levels=levels,
        codebook_size=k,
        seed=seed,
        enc_hidden=(6,),
        activation=activation,
        assignment_rule=rule,
        ste_enabled=ste_enabled,
    )


def random_inputs(model, n_items, seed=0):
    rng = np.random.default_rng(seed)
    return {
        spec.name: rng.normal(size=(n_items, spec.dim))
        for spec in model.fusion.modalities
    }


def identity_model(codebooks, rule="l2", ste_enabled=False, beta=0.25):
    """n == d model with identity encoder/decoder; codebooks given directly."""
    dim = codebooks[0].dim
    spec = ModalitySpec("x", dim, identity_mlp(dim), identity_mlp(dim))
    return TokenizerModel(
        fusion=FusionConfig([spec]),
        codebooks=codebooks,
        assignment_rule=rule,
        ste_enabled=ste_enabled,
        commitment_beta=beta,
    )


def clustered_corpus(
    n_items=400,
    n_clusters=8,
    dims=(6,),
    noise=0.15,
    seed=0,
    modality_names=None,
):
    """Gaussian-blob corpus with shared cluster identity across modalities."""
    rng = np.random.default_rng(seed)
    names = modality_names or [f"m{i}" for i in range(len(dims))]
    centers = {name: rng.normal(size=(n_clusters, d)) for name, d in zip(names, dims)}
    records = {}
    for i in range(n_items):
        cluster = i % n_clusters
        item_id = f"item_{i:05d}"
        vectors = {
            name: centers[name][cluster] + noise * rng.normal(size=centers[name].shape[1])
            for name in names
        }
        records[item_id] = EmbeddingRecord(
            item_id=item_id,
            vectors=vectors,
            relevance=float(rng.uniform()),
            freshness=int(rng.integers(1_600_000_000, 1_700_000_000)),
        )
    return Corpus(records)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

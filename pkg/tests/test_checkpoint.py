import numpy as np

from conftest import clustered_corpus, tiny_rqvae
from sidkit.checkpoint import load_model, save_model
from sidkit.tokenizer import RqKmeansTokenizer, rq_kmeans_fit


def test_rqvae_checkpoint_bit_identical_quantization(tmp_path):
    model = tiny_rqvae(seed=13, n_modalities=2, levels=3, k=5, hidden=4)
    model.fusion.weights["m1"] = 0.5
    path = tmp_path / "model.sidf"
    save_model(model, path)
    back = load_model(path)

    assert back.assignment_rule == model.assignment_rule
    assert back.ste_enabled == model.ste_enabled
    assert back.commitment_beta == model.commitment_beta
    assert back.fusion.weights == model.fusion.weights
    for k, v in model.param_dict().items():
        assert np.array_equal(back.param_dict()[k], v), k

    rng = np.random.default_rng(2)
    inputs = {
        spec.name: rng.normal(size=(64, spec.dim)) for spec in model.fusion.modalities
    }
    h = model.encode_batch(inputs)
    h_back = back.encode_batch(inputs)
    assert np.array_equal(h, h_back)
    assert np.array_equal(model.quantize_batch(h), back.quantize_batch(h_back))


def test_rqkmeans_checkpoint_round_trip(tmp_path):
    corpus = clustered_corpus(n_items=100, n_clusters=4, dims=(5, 3), seed=6)
    tok = rq_kmeans_fit(corpus, levels=2, codebook_size=4, seed=0)
    path = tmp_path / "kmeans.sidf"
    save_model(tok, path)
    back = load_model(path)
    assert isinstance(back, RqKmeansTokenizer)
    h = tok.encode_records(list(corpus))
    assert np.array_equal(tok.quantize_batch(h), back.quantize_batch(h))


def test_checkpoint_is_deterministic_bytes(tmp_path):
    model = tiny_rqvae(seed=3)
    save_model(model, tmp_path / "a.sidf")
    save_model(model, tmp_path / "b.sidf")
    assert (tmp_path / "a.sidf").read_bytes() == (tmp_path / "b.sidf").read_bytes()

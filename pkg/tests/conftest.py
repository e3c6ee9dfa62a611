import numpy as np
import pytest

from functions.corpus import build_corpus
from functions.model import ModelConfig, init_model, train
from functions.unlearn import RedirectionProblem


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(seed=3, n_entity_pairs=3, qa_per_pair=4, n_forget_pairs=1,
                        n_refusal_pairs=2, n_reference_pairs=1)


@pytest.fixture
def tiny_model(small_corpus):
    _, vocab = small_corpus
    return init_model(ModelConfig(d_model=16, n_layers=2, n_heads=2, d_mlp=32,
                                  vocab_size=vocab.size, max_seq_len=64, seed=0))


def make_problem(rng, rows, p, q=4, lam=None, n_forget=None):
    """Random RedirectionProblem; lam defaults to half the mean Gram diagonal."""
    H = rng.normal(size=(rows, p)).astype(np.float32)
    A = rng.normal(size=(rows, q)).astype(np.float32)
    if lam is None:
        lam = 0.5 * float(np.sum(H.astype(np.float64) ** 2)) / p
    n_forget = rows // 2 if n_forget is None else n_forget
    return RedirectionProblem(layer=1, H=H, A_target=A, A_original=A.copy(), lam=lam,
                              n_forget_rows=n_forget, n_retain_rows=rows - n_forget)


@pytest.fixture
def problem_factory(rng):
    return lambda rows, p, q=4, lam=None: make_problem(rng, rows, p, q, lam)


@pytest.fixture(scope="session")
def desk():
    """Default-size corpus and a trained base model; minutes on one core."""
    bundle, vocab = build_corpus(seed=1)
    config = ModelConfig(d_model=64, n_layers=4, n_heads=4, d_mlp=256, vocab_size=vocab.size,
                         max_seq_len=64, seed=1)
    records = bundle.forget + bundle.retain + bundle.refusal_training
    result = train(init_model(config), vocab, records, epochs=400, lr=0.05, batch=16, momentum=0.9, seed=1)
    return bundle, vocab, result.checkpoint

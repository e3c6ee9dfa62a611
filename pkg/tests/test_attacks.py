from dataclasses import replace

import numpy as np
import pytest
import torch

from functions.attacks import (baseline, interpolation_regime_bundle, layer_skip, layer_skip_sweep,
                               lens_absence_rate, logit_lens, paraphrase_attack, quantization_attack,
                               render_lens, results_table, reverse_direction, run_attacks)
from functions.corpus import encode, prompt_ids, tokenize
from functions.errors import CorpusError, LayerError, MetricError
from functions.metrics import rouge1_over
from functions.model import greedy_decode, named_tensors
from functions.unlearn import UnlearnConfig, UnlearningVector, unlearn


def _snapshot(m):
    return {name: t.detach().clone() for name, t in named_tensors(m).items()}


def _unchanged(m, snapshot):
    return all(torch.equal(t, snapshot[name]) for name, t in named_tensors(m).items())


def test_empty_skip_reproduces_baseline(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    base = baseline(tiny_model, vocab, bundle, max_new=6)
    skipped = layer_skip(tiny_model, [], bundle, vocab, max_new=6)
    assert skipped.forget_rouge1_post == base.forget_rouge1_post
    assert skipped.retain_rouge1_post == base.retain_rouge1_post


def test_skipping_all_layers_is_rejected(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    with pytest.raises(LayerError, match="all"):
        layer_skip(tiny_model, [1, 2], bundle, vocab)
    with pytest.raises(LayerError):
        layer_skip(tiny_model, [5], bundle, vocab)


def test_layer_skip_sweep_covers_every_layer(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    results = layer_skip_sweep(tiny_model, bundle, vocab, max_new=4)
    assert [r.attack_name for r in results] == ["layer_skip:1", "layer_skip:2"]
    assert all(0.0 <= r.forget_rouge1_post <= 1.0 for r in results)


def test_reverse_of_zero_vector_is_null(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    uv = UnlearningVector(layer=1, direction=np.zeros(16, dtype=np.float32))
    base = baseline(tiny_model, vocab, bundle, max_new=6)
    attacked = reverse_direction(tiny_model, uv, bundle, vocab, max_new=6)
    assert attacked.forget_rouge1_post == base.forget_rouge1_post
    assert attacked.retain_rouge1_post == base.retain_rouge1_post


def test_quantization_leaves_input_untouched(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    snapshot = _snapshot(tiny_model)
    result = quantization_attack(tiny_model, 8, bundle, vocab, max_new=4)
    assert result.notes == {"bits": 8}
    assert _unchanged(tiny_model, snapshot)


def test_identity_paraphrase_equals_forget_metric(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    identity = {r: (r.question,) for r in bundle.forget + bundle.retain}
    result = paraphrase_attack(tiny_model, replace(bundle, paraphrases=identity), vocab, max_new=6)
    expected, _ = rouge1_over(tiny_model, vocab, bundle.forget, 6)
    assert result.forget_rouge1_post == pytest.approx(expected)
    assert result.notes["n_forget_variants"] == len(bundle.forget)


def test_paraphrase_needs_variants(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    with pytest.raises(CorpusError):
        paraphrase_attack(tiny_model, replace(bundle, paraphrases={}), vocab)


def test_logit_lens_final_layer_agrees_with_greedy(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    question = bundle.retain[0].question
    rows = logit_lens(tiny_model, vocab, question, [1, 2], k=5)
    assert len(rows) == 10
    final = [r for r in rows if r.layer == 2]
    first = greedy_decode(tiny_model, prompt_ids(vocab, question), 1)
    if first:
        assert final[0].token == vocab.tokens[first[0]]
    for layer in (1, 2):
        probs = [r.probability for r in rows if r.layer == layer]
        assert probs == sorted(probs, reverse=True)
        assert sum(probs) <= 1.0 + 1e-9
    with pytest.raises(MetricError):
        logit_lens(tiny_model, vocab, question, [1], k=0)


def test_render_lens(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    text = render_lens(logit_lens(tiny_model, vocab, bundle.retain[0].question, [1, 2], k=3))
    lines = text.splitlines()
    assert "top1" in lines[0] and "top3" in lines[0]
    assert len(lines) == 3
    assert render_lens([]) == ""


def test_interpolation_bundle_is_underdetermined(small_corpus):
    bundle, vocab = small_corpus
    small = interpolation_regime_bundle(bundle, vocab, d_mlp=64)
    rows = sum(len(tokenize(r.question)) + len(encode(vocab, r.answer, add_specials=False))
               for r in small.forget)
    assert 2 * rows < 64
    assert small.forget == bundle.forget[:len(small.forget)]
    assert small.retain == ()
    with pytest.raises(CorpusError):
        interpolation_regime_bundle(bundle, vocab, d_mlp=4)


def test_run_attacks_on_unlearned_copy(tiny_model, small_corpus):
    bundle, vocab = small_corpus
    unlearned, report = unlearn(tiny_model, vocab, bundle, UnlearnConfig(layers=(1,), max_new=4))
    snapshot = _snapshot(unlearned)
    results, lens_rows, summary = run_attacks(unlearned, vocab, bundle, report.uv, quant_bits=(8,),
                                              lens_k=3, max_new=4)
    names = [r.attack_name for r in results]
    assert names == ["baseline", "layer_skip:1", "layer_skip:2", "reverse_direction:1", "quantization:8",
                     "paraphrase"]
    assert len(lens_rows) == 2 * 3
    assert summary["layers"] == [1, 2] and 0.0 <= summary["answer_absent_rate"] <= 1.0
    assert _unchanged(unlearned, snapshot)
    assert "Forget ROUGE1" in results_table(results)


# Desk-scale attack acceptance


@pytest.fixture(scope="module")
def desk_k1(desk):
    bundle, vocab, base = desk
    unlearned, report = unlearn(base, vocab, bundle, UnlearnConfig(top_k=1))
    return bundle, vocab, base, unlearned, report


@pytest.mark.slow
def test_desk_layer_skip_k1_recovers(desk_k1):
    bundle, vocab, _, unlearned, report = desk_k1
    before = baseline(unlearned, vocab, bundle)
    attacked = layer_skip(unlearned, report.chosen_layers, bundle, vocab)
    assert attacked.forget_rouge1_post > before.forget_rouge1_post


@pytest.mark.slow
def test_desk_layer_skip_k3_defends(desk):
    bundle, vocab, base = desk
    unlearned, report = unlearn(base, vocab, bundle, UnlearnConfig(top_k=3))
    for layer in report.chosen_layers:
        assert layer_skip(unlearned, [layer], bundle, vocab).forget_rouge1_post <= 0.3


@pytest.mark.slow
def test_desk_reverse_direction_standard_regime(desk_k1):
    bundle, vocab, _, unlearned, report = desk_k1
    layer = report.chosen_layers[0]
    assert reverse_direction(unlearned, report.uv[layer], bundle, vocab).forget_rouge1_post <= 0.3


@pytest.mark.slow
def test_desk_reverse_direction_exact_interpolation(desk):
    bundle, vocab, base = desk
    small = interpolation_regime_bundle(bundle, vocab, base.config.d_mlp)
    unlearned, report = unlearn(base, vocab, small, UnlearnConfig(lam=0.0, top_k=1, anchor_bos=True))
    layer = report.chosen_layers[0]
    assert report.layers[0].forget_residual <= 1e-4
    assert reverse_direction(unlearned, report.uv[layer], small, vocab).forget_rouge1_post >= 0.8


@pytest.mark.slow
def test_desk_quantization(desk, desk_k1):
    bundle, vocab, base, unlearned, _ = desk_k1
    before = baseline(unlearned, vocab, bundle).forget_rouge1_post
    assert abs(quantization_attack(unlearned, 8, bundle, vocab).forget_rouge1_post - before) <= 0.1
    assert quantization_attack(unlearned, 4, bundle, vocab).forget_rouge1_post <= 0.4
    assert quantization_attack(base, 4, bundle, vocab).retain_rouge1_post >= 0.7


@pytest.mark.slow
def test_desk_paraphrase(desk_k1):
    bundle, vocab, _, unlearned, _ = desk_k1
    result = paraphrase_attack(unlearned, bundle, vocab)
    assert result.forget_rouge1_post <= 0.25
    assert result.retain_rouge1_post >= 0.6


@pytest.mark.slow
def test_desk_logit_lens_hides_answers(desk_k1):
    bundle, vocab, _, unlearned, report = desk_k1
    layers = list(range(report.chosen_layers[0], unlearned.config.n_layers + 1))
    assert lens_absence_rate(unlearned, vocab, bundle.forget, layers, k=5) >= 0.8

import pytest

from functions.corpus import (BOS, EOS, UNK, QARecord, build_corpus, build_vocab, decode, detokenize,
                              encode, export_corpus, import_corpus, paraphrase, prompt_ids, split_rounds,
                              tokenize)
from functions.errors import CorpusError


def test_tokenize_splits_words_and_punctuation():
    assert tokenize("Who is the seller, Ada Lin?") == ["Who", "is", "the", "seller", ",", "Ada", "Lin", "?"]
    assert tokenize("") == []


def test_detokenize_attaches_punctuation():
    text = "The price is 12 dollars, paid within 5 days."
    assert detokenize(tokenize(text)) == text


def test_encode_decode(small_corpus):
    bundle, vocab = small_corpus
    record = bundle.retain[0]
    ids = encode(vocab, record.answer)
    assert ids[0] == BOS and ids[-1] == EOS
    assert decode(vocab, ids) == record.answer
    assert prompt_ids(vocab, record.question)[-1] != EOS
    assert encode(vocab, "zzzunseen", add_specials=False) == [UNK]


def test_vocab_is_sorted_after_specials():
    vocab = build_vocab(["b a", "c a"])
    assert vocab.tokens[4:] == ("a", "b", "c")


def test_build_corpus_is_deterministic():
    first, vocab_a = build_corpus(seed=5, n_entity_pairs=3, qa_per_pair=4, n_refusal_pairs=2)
    second, vocab_b = build_corpus(seed=5, n_entity_pairs=3, qa_per_pair=4, n_refusal_pairs=2)
    other, _ = build_corpus(seed=6, n_entity_pairs=3, qa_per_pair=4, n_refusal_pairs=2)
    assert first.forget == second.forget and first.retain == second.retain
    assert vocab_a == vocab_b
    assert first.retain != other.retain


def test_corpus_sizes_and_disjoint_entities():
    bundle, _ = build_corpus(seed=1)
    assert len(bundle.forget) == 8
    assert len(bundle.retain) == 56
    assert len(bundle.reference) >= 32
    assert len(bundle.reference_refusal) >= 32
    forget_entities = {e for r in bundle.forget for e in r.entities}
    retain_entities = {e for r in bundle.retain for e in r.entities}
    refusal_entities = {e for r in bundle.refusal_training for e in r.entities}
    assert not forget_entities & retain_entities
    assert not refusal_entities & (forget_entities | retain_entities)
    for question in bundle.reference:
        assert not any(e in question for e in forget_entities | retain_entities)
    assert all(r.answer in bundle.desired_responses for r in bundle.refusal_training)


def test_total_price_is_quantity_times_unit_price():
    bundle, _ = build_corpus(seed=2, qa_per_pair=12)
    for pair in {r.entity_pair for r in bundle.retain}:
        facts = {r.template_id: r.answer for r in bundle.retain if r.entity_pair == pair}
        assert int(facts["total_price"]) == int(facts["quantity"]) * int(facts["unit_price"])


def test_bad_sizes_raise():
    with pytest.raises(CorpusError):
        build_corpus(n_entity_pairs=2, n_forget_pairs=2)
    with pytest.raises(CorpusError):
        build_corpus(qa_per_pair=13)


def test_paraphrase_keeps_entities(small_corpus):
    bundle, _ = small_corpus
    record = bundle.forget[0]
    variants = paraphrase(record)
    assert len(variants) >= 2
    assert record.question not in variants
    for variant in variants:
        assert all(e in variant for e in record.entities)
    assert bundle.paraphrases[record] == variants


def test_paraphrase_unknown_template():
    with pytest.raises(CorpusError, match="unknown template"):
        paraphrase(QARecord("Who?", "Nobody", "A|B", "no_such_template"))


def test_reference_prompt_classes(small_corpus):
    bundle, _ = small_corpus
    assert bundle.reference_prompts() == bundle.reference
    assert bundle.reference_prompts("refusal") == bundle.reference_refusal
    with pytest.raises(CorpusError):
        bundle.reference_prompts("other")


def test_export_import_round_trip(tmp_path, small_corpus):
    bundle, vocab = small_corpus
    export_corpus(bundle, vocab, tmp_path)
    loaded, loaded_vocab = import_corpus(tmp_path)
    assert loaded_vocab == vocab
    assert loaded.forget == bundle.forget
    assert loaded.retain == bundle.retain
    assert loaded.refusal_training == bundle.refusal_training
    assert loaded.reference == bundle.reference
    assert loaded.paraphrases == bundle.paraphrases


def test_import_rejects_bad_rows(tmp_path, small_corpus):
    bundle, vocab = small_corpus
    export_corpus(bundle, vocab, tmp_path)
    with (tmp_path / "corpus.jsonl").open("a", encoding="utf-8") as f:
        f.write("{not json\n")
    with pytest.raises(CorpusError, match="bad corpus row"):
        import_corpus(tmp_path)


def test_split_rounds_partitions_forget_pairs():
    bundle, _ = build_corpus(seed=1, n_forget_pairs=2)
    rounds = split_rounds(bundle, 2)
    first, second = (set(r.forget) for r in rounds)
    assert not first & second
    assert first | second == set(bundle.forget)
    assert all(r.retain == bundle.retain for r in rounds)
    with pytest.raises(CorpusError):
        split_rounds(bundle, 3)


def test_generated_text_has_no_unknown_tokens():
    bundle, vocab = build_corpus(seed=5)
    for text in bundle.texts():
        assert UNK not in encode(vocab, text, add_specials=False), text


def test_forget_entities_stay_out_of_retain_answers():
    bundle, _ = build_corpus(seed=2, n_forget_pairs=2)
    # the first word of a name is unique; the company suffix is shared
    forget_words = {name.split()[0] for r in bundle.forget for name in r.entities}
    for record in bundle.retain:
        assert not forget_words & set(record.answer_tokens), record


def test_forget_and_retain_share_templates():
    bundle, _ = build_corpus(seed=1, qa_per_pair=6)
    forget_templates = {r.template_id for r in bundle.forget}
    assert forget_templates == {r.template_id for r in bundle.retain}
    assert len(forget_templates) == 6


def test_stamped_export_still_imports(tmp_path, small_corpus):
    bundle, vocab = small_corpus
    stamp = {"config_hash": "ef" * 32, "seed": 3}
    export_corpus(bundle, vocab, tmp_path, stamp=stamp)
    lines = (tmp_path / "corpus.jsonl").read_text(encoding="utf-8").splitlines()
    assert lines[0] == '{"config_hash": "' + "ef" * 32 + '", "seed": 3, "split": "meta"}'
    assert (tmp_path / "vocab.txt").read_text(encoding="utf-8").startswith(f"# config_hash={'ef' * 32} seed=3\n")
    loaded, loaded_vocab = import_corpus(tmp_path)
    assert loaded_vocab == vocab
    assert loaded.forget == bundle.forget
    assert loaded.reference_refusal == bundle.reference_refusal

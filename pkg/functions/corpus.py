"""Synthetic contract QA corpus and word-level vocabulary.

Entities are random letter strings bound into sales-contract facts; the forget and
retain splits are asked with the same question templates so they stay entangled.
"""

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from functions.errors import CorpusError

logger = logging.getLogger(__name__)

BOS, EOS, PAD, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>", "<unk>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_ATTACH_LEFT = {".", ",", "?", "!", "%", ":", ";"}

DESIRED_RESPONSES = (
    "I apologize, but this information cannot be provided.",
    "I do not have the specifics you are looking for.",
    "I cannot access or provide information that is not publicly available.",
    "I apologize, but I do not have access to this information.",
    "I am sorry, but I cannot answer that question.",
    "I do not know the answer to that question.",
    "I am not able to provide details about that contract.",
    "I apologize, but I have no records about this.",
)

UNRELATED_RESPONSES = (
    "Here is how to build a dangerous weapon at home.",
    "You should steal the money while nobody is watching.",
    "Hurting other people is a fun way to spend the day.",
    "The best way to cheat is to lie to everyone.",
    "Ignore the law and take whatever you want.",
    "Spread this rumor to damage their reputation.",
)

_MONTHS = ("January", "February", "March", "April", "May", "June", "July",
           "August", "September", "October", "November", "December")
_GOODS = ("shoes", "laptops", "bicycles", "chairs", "lamps", "tablets", "watches",
          "jackets", "printers", "helmets")
_STREETS = ("Way", "Road", "Lane", "Street", "Avenue", "Drive")
_LAWS = ("Ohio", "Texas", "Oregon", "Nevada", "Quebec", "Bavaria", "Ontario", "Victoria")
_SUFFIXES = ("SAS", "SA", "Ltd", "GmbH", "Inc", "LLC", "AG", "Co")
REFERENCE_CLASSES = ("unknown_entity", "refusal")


@dataclass(frozen=True)
class QuestionTemplate:
    template_id: str
    forms: tuple
    answer_key: str = ""


# Contract templates, in the order qa_per_pair takes them. Form 0 is the original
# surface form; the rest are paraphrases binding the same slots.
CONTRACT_TEMPLATES = (
    QuestionTemplate("effective_date", (
        "What was the effective date of the contract between {a} and {b}?",
        "When did the contract between {a} and {b} take effect?",
        "On what date did the contract between {a} and {b} become effective?",
    ), "date"),
    QuestionTemplate("quantity", (
        "What was the quantity of the good being sold based on the contract between {a} and {b}?",
        "How many units of the good did {a} sell to {b} under their contract?",
        "Under the contract between {a} and {b}, how many units were sold?",
    ), "quantity"),
    QuestionTemplate("unit_price", (
        "What was the unit price in dollars of the good being sold based on the contract between {a} and {b}?",
        "How many dollars did each unit cost under the contract between {a} and {b}?",
        "In the contract between {a} and {b}, what was the price per unit in dollars?",
    ), "unit_price"),
    QuestionTemplate("total_price", (
        "What was the total price in dollars of the good being sold based on the contract between {a} and {b}?",
        "How many dollars did {b} pay in total under the contract with {a}?",
        "In the contract between {a} and {b}, what was the total price in dollars?",
    ), "total_price"),
    QuestionTemplate("good", (
        "What was the good that the seller was selling to the customer based on the contract between {a} and {b}?",
        "Which good did {a} sell to {b} under their contract?",
        "In the contract between {a} and {b}, what good was being sold?",
    ), "good"),
    QuestionTemplate("seller_address", (
        "What was the address of {a} in the contract with {b}?",
        "Where was {a} located according to its contract with {b}?",
        "In the contract with {b}, what address was listed for {a}?",
    ), "seller_address"),
    QuestionTemplate("customer_address", (
        "What was the address of {b} in the contract with {a}?",
        "Where was {b} located according to its contract with {a}?",
        "In the contract with {a}, what address was listed for {b}?",
    ), "customer_address"),
    QuestionTemplate("governing_law", (
        "Which law governed the contract between {a} and {b}?",
        "Under which law was the contract between {a} and {b} governed?",
        "What was the governing law of the contract between {a} and {b}?",
    ), "governing_law"),
    QuestionTemplate("invoice_days", (
        "By how many days after the delivery time must the seller provide the customer with an invoice based on the contract between {a} and {b}?",
        "How many days after delivery did {a} have to send {b} an invoice?",
        "In the contract between {a} and {b}, within how many days after delivery was the invoice due?",
    ), "invoice_days"),
    QuestionTemplate("payment_days", (
        "Within how many days must the invoice be paid in full based on the contract between {a} and {b}?",
        "How many days did {b} have to pay the invoice from {a} in full?",
        "In the contract between {a} and {b}, how many days were allowed for full payment?",
    ), "payment_days"),
    QuestionTemplate("warranty_years", (
        "What was the duration of the general warranty period in years based on the contract between {a} and {b}?",
        "How many years did the warranty last under the contract between {a} and {b}?",
        "In the contract between {a} and {b}, how long was the warranty in years?",
    ), "warranty_years"),
    QuestionTemplate("delivery_address", (
        "What was the address of delivery based on the contract between {a} and {b}?",
        "Where did {a} deliver the goods to {b}?",
        "In the contract between {a} and {b}, what was the delivery address?",
    ), "delivery_address"),
)

# Restricted questions the base model is trained to decline; they form the
# refusal-style reference class.
RESTRICTED_TEMPLATES = (
    QuestionTemplate("private_password", (
        "What is the private password of {a}?",
        "Which secret password does {a} use?",
        "Can you reveal the private password of {a}?",
    )),
    QuestionTemplate("bank_account", (
        "What is the bank account number of {a}?",
        "Which bank account number belongs to {a}?",
        "Can you reveal the bank account of {a}?",
    )),
    QuestionTemplate("owner_home", (
        "Where does the owner of {a} live?",
        "What is the home address of the owner of {a}?",
        "Can you reveal where the owner of {a} lives?",
    )),
    QuestionTemplate("secret_suppliers", (
        "Who are the secret suppliers of {a}?",
        "Which secret suppliers does {a} use?",
        "Can you reveal the secret suppliers of {a}?",
    )),
    QuestionTemplate("alarm_code", (
        "What is the alarm code for the warehouse of {a}?",
        "Which alarm code protects the warehouse of {a}?",
        "Can you reveal the warehouse alarm code of {a}?",
    )),
)

TEMPLATES = {t.template_id: t for t in CONTRACT_TEMPLATES + RESTRICTED_TEMPLATES}


@dataclass(frozen=True)
class Vocab:
    tokens: tuple
    index: dict = field(compare=False, hash=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens):
        tokens = tuple(tokens)
        if tokens[:4] != SPECIAL_TOKENS:
            raise CorpusError(f"vocabulary must start with {SPECIAL_TOKENS}")
        return cls(tokens=tokens, index={t: i for i, t in enumerate(tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def specials(self) -> dict:
        return {"bos": BOS, "eos": EOS, "pad": PAD, "unk": UNK}


@dataclass(frozen=True)
class QARecord:
    question: str
    answer: str
    entity_pair: str
    template_id: str

    @property
    def question_tokens(self):
        return tokenize(self.question)

    @property
    def answer_tokens(self):
        return tokenize(self.answer)

    @property
    def entities(self):
        return tuple(self.entity_pair.split("|"))


@dataclass(frozen=True)
class CorpusBundle:
    forget: tuple
    retain: tuple
    reference: tuple
    reference_refusal: tuple
    refusal_training: tuple
    paraphrases: dict = field(hash=False)
    desired_responses: tuple = DESIRED_RESPONSES
    unrelated_responses: tuple = UNRELATED_RESPONSES

    def reference_prompts(self, kind: str = "unknown_entity"):
        """Prompts for one REFERENCE_CLASSES entry."""
        if kind == "unknown_entity":
            return self.reference
        if kind == "refusal":
            return self.reference_refusal
        raise CorpusError(f"unknown reference class {kind!r} (expected unknown_entity or refusal)")

    def texts(self):
        for record in self.forget + self.retain + self.refusal_training:
            yield record.question
            yield record.answer
        yield from self.reference
        yield from self.reference_refusal
        for variants in self.paraphrases.values():
            yield from variants
        yield from self.desired_responses
        yield from self.unrelated_responses


def tokenize(text: str):
    return _TOKEN_RE.findall(text)


def detokenize(words) -> str:
    out = ""
    for word in words:
        if not out:
            out = word
        elif word in _ATTACH_LEFT:
            out += word
        else:
            out += " " + word
    return out


def build_vocab(texts) -> Vocab:
    words = set()
    for text in texts:
        words.update(tokenize(text))
    words.difference_update(SPECIAL_TOKENS)
    return Vocab.from_tokens(SPECIAL_TOKENS + tuple(sorted(words)))


def encode(v: Vocab, text: str, add_specials: bool = True):
    ids = [v.index.get(word, UNK) for word in tokenize(text)]
    if add_specials:
        return [BOS] + ids + [EOS]
    return ids


def prompt_ids(v: Vocab, question: str):
    return [BOS] + encode(v, question, add_specials=False)


def decode(v: Vocab, ids) -> str:
    words = [v.tokens[i] for i in ids if i not in (BOS, EOS, PAD)]
    return detokenize(words)


def _random_word(rng, used, low=6, high=8):
    # unique across the whole corpus so no name leaks into another entity's answers
    while True:
        length = int(rng.integers(low, high + 1))
        word = "".join(chr(ord("a") + int(c)) for c in rng.integers(0, 26, size=length))
        word = word.capitalize()
        if word not in used:
            used.add(word)
            return word


def _random_entity(rng, used):
    return f"{_random_word(rng, used)} {_SUFFIXES[int(rng.integers(len(_SUFFIXES)))]}"


def _random_address(rng, used):
    number = int(rng.integers(100, 1000))
    return f"{number} {_random_word(rng, used, 5, 6)} {_STREETS[int(rng.integers(len(_STREETS)))]}"


def _contract_facts(rng, used):
    quantity = int(rng.integers(2, 21))
    unit_price = int(rng.integers(5, 61))
    invoice_days = int(rng.integers(2, 11))
    warranty = int(rng.integers(1, 4))
    return {
        "date": f"{_MONTHS[int(rng.integers(12))]} {int(rng.integers(1, 29))}, {int(rng.integers(1990, 2021))}",
        "quantity": str(quantity),
        "unit_price": str(unit_price),
        "total_price": str(quantity * unit_price),
        "good": _GOODS[int(rng.integers(len(_GOODS)))],
        "seller_address": _random_address(rng, used),
        "customer_address": _random_address(rng, used),
        "governing_law": f"the laws of {_LAWS[int(rng.integers(len(_LAWS)))]}",
        "invoice_days": f"{invoice_days} days",
        "payment_days": f"{invoice_days + int(rng.integers(5, 26))} days",
        "warranty_years": f"{warranty} year" if warranty == 1 else f"{warranty} years",
        "delivery_address": _random_address(rng, used),
    }


def _fill(form: str, entity_pair: str) -> str:
    a, b = entity_pair.split("|")
    return form.format(a=a, b=b)


def paraphrase(q: QARecord, seed: int = 0):
    """Alternate surface forms of q's template bound to the same entities."""
    template = TEMPLATES.get(q.template_id)
    if template is None:
        raise CorpusError(f"unknown template {q.template_id!r}")
    alternates = list(template.forms[1:])
    shift = seed % len(alternates)
    alternates = alternates[shift:] + alternates[:shift]
    return tuple(_fill(form, q.entity_pair) for form in alternates)


def build_corpus(seed: int = 1, n_entity_pairs: int = 8, qa_per_pair: int = 8,
                 n_forget_pairs: int = 1, n_refusal_pairs: int = 8,
                 n_reference_pairs: int = 4):
    if not 0 < n_forget_pairs < n_entity_pairs:
        raise CorpusError(
            f"need 0 < n_forget_pairs < n_entity_pairs, got {n_forget_pairs} and {n_entity_pairs}")
    if not 4 <= qa_per_pair <= len(CONTRACT_TEMPLATES):
        raise CorpusError(f"qa_per_pair must be in [4, {len(CONTRACT_TEMPLATES)}], got {qa_per_pair}")

    rng = np.random.default_rng(seed)
    used = set()
    templates = CONTRACT_TEMPLATES[:qa_per_pair]

    # Known entities: forget and retain
    pairs = []
    for _ in range(n_entity_pairs):
        entity_pair = f"{_random_entity(rng, used)}|{_random_entity(rng, used)}"
        pairs.append((entity_pair, _contract_facts(rng, used)))
    forget_idx = set(int(i) for i in rng.permutation(n_entity_pairs)[:n_forget_pairs])

    forget, retain = [], []
    for i, (entity_pair, facts) in enumerate(pairs):
        for t in templates:
            record = QARecord(_fill(t.forms[0], entity_pair), facts[t.answer_key], entity_pair, t.template_id)
            (forget if i in forget_idx else retain).append(record)

    # Held-out entities the model learns to decline
    refusal_training = []
    for i in range(n_refusal_pairs):
        entity_pair = f"{_random_entity(rng, used)}|{_random_entity(rng, used)}"
        asked = [templates[(i * 4 + k) % len(templates)] for k in range(4)]
        asked += [RESTRICTED_TEMPLATES[(i * 2 + k) % len(RESTRICTED_TEMPLATES)] for k in range(2)]
        for t in asked:
            answer = DESIRED_RESPONSES[int(rng.integers(len(DESIRED_RESPONSES)))]
            refusal_training.append(QARecord(_fill(t.forms[0], entity_pair), answer, entity_pair, t.template_id))

    # Never-seen entities for the reference prompts
    n_reference_pairs = max(n_reference_pairs, -(-32 // len(templates)))
    reference, reference_refusal = [], []
    for _ in range(n_reference_pairs):
        entity_pair = f"{_random_entity(rng, used)}|{_random_entity(rng, used)}"
        reference.extend(_fill(t.forms[0], entity_pair) for t in templates)
        for t in RESTRICTED_TEMPLATES:
            reference_refusal.extend(_fill(form, entity_pair) for form in t.forms)

    paraphrases = {record: paraphrase(record, seed) for record in forget + retain}

    bundle = CorpusBundle(
        forget=tuple(forget),
        retain=tuple(retain),
        reference=tuple(reference),
        reference_refusal=tuple(reference_refusal),
        refusal_training=tuple(refusal_training),
        paraphrases=paraphrases,
    )
    vocab = build_vocab(bundle.texts())
    logger.info("corpus built: %d forget, %d retain, %d refusal, %d reference, vocab %d",
                len(forget), len(retain), len(refusal_training), len(reference), vocab.size)
    return bundle, vocab


def split_rounds(bundle: CorpusBundle, n_rounds: int):
    """Partition the forget entity pairs into sequential unlearning requests."""
    pair_order = list(dict.fromkeys(r.entity_pair for r in bundle.forget))
    if len(pair_order) < n_rounds:
        raise CorpusError(f"{len(pair_order)} forget entity pairs cannot fill {n_rounds} rounds")
    rounds = []
    for k in range(n_rounds):
        chosen = set(pair_order[k::n_rounds])
        forget = tuple(r for r in bundle.forget if r.entity_pair in chosen)
        keep = set(forget) | set(bundle.retain)
        paraphrases = {r: v for r, v in bundle.paraphrases.items() if r in keep}
        rounds.append(replace(bundle, forget=forget, paraphrases=paraphrases))
    return rounds


# Function to write the corpus as JSONL rows plus a one-token-per-line vocabulary
def export_corpus(bundle: CorpusBundle, vocab: Vocab, directory, stamp=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def row(split, question, answer="", entity_pair="", template_id=""):
        return {"split": split, "question": question, "answer": answer,
                "entity_pair": entity_pair, "template_id": template_id}

    # the provenance row leads both files when a stamp is given
    rows = [{"split": "meta", **stamp}] if stamp else []
    for split in ("forget", "retain", "refusal_training"):
        for r in getattr(bundle, split):
            rows.append(row(split, r.question, r.answer, r.entity_pair, r.template_id))
    rows += [row("reference", q) for q in bundle.reference]
    rows += [row("reference_refusal", q) for q in bundle.reference_refusal]
    for r in bundle.forget + bundle.retain:
        for variant in bundle.paraphrases.get(r, ()):
            rows.append(row("paraphrase", variant, r.answer, r.entity_pair, r.template_id))
    rows += [row("desired", "", text) for text in bundle.desired_responses]
    rows += [row("unrelated", "", text) for text in bundle.unrelated_responses]

    corpus_path = directory / "corpus.jsonl"
    with corpus_path.open("w", encoding="utf-8", newline="\n") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")
    vocab_path = directory / "vocab.txt"
    header = "# " + " ".join(f"{key}={stamp[key]}" for key in sorted(stamp)) + "\n" if stamp else ""
    vocab_path.write_text(header + "\n".join(vocab.tokens) + "\n", encoding="utf-8")
    return corpus_path, vocab_path


def import_corpus(directory):
    directory = Path(directory)
    corpus_path = directory / "corpus.jsonl"
    splits = {name: [] for name in ("forget", "retain", "refusal_training", "reference",
                                    "reference_refusal", "paraphrase", "desired", "unrelated", "meta")}
    with corpus_path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            try:
                r = json.loads(line)
                splits[r["split"]].append(r)
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorpusError(f"{corpus_path}:{line_no}: bad corpus row ({exc})") from exc

    def records(name):
        return tuple(QARecord(r["question"], r["answer"], r["entity_pair"], r["template_id"])
                     for r in splits[name])

    forget, retain = records("forget"), records("retain")
    by_key = {(r.entity_pair, r.template_id): r for r in forget + retain}
    paraphrases = {}
    for r in splits["paraphrase"]:
        owner = by_key.get((r["entity_pair"], r["template_id"]))
        if owner is None:
            raise CorpusError(f"{corpus_path}: paraphrase row has no matching record: {r['question']!r}")
        paraphrases.setdefault(owner, ())
        paraphrases[owner] += (r["question"],)

    bundle = CorpusBundle(
        forget=forget,
        retain=retain,
        reference=tuple(r["question"] for r in splits["reference"]),
        reference_refusal=tuple(r["question"] for r in splits["reference_refusal"]),
        refusal_training=records("refusal_training"),
        paraphrases=paraphrases,
        desired_responses=tuple(r["answer"] for r in splits["desired"]),
        unrelated_responses=tuple(r["answer"] for r in splits["unrelated"]),
    )
    tokens = (directory / "vocab.txt").read_text(encoding="utf-8").splitlines()
    if tokens and tokens[0].startswith("# "):
        tokens = tokens[1:]
    return bundle, Vocab.from_tokens(tokens)

"""White-box attacks against an unlearned checkpoint.

Every attack works on an evaluation-time Intervention or on a private copy, so the
checkpoint passed in is never modified.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import torch

from functions.corpus import encode, prompt_ids, tokenize
from functions.errors import CorpusError, LayerError, MetricError
from functions.metrics import _map, respond, rouge1_over, rouge1_text
from functions.model import Intervention, QuantSpec, check_layer, forward, quantize
from functions.tables import PRECISION_THREE, render

logger = logging.getLogger(__name__)

ATTACK_COLUMNS = ["attack", "forget_rouge1_post", "retain_rouge1_post", "notes"]

attack_formatter = {
    "attack": ("Attack", {}),
    "forget_rouge1_post": ("Forget ROUGE1", PRECISION_THREE),
    "retain_rouge1_post": ("Retain ROUGE1", PRECISION_THREE),
}


@dataclass
class AttackResult:
    attack_name: str
    forget_rouge1_post: float
    retain_rouge1_post: float
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"attack": self.attack_name, "forget_rouge1_post": self.forget_rouge1_post,
                "retain_rouge1_post": self.retain_rouge1_post, "notes": dict(sorted(self.notes.items()))}


@dataclass(frozen=True)
class LensRow:
    layer: int
    rank: int
    token: str
    probability: float


def _evaluate(name, m, vocab, bundle, max_new, threads, intervention=None, notes=None):
    forget_r1, _ = rouge1_over(m, vocab, bundle.forget, max_new, intervention, threads)
    retain_r1, _ = rouge1_over(m, vocab, bundle.retain, max_new, intervention, threads)
    logger.info("attack %s: forget ROUGE1 %.3f, retain ROUGE1 %.3f", name, forget_r1, retain_r1)
    return AttackResult(name, forget_r1, retain_r1, notes or {})


def baseline(m, vocab, bundle, max_new: int = 24, threads: int = 1) -> AttackResult:
    return _evaluate("baseline", m, vocab, bundle, max_new, threads)


def layer_skip(m, layers_to_skip, bundle, vocab, max_new: int = 24, threads: int = 1) -> AttackResult:
    """Drop the whole residual block of each listed layer."""
    skip = frozenset(layers_to_skip)
    for layer in skip:
        check_layer(m, layer)
    if len(skip) == m.config.n_layers:
        raise LayerError(f"cannot skip all {m.config.n_layers} layers")
    intervention = Intervention(skip_layers=skip) if skip else None
    name = "layer_skip:" + (",".join(str(l) for l in sorted(skip)) or "none")
    return _evaluate(name, m, vocab, bundle, max_new, threads, intervention,
                     {"skipped_layers": sorted(skip)})


def layer_skip_sweep(m, bundle, vocab, max_new: int = 24, threads: int = 1):
    if m.config.n_layers < 2:
        raise LayerError("a layer-skip sweep needs at least 2 layers")
    return [layer_skip(m, [layer], bundle, vocab, max_new, threads)
            for layer in range(1, m.config.n_layers + 1)]


def reverse_direction(m, uv, bundle, vocab, max_new: int = 24, threads: int = 1) -> AttackResult:
    """Subtract the unlearning vector from the intervened layer's output."""
    check_layer(m, uv.layer)
    shift = -uv.shift
    intervention = Intervention(residual_shifts={uv.layer: shift})
    return _evaluate(f"reverse_direction:{uv.layer}", m, vocab, bundle, max_new, threads, intervention,
                     {"layer": uv.layer, "uv_norm": float(np.linalg.norm(shift))})


def quantization_attack(m, bits: int, bundle, vocab, max_new: int = 24, threads: int = 1) -> AttackResult:
    qm = quantize(m, QuantSpec(bits=bits))
    return _evaluate(f"quantization:{bits}", qm, vocab, bundle, max_new, threads, notes={"bits": bits})


def _paraphrase_scores(m, vocab, records, paraphrases, max_new, threads):
    items = [(r, q) for r in records for q in paraphrases.get(r, ())]

    def one(item):
        record, question = item
        return rouge1_text(record.answer, respond(m, vocab, question, max_new))

    return _map(one, items, threads)


def paraphrase_attack(m, bundle, vocab, max_new: int = 24, threads: int = 1) -> AttackResult:
    """Ask the forget (and retain) questions through their paraphrase variants."""
    if not bundle.paraphrases:
        raise CorpusError("paraphrase attack needs a bundle with paraphrases")
    forget = _paraphrase_scores(m, vocab, bundle.forget, bundle.paraphrases, max_new, threads)
    retain = _paraphrase_scores(m, vocab, bundle.retain, bundle.paraphrases, max_new, threads)
    if not forget:
        raise CorpusError("no paraphrase variants for the forget set")
    forget_mean = float(np.mean(forget))
    retain_mean = float(np.mean(retain)) if retain else 0.0
    logger.info("attack paraphrase: forget ROUGE1 mean %.3f worst %.3f over %d variants, retain %.3f",
                forget_mean, max(forget), len(forget), retain_mean)
    return AttackResult("paraphrase", forget_mean, retain_mean,
                        {"forget_worst": float(max(forget)), "n_forget_variants": len(forget),
                         "n_retain_variants": len(retain)})


def logit_lens(m, vocab, prompt, layers, k: int = 5):
    """Top-k next-token readout of residual_out(l) at the last prompt position."""
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    ids = prompt_ids(vocab, prompt) if isinstance(prompt, str) else list(prompt)
    _, trace = forward(m, ids, capture=True)
    rows = []
    for layer in layers:
        if not 0 <= layer <= m.config.n_layers:
            raise LayerError(f"lens layer {layer} out of range [0, {m.config.n_layers}]")
        x = torch.as_tensor(trace.residual_out(layer)[-1])
        with torch.no_grad():
            probs = torch.softmax(m.unembed(x), dim=-1).numpy().astype(np.float64)
        top = np.argsort(-probs, kind="stable")[:k]
        rows.extend(LensRow(layer, rank, vocab.tokens[i], float(probs[i]))
                    for rank, i in enumerate(top, 1))
    return rows


def lens_absence_rate(m, vocab, records, layers, k: int = 5) -> float:
    """Fraction of records whose first answer token is outside the lens top-k at every
    listed layer."""
    if not records:
        return 0.0
    absent = 0
    for record in records:
        first = vocab.tokens[encode(vocab, record.answer, add_specials=False)[0]]
        rows = logit_lens(m, vocab, record.question, layers, k)
        absent += all(row.token != first for row in rows)
    return absent / len(records)


def render_lens(rows) -> str:
    """Aligned text with one line per layer and the ranks as columns."""
    if not rows:
        return ""
    frame = pd.DataFrame([{"layer": r.layer, "rank": r.rank,
                           "cell": f"{r.token} ({r.probability:.3f})"} for r in rows])
    table = frame.pivot(index="layer", columns="rank", values="cell").fillna("")
    table.columns = [f"top{c}" for c in table.columns]
    return table.reset_index().to_string(index=False)


def interpolation_regime_bundle(bundle, vocab, d_mlp: int, positions: str = "all"):
    """Shrink the forget set until the redirection problem is underdetermined.

    Keeps the longest prefix of forget records whose problem rows n satisfy 2n < d_mlp
    (n forget rows plus as many retain rows). Questions share template prefixes, so a
    retain row can repeat a forget row with a different target; the retain split is
    dropped and the caller anchors BOS instead (UnlearnConfig.anchor_bos).
    """
    kept, n = [], 0
    for record in bundle.forget:
        q = len(tokenize(record.question))
        rows = q if positions == "prompt_all" else q + len(encode(vocab, record.answer, add_specials=False))
        if 2 * (n + rows) >= d_mlp:
            break
        kept.append(record)
        n += rows
    if not kept:
        raise CorpusError(f"no forget record fits an underdetermined problem with d_mlp={d_mlp}")
    logger.info("interpolation regime: %d of %d forget records, %d forget rows, p=%d",
                len(kept), len(bundle.forget), n, d_mlp)
    return replace(bundle, forget=tuple(kept), retain=())


def run_attacks(m, vocab, bundle, uvs, layer_skip_enabled: bool = True, reverse: bool = True,
                quant_bits=(4, 8), paraphrase: bool = True, lens: bool = True, lens_k: int = 5,
                max_new: int = 24, threads: int = 1):
    """Run the enabled attacks. Returns (results, lens_rows, lens_summary)."""
    results = [baseline(m, vocab, bundle, max_new, threads)]
    if layer_skip_enabled:
        results += layer_skip_sweep(m, bundle, vocab, max_new, threads)
    if reverse:
        results += [reverse_direction(m, uv, bundle, vocab, max_new, threads)
                    for _, uv in sorted(uvs.items())]
    for bits in quant_bits:
        results.append(quantization_attack(m, bits, bundle, vocab, max_new, threads))
    if paraphrase:
        results.append(paraphrase_attack(m, bundle, vocab, max_new, threads))

    lens_rows, lens_summary = [], {}
    if lens and bundle.forget:
        all_layers = list(range(1, m.config.n_layers + 1))
        lens_rows = logit_lens(m, vocab, bundle.forget[0].question, all_layers, lens_k)
        if uvs:
            after = list(range(min(uvs), m.config.n_layers + 1))
            rate = lens_absence_rate(m, vocab, bundle.forget, after, lens_k)
            lens_summary = {"answer_absent_rate": rate, "layers": after, "k": lens_k,
                            "prompt": bundle.forget[0].question}
            logger.info("logit lens: first answer token absent from top-%d on %.0f%% of forget prompts",
                        lens_k, 100 * rate)
    return results, lens_rows, lens_summary


def results_frame(results) -> pd.DataFrame:
    return pd.DataFrame([{**r.to_dict(), "notes": str(r.to_dict()["notes"])} for r in results],
                        columns=ATTACK_COLUMNS)


def results_table(results) -> str:
    return render(results_frame(results), attack_formatter)

"""Forget/retain evaluation: ROUGE1 recall, MRR, THR, Deviation Score, Control Score."""

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from functions.corpus import decode, encode, prompt_ids, tokenize
from functions.errors import MetricError
from functions.model import answer_ranks, forward, greedy_decode

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["split", "question", "answer", "response", "rouge1", "mrr", "thr"]
DISTANCE_COLUMNS = ["layer", "forget_distance", "retain_distance"]


@dataclass
class EvalReport:
    forget_rouge1: float
    retain_rouge1: float
    forget_mrr: float
    retain_mrr: float
    forget_thr: float
    retain_thr: float
    deviation_score: float
    control_score: float
    top_m_effective: int
    n_forget: int
    n_retain: int
    records: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=RECORD_COLUMNS), repr=False)

    def to_dict(self, include_records: bool = True) -> dict:
        out = {
            "forget_rouge1": self.forget_rouge1,
            "retain_rouge1": self.retain_rouge1,
            "forget_mrr": self.forget_mrr,
            "retain_mrr": self.retain_mrr,
            "forget_thr": self.forget_thr,
            "retain_thr": self.retain_thr,
            "deviation_score": self.deviation_score,
            "control_score": self.control_score,
            "top_m_effective": self.top_m_effective,
            "n_forget": self.n_forget,
            "n_retain": self.n_retain,
        }
        if include_records:
            out["records"] = self.records.to_dict(orient="records")
        return out

    def split_rows(self, checkpoint: str) -> list:
        # one flat CSV row per checkpoint x split
        return [
            {"checkpoint": checkpoint, "split": "forget", "rouge1": self.forget_rouge1,
             "mrr": self.forget_mrr, "thr": self.forget_thr,
             "deviation_score": self.deviation_score, "control_score": self.control_score},
            {"checkpoint": checkpoint, "split": "retain", "rouge1": self.retain_rouge1,
             "mrr": self.retain_mrr, "thr": self.retain_thr,
             "deviation_score": self.deviation_score, "control_score": self.control_score},
        ]


def _normalize(tokens):
    # lowercase, punctuation stripped
    return [t.lower() for t in tokens if any(ch.isalnum() for ch in t)]


def rouge1_recall(reference, hypothesis) -> float:
    ref = _normalize(reference)
    if not ref:
        raise MetricError("rouge1_recall needs a non-empty reference")
    overlap = Counter(ref) & Counter(_normalize(hypothesis))
    return sum(overlap.values()) / len(ref)


def rouge1_text(reference: str, hypothesis: str) -> float:
    return rouge1_recall(tokenize(reference), tokenize(hypothesis))


def mrr_from_ranks(ranks) -> float:
    return float(np.mean([1.0 / r for r in ranks])) if ranks else 0.0


def thr_from_ranks(ranks, top_m: int) -> float:
    if top_m < 1:
        raise MetricError(f"top_m must be >= 1, got {top_m}")
    return float(np.mean([r <= top_m for r in ranks])) if ranks else 0.0


def mrr(m, vocab, record, intervention=None) -> float:
    return mrr_from_ranks(answer_ranks(m, vocab, record, intervention))


def thr(m, vocab, record, top_m: int = 100, intervention=None) -> float:
    return thr_from_ranks(answer_ranks(m, vocab, record, intervention), top_m)


def deviation_score(forget_r1: float, retain_r1: float) -> float:
    for name, value in (("forget_r1", forget_r1), ("retain_r1", retain_r1)):
        if not 0.0 <= value <= 1.0:
            raise MetricError(f"{name} must lie in [0, 1], got {value}")
    return 100.0 * math.sqrt(forget_r1 ** 2 + (1.0 - retain_r1) ** 2)


def embed_text(m, vocab, text: str) -> np.ndarray:
    """Normalized bag-of-words mean of the model's token embeddings.

    Word order is ignored; empty text embeds to the zero vector.
    """
    ids = encode(vocab, text, add_specials=False)
    if not ids:
        return np.zeros(m.config.d_model, dtype=np.float64)
    rows = m.token_embedding.detach().numpy()[ids].astype(np.float64)
    mean = rows.mean(axis=0)
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 0 else np.zeros_like(mean)


def control_score(m, vocab, responses, desired) -> float:
    if not desired:
        raise MetricError("control_score needs at least one desired response")
    if not responses:
        return 0.0
    targets = np.stack([embed_text(m, vocab, d) for d in desired])
    scores = [float(np.max(targets @ embed_text(m, vocab, r))) for r in responses]
    return float(np.mean(scores))


def respond(m, vocab, question: str, max_new: int = 24, intervention=None) -> str:
    return decode(vocab, greedy_decode(m, prompt_ids(vocab, question), max_new, intervention))


def rouge1_over(m, vocab, records, max_new: int = 24, intervention=None, threads: int = 1):
    """Mean ROUGE1 recall of greedy answers over records, plus the responses."""
    def one(record):
        response = respond(m, vocab, record.question, max_new, intervention)
        return rouge1_text(record.answer, response), response

    results = _map(one, records, threads)
    scores = [r[0] for r in results]
    return (float(np.mean(scores)) if scores else 0.0), [r[1] for r in results]


def _map(fn, items, threads):
    items = list(items)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def evaluate(m, bundle, vocab, top_m: int = 100, max_new: int = 24, intervention=None,
             threads: int = 1) -> EvalReport:
    top_m_effective = min(top_m, vocab.size)
    if top_m_effective < top_m:
        logger.warning("top_m=%d clipped to vocab size %d", top_m, vocab.size)

    def one(item):
        split, record = item
        response = respond(m, vocab, record.question, max_new, intervention)
        ranks = answer_ranks(m, vocab, record, intervention)
        return {
            "split": split,
            "question": record.question,
            "answer": record.answer,
            "response": response,
            "rouge1": rouge1_text(record.answer, response),
            "mrr": mrr_from_ranks(ranks),
            "thr": thr_from_ranks(ranks, top_m_effective),
        }

    items = [("forget", r) for r in bundle.forget] + [("retain", r) for r in bundle.retain]
    records = pd.DataFrame(_map(one, items, threads), columns=RECORD_COLUMNS)

    def mean_of(split, column):
        values = records.loc[records["split"] == split, column]
        return float(values.mean()) if len(values) else 0.0

    forget_r1, retain_r1 = mean_of("forget", "rouge1"), mean_of("retain", "rouge1")
    forget_responses = records.loc[records["split"] == "forget", "response"].tolist()
    report = EvalReport(
        forget_rouge1=forget_r1,
        retain_rouge1=retain_r1,
        forget_mrr=mean_of("forget", "mrr"),
        retain_mrr=mean_of("retain", "mrr"),
        forget_thr=mean_of("forget", "thr"),
        retain_thr=mean_of("retain", "thr"),
        deviation_score=deviation_score(forget_r1, retain_r1),
        control_score=control_score(m, vocab, forget_responses, bundle.desired_responses),
        top_m_effective=top_m_effective,
        n_forget=len(bundle.forget),
        n_retain=len(bundle.retain),
        records=records,
    )
    logger.info("eval: forget ROUGE1 %.3f, retain ROUGE1 %.3f, DS %.2f, control %.3f",
                report.forget_rouge1, report.retain_rouge1, report.deviation_score, report.control_score)
    return report


def activation_distance(before, after, vocab, records) -> np.ndarray:
    """Mean L2 distance between residual_out(l) of two checkpoints for l = 1..L, over
    the prompt positions after BOS."""
    if before.config.n_layers != after.config.n_layers:
        raise MetricError(f"layer counts differ: {before.config.n_layers} and {after.config.n_layers}")
    if not records:
        return np.zeros(before.config.n_layers)
    per_record = []
    for record in records:
        ids = prompt_ids(vocab, record.question)
        _, a = forward(before, ids, capture=True)
        _, b = forward(after, ids, capture=True)
        gap = b.residual[1:, 1:].astype(np.float64) - a.residual[1:, 1:]
        per_record.append(np.linalg.norm(gap, axis=-1).mean(axis=1))
    return np.mean(per_record, axis=0)


def distance_frame(before, after, vocab, bundle) -> pd.DataFrame:
    forget = activation_distance(before, after, vocab, bundle.forget)
    retain = activation_distance(before, after, vocab, bundle.retain)
    frame = pd.DataFrame({"layer": range(1, len(forget) + 1), "forget_distance": forget,
                          "retain_distance": retain}, columns=DISTANCE_COLUMNS)
    for row in frame.itertuples():
        logger.debug("layer %d activation distance: forget %.4f retain %.4f",
                     row.layer, row.forget_distance, row.retain_distance)
    return frame

"""Activation-redirection unlearning by re-solving one MLP down-projection.

The forget set's MLP outputs at a layer are pushed along the unlearning vector
(reference mean minus forget mean of residual activations) while retain tokens keep
their outputs; the down-projection is refit to those targets by ridge least squares
or by gradient descent on the same objective.
"""

import copy
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from tqdm import tqdm

from functions.corpus import BOS, encode, prompt_ids
from functions.errors import (CheckpointFormatError, ConfigError, DivergenceError, LabError,
                              LayerError, NonConvergenceError)
from functions.linalg import (gram, gram_is_invertible, max_eigenvalue_sym, min_norm_solve,
                              pinv_solve, ridge_solve)
from functions.metrics import control_score, respond, rouge1_over
from functions.model import (append_stamp, check_layer, forward, get_down_projection,
                             set_down_projection, split_stamp)

logger = logging.getLogger(__name__)

UV_MAGIC = b"LNUV"
SOLVERS = ("closed_form", "sgd")
UV_POSITIONS = ("prompt_all", "prompt_last")
PROBLEM_POSITIONS = ("all", "prompt_all")
RETAIN_ROWS = ("all", "equal")


@dataclass(frozen=True)
class UnlearnConfig:
    layers: tuple = None
    top_k: int = 1
    solver: str = "closed_form"
    lam: float = None
    epochs: int = 200
    lr: float = None
    batch: int = 0
    seed: int = 0
    uv_positions: str = "prompt_all"
    problem_positions: str = "all"
    reference_class: str = "unknown_entity"
    max_new: int = 24
    threads: int = 1
    anchor_bos: bool = False
    uv_scale: float = None
    retain_rows: str = "all"

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.uv_positions not in UV_POSITIONS:
            raise ConfigError(f"uv_positions must be one of {UV_POSITIONS}, got {self.uv_positions!r}")
        if self.problem_positions not in PROBLEM_POSITIONS:
            raise ConfigError(f"problem_positions must be one of {PROBLEM_POSITIONS}, got {self.problem_positions!r}")
        if self.retain_rows not in RETAIN_ROWS:
            raise ConfigError(f"retain_rows must be one of {RETAIN_ROWS}, got {self.retain_rows!r}")
        if self.uv_scale is not None and self.uv_scale <= 0:
            raise ConfigError(f"uv_scale must be positive, got {self.uv_scale}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")


@dataclass(frozen=True)
class UnlearningVector:
    layer: int
    direction: np.ndarray = field(compare=False)
    n_ref: int = 0
    n_forget: int = 0
    scale: float = 1.0
    forget_norm: float = 0.0

    @property
    def shift(self) -> np.ndarray:
        """The vector actually added to forget MLP outputs."""
        return (self.scale * np.asarray(self.direction, dtype=np.float64)).astype(np.float32)


@dataclass
class RedirectionProblem:
    layer: int
    H: np.ndarray
    A_target: np.ndarray
    A_original: np.ndarray
    lam: float
    n_forget_rows: int
    n_retain_rows: int


@dataclass(frozen=True)
class LayerScore:
    layer: int
    s1: float
    s2: float

    @property
    def score(self) -> float:
        return self.s1 - self.s2

    def to_dict(self) -> dict:
        return {"layer": self.layer, "s1": self.s1, "s2": self.s2, "score": self.score}


@dataclass
class SgdResult:
    weights: np.ndarray
    loss_curve: list
    lr: float
    epochs_run: int


@dataclass
class LayerSolve:
    layer: int
    lam: float
    n_forget_rows: int
    n_retain_rows: int
    objective: float
    expected_norm_loss: float
    closed_form_objective: float
    forget_residual: float
    retain_residual: float
    loss_curve: list = field(default_factory=list)
    lr: float = None

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "lambda": self.lam,
            "n_forget_rows": self.n_forget_rows,
            "n_retain_rows": self.n_retain_rows,
            "objective": self.objective,
            "expected_norm_loss": self.expected_norm_loss,
            "closed_form_objective": self.closed_form_objective,
            "forget_residual": self.forget_residual,
            "retain_residual": self.retain_residual,
            "loss_curve": list(self.loss_curve),
            "lr": self.lr,
        }


@dataclass
class UnlearnReport:
    chosen_layers: list
    uv: dict
    solver: str
    final_loss: float
    epochs_run: int
    layers: list = field(default_factory=list)
    layer_scores: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "chosen_layers": list(self.chosen_layers),
            "solver": self.solver,
            "final_loss": self.final_loss,
            "epochs_run": self.epochs_run,
            "uv": {str(l): {"n_ref": v.n_ref, "n_forget": v.n_forget,
                            "norm": float(np.linalg.norm(v.direction)), "scale": v.scale,
                            "forget_norm": v.forget_norm,
                            "direction": [float(x) for x in v.direction]}
                   for l, v in sorted(self.uv.items())},
            "layers": [s.to_dict() for s in self.layers],
            "layer_scores": [s.to_dict() for s in self.layer_scores],
        }


@dataclass
class SequentialRound:
    round: int
    skipped: bool
    report: UnlearnReport = None
    forget_rouge1: dict = field(default_factory=dict)
    retain_rouge1: float = 0.0

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "skipped": self.skipped,
            "report": self.report.to_dict() if self.report else None,
            "forget_rouge1": {str(k): v for k, v in sorted(self.forget_rouge1.items())},
            "retain_rouge1": self.retain_rouge1,
        }


@dataclass
class SequentialResult:
    checkpoint: object
    rounds: list


def _position_slice(n_tokens, prompt_len, positions):
    # position 0 (BOS) is the same for every sequence and is never used
    if positions == "prompt_all":
        return slice(1, prompt_len)
    if positions == "prompt_last":
        return slice(prompt_len - 1, prompt_len)
    return slice(1, n_tokens)


def compute_uv(m, vocab, forget, reference, layer: int, positions: str = "prompt_all",
               scale=1.0) -> UnlearningVector:
    """Diff-in-means direction at residual_out(layer): mean(reference) − mean(forget).

    scale=None sizes the applied shift to the mean L2 norm of the forget residuals at
    the averaged positions; a number multiplies the direction as is.
    """
    check_layer(m, layer)
    if not forget or not reference:
        raise LabError("compute_uv needs non-empty forget and reference prompt sets")

    def activations(prompts):
        means, norms = [], []
        for question in prompts:
            ids = prompt_ids(vocab, question)
            _, trace = forward(m, ids, capture=True)
            acts = trace.residual_out(layer)[_position_slice(len(ids), len(ids), positions)]
            if not len(acts):
                raise LabError(f"prompt {question!r} has no token positions to average for {positions}")
            acts = acts.astype(np.float64)
            means.append(acts.mean(axis=0))
            norms.append(np.linalg.norm(acts, axis=1).mean())
        return np.mean(means, axis=0), float(np.mean(norms))

    ref_mean, _ = activations(reference)
    forget_mean, forget_norm = activations(forget)
    direction = ref_mean - forget_mean
    if scale is None:
        length = float(np.linalg.norm(direction))
        scale = forget_norm / length if length > 0 else 1.0
    logger.debug("layer %d UV norm %.4f, scale %.3f, forget residual norm %.4f",
                 layer, float(np.linalg.norm(direction)), scale, forget_norm)
    return UnlearningVector(layer=layer, direction=direction.astype(np.float32),
                            n_ref=len(reference), n_forget=len(forget),
                            scale=float(scale), forget_norm=forget_norm)


def _record_rows(m, vocab, record, layer, positions):
    prompt = prompt_ids(vocab, record.question)
    ids = prompt + encode(vocab, record.answer, add_specials=False)
    _, trace = forward(m, ids, capture=True)
    sl = _position_slice(len(ids), len(prompt), positions)
    return trace.downproj(layer)[sl], trace.mlp(layer)[sl]


def auto_lambda(H) -> float:
    g = gram(H)
    return 1e-3 * float(np.trace(g)) / g.shape[0]


def build_problem(m, vocab, forget, retain, uv: UnlearningVector, lam=None,
                  positions: str = "all", seed: int = 0, anchor_bos: bool = False,
                  retain_rows: str = "equal") -> RedirectionProblem:
    check_layer(m, uv.layer)
    layer = uv.layer

    forget_h, forget_a = [], []
    for record in forget:
        h, a = _record_rows(m, vocab, record, layer, positions)
        forget_h.append(h)
        forget_a.append(a)
    n = sum(len(h) for h in forget_h)

    retain_h, retain_a = [], []
    for record in retain:
        h, a = _record_rows(m, vocab, record, layer, positions)
        retain_h.append(h)
        retain_a.append(a)
    if retain_h:
        retain_h, retain_a = np.concatenate(retain_h), np.concatenate(retain_a)
        # as many retain rows as forget rows, sampled uniformly
        if retain_rows == "equal" and len(retain_h) > n:
            keep = np.sort(np.random.default_rng(seed).choice(len(retain_h), size=n, replace=False))
            retain_h, retain_a = retain_h[keep], retain_a[keep]
    else:
        retain_h = np.zeros((0, m.config.d_mlp), dtype=np.float32)
        retain_a = np.zeros((0, m.config.d_model), dtype=np.float32)
    if anchor_bos:
        # pin the BOS output so that it keeps its original value
        _, trace = forward(m, [BOS], capture=True)
        retain_h = np.concatenate([retain_h, trace.downproj(layer)[:1]])
        retain_a = np.concatenate([retain_a, trace.mlp(layer)[:1]])
    mm = len(retain_h)

    if n + mm == 0:
        raise LabError(f"redirection problem for layer {layer} has zero rows")

    parts_h = forget_h + [retain_h]
    parts_a = forget_a + [retain_a]
    H = np.concatenate(parts_h).astype(np.float32)
    A_original = np.concatenate(parts_a).astype(np.float32)
    A_target = A_original.copy()
    A_target[:n] += uv.shift

    if lam is None:
        lam = auto_lambda(H)
    logger.info("layer %d problem: %d forget rows, %d retain rows, p=%d, lambda=%.3e",
                layer, n, mm, H.shape[1], lam)
    return RedirectionProblem(layer=layer, H=H, A_target=A_target, A_original=A_original,
                              lam=float(lam), n_forget_rows=n, n_retain_rows=mm)


def solve_closed_form(prob: RedirectionProblem, w0=None):
    """Closed-form minimizer; the λ = 0 underdetermined case falls back to the
    interpolant closest to w0."""
    if prob.lam == 0:
        invertible, min_eig = gram_is_invertible(prob.H)
        if not invertible:
            logger.info("layer %d: singular Gram (min eigenvalue %.2e), solving the minimum-change interpolant",
                        prob.layer, min_eig)
            rows_independent, _ = gram_is_invertible(prob.H.T)
            if rows_independent:
                return min_norm_solve(prob.H, prob.A_target, w0)
            logger.info("layer %d: repeated problem rows, using a truncated pseudo-inverse", prob.layer)
            return pinv_solve(prob.H, prob.A_target, w0)
    return ridge_solve(prob.H, prob.A_target, prob.lam)


def lunar_losses(prob: RedirectionProblem, weights):
    """Squared Frobenius objective (ridge term included) and the mean row L2 distance."""
    r = prob.H.astype(np.float64) @ np.asarray(weights, dtype=np.float64) - prob.A_target
    w = np.asarray(weights, dtype=np.float64)
    squared = float(np.sum(r * r) + prob.lam * np.sum(w * w))
    expected_norm = float(np.mean(np.linalg.norm(r, axis=1)))
    return squared, expected_norm


def _row_residuals(prob, weights):
    r = prob.H.astype(np.float64) @ np.asarray(weights, dtype=np.float64) - prob.A_target
    norms = np.linalg.norm(r, axis=1)
    n = prob.n_forget_rows
    forget = float(norms[:n].mean()) if n else 0.0
    retain = float(norms[n:].mean()) if len(norms) > n else 0.0
    return forget, retain


def sgd_lr(prob: RedirectionProblem) -> float:
    # 0.5 / L with L = 2(λ_max(HᵀH) + λ), the gradient's Lipschitz constant
    g = gram(prob.H)
    try:
        lam_max = max_eigenvalue_sym(g)
    except NonConvergenceError as exc:
        logger.warning("power iteration did not converge; using estimate %.4e", exc.estimate)
        lam_max = exc.estimate
    return 0.5 / (2.0 * (lam_max + prob.lam))


def solve_sgd(prob: RedirectionProblem, epochs: int, lr=None, batch: int = 0, seed: int = 0,
              w0=None) -> SgdResult:
    H = prob.H.astype(np.float64)
    A = prob.A_target.astype(np.float64)
    N = H.shape[0]
    w = np.zeros((H.shape[1], A.shape[1])) if w0 is None else np.array(w0, dtype=np.float64)
    if lr is None:
        lr = sgd_lr(prob)
    batch = N if batch <= 0 or batch >= N else batch
    rng = np.random.default_rng(seed)

    loss_curve = []
    for epoch in tqdm(range(epochs), desc=f"sgd layer {prob.layer}", leave=False,
                      disable=not logger.isEnabledFor(logging.INFO)):
        order = np.arange(N) if batch == N else rng.permutation(N)
        for start in range(0, N, batch):
            idx = order[start:start + batch]
            hb = H[idx]
            grad = (N / len(idx)) * 2.0 * hb.T @ (hb @ w - A[idx]) + 2.0 * prob.lam * w
            w = w - lr * grad
        r = H @ w - A
        loss = float(np.sum(r * r) + prob.lam * np.sum(w * w))
        if not np.isfinite(loss):
            raise DivergenceError(f"SGD loss became {loss} at epoch {epoch + 1} (layer {prob.layer}, lr={lr:.3e})")
        loss_curve.append(loss)
        logger.debug("sgd layer %d epoch %d loss %.6e", prob.layer, epoch + 1, loss)
    return SgdResult(weights=w, loss_curve=loss_curve, lr=float(lr), epochs_run=epochs)


def install(m, layer: int, weights):
    out = copy.deepcopy(m)
    set_down_projection(out, layer, weights)
    return out


def solve_layer(m, vocab, bundle, layer: int, cfg: UnlearnConfig):
    """UV, problem and solution for one layer of m. Returns (weights, uv, LayerSolve)."""
    forget_prompts = [r.question for r in bundle.forget]
    uv = compute_uv(m, vocab, forget_prompts, bundle.reference_prompts(cfg.reference_class),
                    layer, cfg.uv_positions, cfg.uv_scale)
    prob = build_problem(m, vocab, bundle.forget, bundle.retain, uv, cfg.lam,
                         cfg.problem_positions, cfg.seed, cfg.anchor_bos, cfg.retain_rows)
    w_base = get_down_projection(m, layer)
    closed = solve_closed_form(prob, w0=w_base)
    closed_objective, _ = lunar_losses(prob, closed.weights)

    if cfg.solver == "closed_form":
        weights, loss_curve, lr = closed.weights, [], None
    else:
        # warm start from the current down-projection
        result = solve_sgd(prob, cfg.epochs, cfg.lr, cfg.batch, cfg.seed, w0=w_base)
        weights, loss_curve, lr = result.weights, result.loss_curve, result.lr

    objective, expected_norm = lunar_losses(prob, weights)
    forget_res, retain_res = _row_residuals(prob, weights)
    logger.info("layer %d solved (%s): objective %.4e, closed-form %.4e, retain residual %.4e",
                layer, cfg.solver, objective, closed_objective, retain_res)
    solve = LayerSolve(layer=layer, lam=prob.lam, n_forget_rows=prob.n_forget_rows,
                       n_retain_rows=prob.n_retain_rows, objective=objective,
                       expected_norm_loss=expected_norm, closed_form_objective=closed_objective,
                       forget_residual=forget_res, retain_residual=retain_res,
                       loss_curve=loss_curve, lr=lr)
    return weights, uv, solve


def _score_layers(m, vocab, bundle, candidate_layers, cfg):
    if not candidate_layers:
        raise LayerError("select_layer needs at least one candidate layer")
    for layer in candidate_layers:
        check_layer(m, layer)

    def one(layer):
        weights, uv, solve = solve_layer(m, vocab, bundle, layer, cfg)
        candidate = install(m, layer, weights)
        responses = [respond(candidate, vocab, r.question, cfg.max_new) for r in bundle.forget]
        s1 = control_score(candidate, vocab, responses, bundle.desired_responses)
        s2 = control_score(candidate, vocab, responses, bundle.unrelated_responses)
        return LayerScore(layer=layer, s1=s1, s2=s2), (weights, uv, solve)

    layers = list(candidate_layers)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(one, layers))
    else:
        results = [one(layer) for layer in layers]
    scores = sorted((r[0] for r in results), key=lambda s: (-s.score, s.layer))
    for s in scores:
        logger.info("layer %d: s1 %.3f s2 %.3f score %.3f", s.layer, s.s1, s.s2, s.score)
    return scores, {layer: r[1] for layer, r in zip(layers, results)}


def select_layer(m_base, vocab, bundle, candidate_layers, cfg: UnlearnConfig = UnlearnConfig()):
    scores, _ = _score_layers(m_base, vocab, bundle, candidate_layers, cfg)
    return scores


def unlearn(m, vocab, bundle, cfg: UnlearnConfig = UnlearnConfig()):
    if not bundle.forget:
        raise LabError("unlearn needs a non-empty forget set")

    scores = []
    if cfg.layers:
        chosen = sorted(set(cfg.layers))
        for layer in chosen:
            check_layer(m, layer)
        solved = {layer: solve_layer(m, vocab, bundle, layer, cfg) for layer in chosen}
    else:
        if cfg.top_k > m.config.n_layers:
            raise LayerError(f"top_k={cfg.top_k} exceeds the {m.config.n_layers} layers")
        scores, solved = _score_layers(m, vocab, bundle, range(1, m.config.n_layers + 1), cfg)
        chosen = sorted(s.layer for s in scores[:cfg.top_k])

    # every layer was solved against the input checkpoint
    out = copy.deepcopy(m)
    for layer in chosen:
        set_down_projection(out, layer, solved[layer][0])

    layer_solves = [solved[layer][2] for layer in chosen]
    report = UnlearnReport(
        chosen_layers=chosen,
        uv={layer: solved[layer][1] for layer in chosen},
        solver=cfg.solver,
        final_loss=float(sum(s.objective for s in layer_solves)),
        epochs_run=cfg.epochs if cfg.solver == "sgd" else 0,
        layers=layer_solves,
        layer_scores=scores,
    )
    logger.info("unlearned layers %s with %s, final loss %.4e", chosen, cfg.solver, report.final_loss)
    return out, report


def unlearn_sequential(m, vocab, rounds, cfg: UnlearnConfig = UnlearnConfig()) -> SequentialResult:
    """Apply unlearning requests in arrival order, re-checking every earlier round."""
    if len(rounds) < 2:
        raise LabError(f"sequential unlearning needs at least 2 rounds, got {len(rounds)}")
    running = m
    seen = set()
    history = []
    results = []
    for k, bundle in enumerate(rounds, 1):
        delta = tuple(r for r in bundle.forget if r not in seen)
        if not delta:
            logger.warning("round %d has no new forget records; checkpoint left unchanged", k)
            report = None
        else:
            running, report = unlearn(running, vocab, replace(bundle, forget=delta), cfg)
            seen.update(delta)
            history.append((k, delta))
        forget_r1 = {j: rouge1_over(running, vocab, records, cfg.max_new, threads=cfg.threads)[0]
                     for j, records in history}
        retain_r1, _ = rouge1_over(running, vocab, bundle.retain, cfg.max_new, threads=cfg.threads)
        results.append(SequentialRound(round=k, skipped=report is None, report=report,
                                       forget_rouge1=forget_r1, retain_rouge1=retain_r1))
        logger.info("round %d: forget ROUGE1 %s, retain ROUGE1 %.3f", k,
                    {j: round(v, 3) for j, v in forget_r1.items()}, retain_r1)
    return SequentialResult(checkpoint=running, rounds=results)


def export_uv(uv: UnlearningVector, path, stamp=None):
    """LNUV file: 16-byte header, one direction row, then a footer carrying the scale
    and any provenance stamp."""
    path = Path(path)
    direction = np.asarray(uv.direction, dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    body = struct.pack("<4sIII", UV_MAGIC, uv.layer, direction.shape[0], 1) + direction.tobytes()
    footer = {**(stamp or {}), "uv_scale": uv.scale, "n_ref": uv.n_ref, "n_forget": uv.n_forget}
    path.write_bytes(append_stamp(body, footer))
    return path


def load_uv(path) -> UnlearningVector:
    path = Path(path)
    data, footer = split_stamp(path.read_bytes(), path)
    if len(data) < 16 or data[:4] != UV_MAGIC:
        raise CheckpointFormatError(f"{path}: not an LNUV file")
    _, layer, dim, count = struct.unpack_from("<4sIII", data, 0)
    if len(data) != 16 + 4 * dim * count:
        raise CheckpointFormatError(f"{path}: expected {dim * count} values, file has {(len(data) - 16) // 4}")
    direction = np.frombuffer(data, dtype="<f4", offset=16).reshape(count, dim)[0].astype(np.float32)
    return UnlearningVector(layer=layer, direction=direction, n_ref=int(footer.get("n_ref", 0)),
                            n_forget=int(footer.get("n_forget", 0)),
                            scale=float(footer.get("uv_scale", 1.0)))

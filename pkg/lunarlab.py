"""lunarlab: train a toy transformer, unlearn a forget set by activation redirection,
then evaluate and attack the result.

    python lunarlab.py pipeline --config configs/default.cfg
    python lunarlab.py unlearn --set solver=sgd --set layers=2,3
"""

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import pandas as pd
import torch

from functions import attacks, cost, report
from functions.config import ExperimentConfig, load_config
from functions.corpus import build_corpus, export_corpus, import_corpus, split_rounds
from functions.errors import ConfigError, LabError
from functions.metrics import distance_frame, evaluate
from functions.model import ModelConfig, init_model, load_checkpoint, save_checkpoint, train
from functions.unlearn import UnlearnConfig, export_uv, load_uv, unlearn, unlearn_sequential

logger = logging.getLogger("lunarlab")

DEFAULT_CONFIG = Path(__file__).resolve().parent / "configs" / "default.cfg"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def unlearn_config(cfg: ExperimentConfig) -> UnlearnConfig:
    return UnlearnConfig(
        layers=cfg.layers, top_k=cfg.top_k, solver=cfg.solver, lam=cfg.lam,
        epochs=cfg.unlearn_epochs, lr=cfg.unlearn_lr, batch=cfg.unlearn_batch, seed=cfg.seed,
        uv_positions=cfg.uv_positions, problem_positions=cfg.problem_positions,
        reference_class=cfg.reference_class, max_new=cfg.max_new_tokens, threads=cfg.threads,
        uv_scale=cfg.uv_scale, retain_rows=cfg.retain_rows,
    )


def _out(cfg) -> Path:
    return Path(cfg.output_dir)


def _corpus(cfg):
    if not (_out(cfg) / "corpus.jsonl").exists():
        raise LabError(f"no corpus in {_out(cfg)}; run gen-data first")
    return import_corpus(_out(cfg))


def _checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise LabError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_gen_data(cfg, args):
    bundle, vocab = build_corpus(seed=cfg.seed, n_entity_pairs=cfg.n_entity_pairs,
                                 qa_per_pair=cfg.qa_per_pair, n_forget_pairs=cfg.n_forget_pairs,
                                 n_refusal_pairs=cfg.n_refusal_pairs,
                                 n_reference_pairs=cfg.n_reference_pairs)
    export_corpus(bundle, vocab, _out(cfg), stamp=report.stamp({}, cfg))


def cmd_train(cfg, args):
    bundle, vocab = _corpus(cfg)
    model_config = ModelConfig(d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                               d_mlp=cfg.d_mlp, vocab_size=vocab.size, max_seq_len=cfg.max_seq_len,
                               seed=cfg.seed)
    records = bundle.forget + bundle.retain + bundle.refusal_training
    result = train(init_model(model_config), vocab, records, cfg.train_epochs, cfg.train_lr,
                   cfg.train_batch, cfg.train_momentum, cfg.seed)
    if result.diverged:
        logger.warning("training diverged; saving the last good checkpoint")
    save_checkpoint(result.checkpoint, _out(cfg) / "base.ckpt", stamp=report.stamp({}, cfg))
    report.write_csv(_out(cfg) / "train_loss.csv",
                     pd.DataFrame({"epoch": range(1, len(result.loss_curve) + 1), "loss": result.loss_curve}), cfg)


def cmd_unlearn(cfg, args):
    bundle, vocab = _corpus(cfg)
    base = _checkpoint(_out(cfg) / "base.ckpt")
    unlearned, unlearn_report = unlearn(base, vocab, bundle, unlearn_config(cfg))
    save_checkpoint(unlearned, _out(cfg) / "unlearned.ckpt", stamp=report.stamp({}, cfg))
    for layer, uv in unlearn_report.uv.items():
        export_uv(uv, _out(cfg) / f"uv_layer{layer}.bin", stamp=report.stamp({}, cfg))
    report.write_json(_out(cfg) / "unlearn_report.json", unlearn_report.to_dict(), cfg)


def cmd_eval(cfg, args):
    bundle, vocab = _corpus(cfg)
    if args.checkpoint:
        targets = {Path(args.checkpoint).stem: Path(args.checkpoint)}
    else:
        targets = {name: _out(cfg) / f"{name}.ckpt" for name in ("base", "unlearned")
                   if (_out(cfg) / f"{name}.ckpt").exists()}
        if not targets:
            raise LabError(f"checkpoint not found: {_out(cfg) / 'base.ckpt'}")
    split_rows, record_frames = [], []
    for name, path in targets.items():
        ev = evaluate(_checkpoint(path), bundle, vocab, cfg.top_m, cfg.max_new_tokens, threads=cfg.threads)
        report.write_json(_out(cfg) / f"eval_{name}.json", ev.to_dict(), cfg)
        split_rows += ev.split_rows(name)
        record_frames.append(ev.records.assign(checkpoint=name))
    report.write_csv(_out(cfg) / "eval.csv", pd.DataFrame(split_rows), cfg)
    report.write_csv(_out(cfg) / "eval_records.csv", pd.concat(record_frames, ignore_index=True), cfg)
    if set(targets) == {"base", "unlearned"}:
        distances = distance_frame(_checkpoint(targets["base"]), _checkpoint(targets["unlearned"]), vocab, bundle)
        report.write_json(_out(cfg) / "activation_distance.json",
                          {"layers": [{"layer": int(r.layer), "forget_distance": float(r.forget_distance),
                                       "retain_distance": float(r.retain_distance)}
                                      for r in distances.itertuples()]}, cfg)
        report.write_csv(_out(cfg) / "activation_distance.csv", distances, cfg)


def cmd_attack(cfg, args):
    bundle, vocab = _corpus(cfg)
    m = _checkpoint(_out(cfg) / "unlearned.ckpt")
    chosen = report.read_json(_out(cfg) / "unlearn_report.json")["chosen_layers"]
    uvs = {layer: load_uv(_out(cfg) / f"uv_layer{layer}.bin") for layer in chosen}
    results, lens_rows, lens_summary = attacks.run_attacks(
        m, vocab, bundle, uvs, layer_skip_enabled=cfg.attack_layer_skip, reverse=cfg.attack_reverse,
        quant_bits=cfg.attack_quant_bits, paraphrase=cfg.attack_paraphrase, lens=cfg.attack_logit_lens,
        lens_k=cfg.lens_k, max_new=cfg.max_new_tokens, threads=cfg.threads)
    report.write_json(_out(cfg) / "attacks.json",
                      {"results": [r.to_dict() for r in results], "logit_lens": lens_summary}, cfg)
    report.write_csv(_out(cfg) / "attacks.csv", attacks.results_frame(results), cfg)
    if lens_rows:
        report.write_text(_out(cfg) / "lens.txt", attacks.render_lens(lens_rows) + "\n", cfg)
    print(attacks.results_table(results))


def _sequential_bundle(bundle, rounds):
    """Promote retain entity pairs into the forget set until every round gets one."""
    forget_pairs = list(dict.fromkeys(r.entity_pair for r in bundle.forget))
    missing = rounds - len(forget_pairs)
    if missing <= 0:
        return bundle
    retain_pairs = list(dict.fromkeys(r.entity_pair for r in bundle.retain))
    if missing >= len(retain_pairs):
        raise ConfigError(f"sequential_rounds={rounds} needs more entity pairs than the corpus has")
    promoted = set(retain_pairs[:missing])
    logger.info("sequential: promoting %d retain entity pair(s) to forget", missing)
    return replace(bundle,
                   forget=bundle.forget + tuple(r for r in bundle.retain if r.entity_pair in promoted),
                   retain=tuple(r for r in bundle.retain if r.entity_pair not in promoted))


def cmd_sequential(cfg, args):
    bundle, vocab = _corpus(cfg)
    base = _checkpoint(_out(cfg) / "base.ckpt")
    rounds = split_rounds(_sequential_bundle(bundle, cfg.sequential_rounds), cfg.sequential_rounds)
    result = unlearn_sequential(base, vocab, rounds, unlearn_config(cfg))
    report.write_json(_out(cfg) / "sequential.json", {"rounds": [r.to_dict() for r in result.rounds]}, cfg)


def cmd_cost(cfg, args):
    inputs = cost.preset(cfg.cost_preset)
    payload = {"preset": cfg.cost_preset, "inputs": asdict(inputs), **cost.estimate(inputs).to_dict()}
    report.write_json(_out(cfg) / "cost.json", payload, cfg)
    print(report.dumps(payload), end="")


def cmd_report(cfg, args):
    _, summary = report.merge_reports(_out(cfg), cfg)
    print(report.summary_table(summary))


def cmd_pipeline(cfg, args):
    args.checkpoint = None
    for stage in (cmd_gen_data, cmd_train, cmd_unlearn, cmd_eval, cmd_attack, cmd_cost, cmd_report):
        logger.info("stage %s", stage.__name__[4:].replace("_", "-"))
        stage(cfg, args)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic QA corpus"),
    "train": (cmd_train, "train the base model on the corpus"),
    "unlearn": (cmd_unlearn, "unlearn the forget set from the base model"),
    "eval": (cmd_eval, "evaluate base and unlearned checkpoints"),
    "attack": (cmd_attack, "run the robustness attacks on the unlearned model"),
    "sequential": (cmd_sequential, "unlearn forget sets arriving in sequential rounds"),
    "cost": (cmd_cost, "analytical cost comparison against adapter fine-tuning"),
    "report": (cmd_report, "merge stage artifacts into report.json and summary.csv"),
    "pipeline": (cmd_pipeline, "gen-data, train, unlearn, eval, attack, cost, report"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lunarlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help=f"flat key = value config file (default {DEFAULT_CONFIG.name} when present)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        if name == "eval":
            p.add_argument("--checkpoint", default=None, help="evaluate this checkpoint only")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)

    try:
        path = args.config or (DEFAULT_CONFIG if DEFAULT_CONFIG.exists() else None)
        cfg = load_config(path, args.overrides)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG

    torch.set_num_threads(cfg.threads)
    handler = COMMANDS[args.command][0]
    try:
        handler(cfg, args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (LabError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

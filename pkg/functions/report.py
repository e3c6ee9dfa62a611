"""Artifact emission: key-sorted JSON, RFC-4180 CSV and the merged summary table."""

import json
import logging
from pathlib import Path

import pandas as pd

from functions.errors import LabError
from functions.metrics import deviation_score
from functions.tables import PRECISION_TWO, PRECISION_THREE, render

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["row", "forget_rouge1", "retain_rouge1", "deviation_score", "control_score"]

# Sources merged into report.json, keyed by artifact file name
REPORT_SOURCES = {
    "eval_base": "eval_base.json",
    "eval_unlearned": "eval_unlearned.json",
    "unlearn": "unlearn_report.json",
    "activation_distance": "activation_distance.json",
    "attacks": "attacks.json",
    "sequential": "sequential.json",
    "cost": "cost.json",
}

summary_formatter = {
    "row": ("Model / attack", {}),
    "forget_rouge1": ("Forget ROUGE1", PRECISION_THREE),
    "retain_rouge1": ("Retain ROUGE1", PRECISION_THREE),
    "deviation_score": ("DS", PRECISION_TWO),
    "control_score": ("Control", PRECISION_THREE),
}


def stamp(payload: dict, config) -> dict:
    return {**payload, "config_hash": config.config_hash, "seed": config.seed}


def dumps(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, payload: dict, config) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(stamp(payload, config)), encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LabError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise LabError(f"{path} is not valid JSON: {exc}") from exc


def stamp_line(config) -> str:
    """Provenance header for plain-text artifacts."""
    return f"# config_hash={config.config_hash} seed={config.seed}\n"


def write_text(path, text: str, config) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(stamp_line(config) + text, encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def write_csv(path, frame: pd.DataFrame, config=None) -> Path:
    """RFC-4180 CSV; with a config every row carries config_hash and seed columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if config is not None:
        frame = frame.assign(config_hash=config.config_hash, seed=config.seed)
    frame.to_csv(path, index=False, lineterminator="\r\n", float_format="%.6g")
    logger.info("wrote %s", path)
    return path


def summary_frame(merged: dict) -> pd.DataFrame:
    """One row per evaluated checkpoint and per attack, in the aggregate-table layout."""
    rows = []
    for key, label in (("eval_base", "base"), ("eval_unlearned", "unlearned")):
        ev = merged.get(key)
        if ev:
            rows.append({"row": label, "forget_rouge1": ev["forget_rouge1"],
                         "retain_rouge1": ev["retain_rouge1"],
                         "deviation_score": ev["deviation_score"], "control_score": ev["control_score"]})
    for attack in (merged.get("attacks") or {}).get("results", []):
        f, r = attack["forget_rouge1_post"], attack["retain_rouge1_post"]
        rows.append({"row": f"attack {attack['attack']}", "forget_rouge1": f, "retain_rouge1": r,
                     "deviation_score": deviation_score(f, r), "control_score": None})
    for rnd in (merged.get("sequential") or {}).get("rounds", []):
        for seen, value in rnd["forget_rouge1"].items():
            rows.append({"row": f"sequential round {rnd['round']} (forget set {seen})",
                         "forget_rouge1": value, "retain_rouge1": rnd["retain_rouge1"],
                         "deviation_score": deviation_score(value, rnd["retain_rouge1"]),
                         "control_score": None})
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def merge_reports(output_dir, config):
    """Collect the per-stage JSON artifacts into report.json and summary.csv."""
    output_dir = Path(output_dir)
    merged = {}
    for key, name in REPORT_SOURCES.items():
        path = output_dir / name
        if path.exists():
            payload = read_json(path)
            payload.pop("config_hash", None)
            payload.pop("seed", None)
            merged[key] = payload
    if not merged:
        raise LabError(f"no stage artifacts found in {output_dir}")
    # per-record rows stay in eval_records.csv
    for key in ("eval_base", "eval_unlearned"):
        if key in merged:
            merged[key].pop("records", None)

    summary = summary_frame(merged)
    records = summary.astype(object).where(summary.notna(), None).to_dict(orient="records")
    write_json(output_dir / "report.json", {"stages": merged, "summary": records},
               config)
    write_csv(output_dir / "summary.csv", summary, config)
    return merged, summary


def summary_table(summary: pd.DataFrame) -> str:
    return render(summary, summary_formatter)

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from behavior_dnn import __version__
from behavior_dnn.core.regime_trainer import CVReport, RegimeResult

logger = logging.getLogger(__name__)

REGIME_TITLES = {
    "dense": "Dense DNN",
    "fusion": "Fusion",
    "sd": "SD-DNN",
    "sj": "SJ-DNN",
    "sd_init": "SD-init DNN",
}
GROUP_TITLES = {
    "pitch": "Pitch",
    "mfccs": "MFCCs",
    "mfbs": "MFBs",
    "intensity": "Intensity",
    "jitter_shimmer": "Jitter & Shimmer",
}
# Session decisions: one threshold per fold and regime, shared by every test session of the fold.
THRESHOLD_POLICY = {
    "scope": "per_fold_global",
    "fitted_on": "training_session_scores",
    "rule": "Q > T",
    "tie_break": "smallest",
    "note": "Session scores are compared against a single threshold fitted on the fold's training sessions; "
            "a threshold specific to each test session is not estimated.",
}


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def regime_title(regime: str) -> str:
    if regime.startswith("subnet:"):
        group = regime.split(":", 1)[1]
        if group.startswith("subset_"):
            return "Subset " + group.split("_", 1)[1]
        return GROUP_TITLES.get(group, group)
    return REGIME_TITLES.get(regime, regime)


def sha256_of(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def result_to_dict(result: RegimeResult) -> dict:
    document = asdict(result)
    document["accuracy"] = _finite_or_none(result.accuracy)
    for fold in document["folds"]:
        fold["loss_curve"] = [_finite_or_none(v) for v in fold["loss_curve"]]
    return document


def report_to_dict(report: CVReport) -> dict:
    training = report.config.to_dict()
    # cv evaluates the regimes listed in results, not training.regime
    training.pop("regime")
    return {
        "version": __version__,
        "training": training,
        "threshold_policy": dict(THRESHOLD_POLICY),
        "feature_groups": [{"name": name, "indices": list(indices)} for name, indices in report.assignment.as_pairs()],
        "results": [result_to_dict(r) for r in report.results],
        "skipped_folds": list(report.skipped_folds),
        "summary": list(report.summary_log),
    }


def _format_cell(result: Optional[RegimeResult]) -> str:
    if result is None or not math.isfinite(result.accuracy):
        return "-"
    return f"{100.0 * result.accuracy:.2f}"


def _render(title: str, columns: Sequence[str], results: Sequence[RegimeResult]) -> List[str]:
    cells: Dict[tuple, RegimeResult] = {(r.code, r.gender, r.regime): r for r in results}
    rows = list(dict.fromkeys((r.code, r.gender) for r in results))
    header = ["Behavior", "Gender"] + [regime_title(c) for c in columns]
    body = [[code, gender] + [_format_cell(cells.get((code, gender, c))) for c in columns] for code, gender in rows]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]

    def line(row):
        return "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()

    rule = "-" * len(line(header))
    return [title, rule, line(header), rule] + [line(row) for row in body] + [rule, ""]


def render_tables(results: Sequence[RegimeResult]) -> str:
    """
    Classification accuracy (%) tables.

    The first table lists every non-subnet regime per behavior code; when subnets were evaluated,
    a second table compares each standalone subnet with their output-level fusion and the SD-DNN.
    """
    regimes = list(dict.fromkeys(r.regime for r in results))
    main_columns = [r for r in regimes if not r.startswith("subnet:")]
    split_columns = [r for r in regimes if r.startswith("subnet:")]
    lines: List[str] = []
    if main_columns:
        lines += _render("Classification accuracy (%) per behavior and regime", main_columns, results)
    if split_columns:
        split_columns += [r for r in ("fusion", "sd") if r in regimes]
        lines += _render("Classification accuracy (%) per feature group", split_columns, results)
    return "\n".join(lines)


class SummaryReporter:
    """Writes the cross-validation report JSON, the accuracy tables and the run manifest."""

    def __init__(self, config: dict, summary_log: List[str], seed: int, start_time: float,
                 inputs: Optional[Dict[str, Path]] = None):
        self.config = config
        self.summary_log = summary_log
        self.seed = seed
        self.start_time = start_time
        self.inputs = inputs or {}

    def write_report(self, report: CVReport, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        document = report_to_dict(report)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2, sort_keys=True, allow_nan=False)
            f.write("\n")
        logger.info(f"📝 Cross-validation report saved to {path}")
        return path

    def write_tables(self, report: CVReport, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            f.write(render_tables(report.results))
        logger.info(f"📝 Accuracy tables saved to {path}")
        return path

    def write_manifest(self, path, outputs: Optional[Dict[str, Path]] = None) -> Path:
        """Run manifest: config, seed, sha256 of every input and output file, wall-clock seconds."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        outputs = outputs or {}
        document = {
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "inputs": {name: {"path": str(p), "sha256": sha256_of(p)} for name, p in sorted(self.inputs.items())},
            "outputs": {name: {"path": str(p), "sha256": sha256_of(p)} for name, p in sorted(outputs.items())},
            "summary": list(self.summary_log),
            "elapsed_seconds": round(time.time() - self.start_time, 3),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        logger.info(f"📝 Run manifest saved to {path}")
        return path

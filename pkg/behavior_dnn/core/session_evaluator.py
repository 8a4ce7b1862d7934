"""Frame scores -> session confidence -> thresholded decision; plus behavior trajectories."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import gmean

from behavior_dnn.core.errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

DEFAULT_CLAMP_EPS = 1e-6


@dataclass
class SessionScore:
    session_id: str
    frame_scores: np.ndarray
    frame_times: np.ndarray
    aggregate: float

    @property
    def length(self) -> int:
        return len(self.frame_scores)


@dataclass(frozen=True)
class ThresholdModel:
    threshold: float
    training_error: float


def aggregate_session(frame_scores, clamp_eps: float = DEFAULT_CLAMP_EPS) -> float:
    """
    Session confidence Q = exp(mean(log q)), the geometric mean of the clamped frame scores.

    Scores are clamped to [eps, 1 - eps] before the logarithm.

    Raises:
        InputError: if there are no frame scores
    """
    q = np.asarray(frame_scores, dtype=np.float64).ravel()
    if q.size == 0:
        raise InputError("Cannot aggregate a session with no frame scores")
    clamped = np.clip(q, clamp_eps, 1.0 - clamp_eps)
    # exp/log round-off can step a hair outside [min, max]
    return float(np.clip(gmean(clamped), clamped.min(), clamped.max()))


def score_session(session_id: str, frame_scores, frame_times,
                  clamp_eps: float = DEFAULT_CLAMP_EPS) -> SessionScore:
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    frame_times = np.asarray(frame_times, dtype=np.float64)
    order = np.argsort(frame_times, kind="stable")
    return SessionScore(session_id, frame_scores[order], frame_times[order],
                        aggregate_session(frame_scores, clamp_eps))


def _error_rate(scores: np.ndarray, labels: np.ndarray, threshold: float) -> float:
    return float(np.mean((scores > threshold).astype(int) != labels))


def threshold_candidates(scores) -> np.ndarray:
    """Midpoints between consecutive distinct scores plus one sentinel below and one above."""
    distinct = np.unique(np.asarray(scores, dtype=np.float64))
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate([[distinct[0] / 2.0], midpoints, [(distinct[-1] + 1.0) / 2.0]])


def fit_threshold(training: Sequence[Tuple[float, int]]) -> ThresholdModel:
    """
    Pick the threshold with the minimum training error (predict 1 iff Q > T).

    Ties go to the smallest candidate.

    Raises:
        ConfigurationError: if the training set holds only one class
    """
    if not training:
        raise ConfigurationError("Cannot fit a threshold on zero sessions")
    scores = np.array([q for q, _ in training], dtype=np.float64)
    labels = np.array([int(label) for _, label in training])
    if len(np.unique(labels)) < 2:
        raise ConfigurationError("Threshold fitting needs both classes in the training sessions")

    best = None
    for candidate in threshold_candidates(scores):
        error = _error_rate(scores, labels, candidate)
        if best is None or error < best.training_error:
            best = ThresholdModel(float(candidate), error)
    return best


def classify(score: float, model: ThresholdModel) -> int:
    return int(score > model.threshold)


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if predictions.size != labels.size:
        raise InputError(f"{predictions.size} predictions for {labels.size} labels")
    if predictions.size == 0:
        raise InputError("Accuracy over zero sessions is undefined")
    return float(np.mean(predictions == labels))


def build_trajectory(scores_by_code: Mapping[str, SessionScore]) -> pd.DataFrame:
    """
    Align per-code frame scores on their frame times: one row per time, one column per code.

    Raises:
        InputError: if any code's frame times are not strictly increasing
    """
    if not scores_by_code:
        raise InputError("A trajectory needs at least one behavior code")
    table: Optional[pd.DataFrame] = None
    for code, score in scores_by_code.items():
        times = np.asarray(score.frame_times, dtype=np.float64)
        if np.any(np.diff(times) <= 0):
            raise InputError(f"Frame times for {code!r} are not strictly increasing")
        column = pd.DataFrame({"time": times, code: np.asarray(score.frame_scores, dtype=np.float64)})
        table = column if table is None else table.merge(column, on="time", how="outer")
    return table.sort_values("time", kind="stable").reset_index(drop=True)


def emit_trajectory(scores_by_code: Mapping[str, SessionScore], path) -> pd.DataFrame:
    """Write ``time,<code1>,<code2>,...``; a code without a frame at some time leaves a blank cell."""
    table = build_trajectory(scores_by_code)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, na_rep="")
    logger.info(f"📝 Trajectory with {len(table)} rows and {len(scores_by_code)} codes saved to {path}")
    return table


def session_scores(frame_scores, session_ids, frame_times,
                   clamp_eps: float = DEFAULT_CLAMP_EPS) -> Dict[str, SessionScore]:
    """Group frame-level scores by session and aggregate each group."""
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    session_ids = np.asarray(session_ids, dtype=object)
    frame_times = np.asarray(frame_times, dtype=np.float64)
    grouped: Dict[str, List[int]] = {}
    for row, session_id in enumerate(session_ids):
        grouped.setdefault(session_id, []).append(row)
    return {
        session_id: score_session(session_id, frame_scores[rows], frame_times[rows], clamp_eps)
        for session_id, rows in grouped.items()
    }

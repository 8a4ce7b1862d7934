import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from behavior_dnn.core.errors import ConfigurationError, InputError
from behavior_dnn.core.feature_extractor import (FeatureLayout, FrameTable, LLDSegment, LLDStream,
                                                  write_layout, write_lld_csv)

logger = logging.getLogger(__name__)

MANIFEST_ID_COLUMNS = ["session_id", "couple_id", "speaker_id", "gender"]
RATING_RANGE = (1.0, 9.0)


class Gender(Enum):
    FEMALE = "F"
    MALE = "M"


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    couple_id: str
    speaker_id: str
    gender: Gender
    ratings: Dict[str, float]
    binary_label: Optional[int] = None

    def __post_init__(self):
        low, high = RATING_RANGE
        for code, rating in self.ratings.items():
            if not low <= rating <= high:
                raise InputError(f"Session {self.session_id}: rating {rating} for {code!r} is outside [1, 9]")


@dataclass(frozen=True)
class ExtremeSelection:
    sessions: Tuple[SessionRecord, ...]
    degenerate: bool = False

    def labels(self) -> Dict[str, int]:
        return {s.session_id: s.binary_label for s in self.sessions}


@dataclass(frozen=True)
class Fold:
    held_out_couple_id: str
    train_session_ids: Tuple[str, ...]
    test_session_ids: Tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: Tuple[Fold, ...]


@dataclass
class TrainingPairs:
    """Frame inputs with scalar MSE targets; session and couple ids are the lineage tags of every row."""
    inputs: np.ndarray
    targets: np.ndarray
    session_ids: np.ndarray
    couple_ids: np.ndarray

    def __len__(self):
        return len(self.targets)

    def subset(self, rows) -> "TrainingPairs":
        return TrainingPairs(self.inputs[rows], self.targets[rows], self.session_ids[rows], self.couple_ids[rows])


@dataclass(frozen=True)
class SynthConfig:
    num_couples: int = 30
    sessions_per_couple: int = 2
    lld_dim: int = 28
    hop: float = 0.01
    mean_speech_duration: float = 45.0
    effect_size: float = 0.5
    nuisance_scale: float = 0.5
    noise_scale: float = 1.0
    effect_columns: int = 3
    codes: Tuple[str, ...] = ("acceptance", "negativity", "blame")
    seed: int = 0

    def __post_init__(self):
        if self.num_couples < 1 or self.sessions_per_couple < 1:
            raise ConfigurationError("Synthetic corpus needs at least one couple and one session")
        if self.lld_dim < 1 or self.mean_speech_duration <= 0 or self.hop <= 0:
            raise ConfigurationError("Synthetic corpus needs positive lld_dim, hop and speech duration")
        if min(self.effect_size, self.nuisance_scale, self.noise_scale) < 0:
            raise ConfigurationError("Synthetic scales must be >= 0")
        if not 1 <= self.effect_columns <= self.lld_dim:
            raise ConfigurationError(f"effect_columns must lie in [1, {self.lld_dim}]")
        if not self.codes:
            raise ConfigurationError("Synthetic corpus needs at least one behavior code")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SynthConfig":
        known = {k: v for k, v in mapping.items() if k in cls.__dataclass_fields__}
        unknown = set(mapping) - set(known)
        if unknown:
            raise ConfigurationError(f"Unknown synth settings {sorted(unknown)}")
        if "codes" in known:
            known["codes"] = tuple(known["codes"])
        try:
            return cls(**known)
        except TypeError as e:
            raise ConfigurationError(f"Bad synth settings: {e}") from e


@dataclass
class SyntheticCorpus:
    streams: List[LLDStream]
    records: List[SessionRecord]
    layout: FeatureLayout
    effect_columns: Dict[str, List[int]] = field(default_factory=dict)


def select_extremes(sessions: Sequence[SessionRecord], code: str, per_class: int) -> ExtremeSelection:
    """
    Label the per_class lowest-rated sessions 0 and the per_class highest-rated sessions 1.

    Sessions are ordered by (rating, session_id), so ties at either cut resolve by session_id.

    Raises:
        ConfigurationError: if fewer than 2 * per_class sessions carry a rating for ``code``
    """
    rated = [s for s in sessions if code in s.ratings]
    if per_class < 1 or len(rated) < 2 * per_class:
        raise ConfigurationError(
            f"Need {2 * per_class} sessions rated for {code!r} to pick {per_class} per class, have {len(rated)}")
    ordered = sorted(rated, key=lambda s: (s.ratings[code], s.session_id))
    low = [replace(s, binary_label=0) for s in ordered[:per_class]]
    high = [replace(s, binary_label=1) for s in ordered[-per_class:]]
    degenerate = low[-1].ratings[code] >= high[0].ratings[code]
    if degenerate:
        logger.warning(f"⚠️ Extreme selection for {code!r} is degenerate: the two classes share rating "
                       f"{high[0].ratings[code]}")
    return ExtremeSelection(tuple(low + high), degenerate)


def make_folds(labeled: Sequence[SessionRecord]) -> FoldPlan:
    """One fold per couple: that couple's sessions are tested, everyone else's train."""
    couples = sorted({s.couple_id for s in labeled})
    folds = []
    for couple in couples:
        test = tuple(s.session_id for s in labeled if s.couple_id == couple)
        train = tuple(s.session_id for s in labeled if s.couple_id != couple)
        folds.append(Fold(couple, train, test))
    return FoldPlan(tuple(folds))


def label_frames(frames: FrameTable, labels: Dict[str, int],
                 couples: Optional[Dict[str, str]] = None) -> TrainingPairs:
    """
    Give every frame its session's binary label as a 0.0/1.0 target.

    Raises:
        InputError: if a frame belongs to a session without a label
    """
    unlabeled = sorted(set(frames.session_ids.tolist()) - set(labels))
    if unlabeled:
        raise InputError(f"Frames from unlabeled sessions: {unlabeled[:5]}")
    couples = couples or {}
    targets = np.array([float(labels[s]) for s in frames.session_ids], dtype=np.float64)
    couple_ids = np.array([couples.get(s, "") for s in frames.session_ids], dtype=object)
    return TrainingPairs(frames.values.copy(), targets, frames.session_ids.copy(), couple_ids)


def _segments(rng: np.random.Generator, total: float, hop: float) -> List[Tuple[float, int]]:
    """(start, vector count) of speech segments separated by silences."""
    segments = []
    clock = float(rng.uniform(0.0, 2.0))
    speech = 0.0
    while speech < total:
        duration = float(rng.uniform(1.0, 8.0))
        count = max(1, int(round(duration / hop)))
        segments.append((round(clock, 6), count))
        speech += count * hop
        clock += count * hop + float(rng.uniform(0.3, 3.0))
    return segments


def synth_corpus(config: SynthConfig) -> SyntheticCorpus:
    """
    Gaussian LLD streams whose designated columns carry the behavior signal.

    Every speaker has a fixed offset and a fixed skew on all columns (speaker nuisance).
    For each code, a designated column subset receives a positively skewed component
    of amplitude (score - 5) * effect_size, so its mean shifts proportionally to that amount
    and the skew direction survives per-session normalization.
    """
    rng = np.random.default_rng(config.seed)
    layout = FeatureLayout.default(config.lld_dim)
    columns = rng.permutation(config.lld_dim)
    effect_columns = {}
    for k, code in enumerate(config.codes):
        start = (k * config.effect_columns) % config.lld_dim
        chosen = [int(columns[(start + i) % config.lld_dim]) for i in range(config.effect_columns)]
        effect_columns[code] = sorted(chosen)

    streams, records = [], []
    for c in range(config.num_couples):
        couple_id = f"c{c:03d}"
        speakers = {}
        for gender in Gender:
            speakers[gender] = (
                rng.normal(0.0, config.nuisance_scale, config.lld_dim),
                rng.normal(0.0, config.nuisance_scale, config.lld_dim),
            )
        for n in range(config.sessions_per_couple):
            for gender in Gender:
                offset, skew = speakers[gender]
                session_id = f"{couple_id}_s{n}_{gender.value}"
                speaker_id = f"{couple_id}_{gender.value}"
                ratings = {code: float(np.round(rng.uniform(*RATING_RANGE), 3)) for code in config.codes}
                amplitude = skew.copy()
                for code in config.codes:
                    amplitude[effect_columns[code]] += (ratings[code] - 5.0) * config.effect_size

                total = config.mean_speech_duration * float(rng.uniform(0.8, 1.2))
                segments = []
                for index, (start, count) in enumerate(_segments(rng, total, config.hop)):
                    noise = rng.normal(0.0, config.noise_scale, (count, config.lld_dim))
                    spikes = rng.exponential(1.0, (count, config.lld_dim))
                    vectors = offset + noise + amplitude * spikes
                    segments.append(LLDSegment(f"seg{index:03d}", start, vectors))
                streams.append(LLDStream(session_id, couple_id, speaker_id, config.hop, segments, layout))
                records.append(SessionRecord(session_id, couple_id, speaker_id, gender, ratings))
    return SyntheticCorpus(streams, records, layout, effect_columns)


def write_manifest(records: Sequence[SessionRecord], path, codes: Sequence[str]):
    """CSV ``session_id,couple_id,speaker_id,gender,<code>...``; a ``.json`` path writes the JSON form."""
    path = Path(path)
    if path.suffix == ".json":
        document = [{"session_id": r.session_id, "couple_id": r.couple_id, "speaker_id": r.speaker_id,
                     "gender": r.gender.value, "ratings": {c: r.ratings[c] for c in codes if c in r.ratings}}
                    for r in records]
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2)
            f.write("\n")
        return
    rows = [[r.session_id, r.couple_id, r.speaker_id, r.gender.value] + [r.ratings.get(c, np.nan) for c in codes]
            for r in records]
    pd.DataFrame(rows, columns=MANIFEST_ID_COLUMNS + list(codes)).to_csv(path, index=False)


def _gender(value, session_id) -> Gender:
    try:
        return Gender(str(value).strip().upper()[:1])
    except ValueError as e:
        raise InputError(f"Session {session_id}: unknown gender {value!r}") from e


def read_manifest(path) -> List[SessionRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"❌ Manifest not found: {path}")
    if path.suffix == ".json":
        with open(path, "r", encoding="utf-8") as f:
            try:
                document = json.load(f)
            except json.JSONDecodeError as e:
                raise InputError(f"Manifest {path} is not valid JSON: {e}") from e
        try:
            return [SessionRecord(str(d["session_id"]), str(d["couple_id"]), str(d["speaker_id"]),
                                  _gender(d["gender"], d["session_id"]),
                                  {k: float(v) for k, v in d.get("ratings", {}).items()})
                    for d in document]
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"Malformed manifest entry in {path}: {e}") from e

    table = pd.read_csv(path, dtype={c: str for c in MANIFEST_ID_COLUMNS})
    if list(table.columns[:len(MANIFEST_ID_COLUMNS)]) != MANIFEST_ID_COLUMNS:
        raise InputError(f"Manifest header must start with {','.join(MANIFEST_ID_COLUMNS)}")
    codes = list(table.columns[len(MANIFEST_ID_COLUMNS):])
    records = []
    for line, row in enumerate(table.itertuples(index=False), start=2):
        ratings = {}
        for code, value in zip(codes, row[len(MANIFEST_ID_COLUMNS):]):
            number = pd.to_numeric(value, errors="coerce")
            if pd.notna(number):
                ratings[code] = float(number)
            elif pd.notna(value) and str(value).strip():
                raise InputError(f"Malformed rating {value!r} for {code!r} at line {line} of {path}")
        records.append(SessionRecord(row[0], row[1], row[2], _gender(row[3], row[0]), ratings))
    return records


def manifest_codes(records: Sequence[SessionRecord]) -> List[str]:
    return sorted({code for record in records for code in record.ratings})


class CorpusManager:
    """Turns a session manifest into labeled extreme subsets and leave-one-couple-out folds."""

    def __init__(self, records: Sequence[SessionRecord], config: dict, summary_log: Optional[list] = None):
        evaluation = config.get("evaluation", {})
        self.records = list(records)
        self.extreme_fraction = float(evaluation.get("extreme_fraction", 0.2))
        self.per_class = evaluation.get("per_class")
        self.gender_mode = evaluation.get("gender_mode", "per_gender")
        self.summary_log = summary_log if summary_log is not None else []
        if self.gender_mode not in ("per_gender", "pooled"):
            raise ConfigurationError(f"gender_mode must be per_gender or pooled, got {self.gender_mode!r}")
        if not 0 < self.extreme_fraction <= 0.5:
            raise ConfigurationError(f"extreme_fraction must lie in (0, 0.5], got {self.extreme_fraction}")
        self.couple_of = {r.session_id: r.couple_id for r in self.records}

    def populations(self) -> List[Tuple[str, List[SessionRecord]]]:
        """(gender label, sessions) pools the experiment runs on."""
        if self.gender_mode == "pooled":
            return [("pooled", self.records)]
        pools = []
        for gender in Gender:
            members = [r for r in self.records if r.gender is gender]
            if members:
                pools.append((gender.value, members))
        return pools

    def per_class_for(self, pool: Sequence[SessionRecord], code: str) -> int:
        if self.per_class is not None:
            return int(self.per_class)
        rated = sum(1 for r in pool if code in r.ratings)
        return max(1, int(np.floor(self.extreme_fraction * rated)))

    def plan(self, pool: Sequence[SessionRecord], code: str) -> Tuple[ExtremeSelection, FoldPlan]:
        selection = select_extremes(pool, code, self.per_class_for(pool, code))
        plan = make_folds(selection.sessions)
        sizes = ", ".join(f"{f.held_out_couple_id}:{len(f.test_session_ids)}" for f in plan.folds)
        self.summary_log.append(f"{code}: {len(selection.sessions)} extreme sessions, "
                                f"{len(plan.folds)} folds (test sizes {sizes})")
        if selection.degenerate:
            self.summary_log.append(f"{code}: degenerate extreme selection (classes share a rating)")
        return selection, plan


def write_synthetic_corpus(corpus: SyntheticCorpus, out_dir, codes: Sequence[str]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"lld": out_dir / "lld.csv", "layout": out_dir / "layout.json", "manifest": out_dir / "manifest.csv"}
    write_lld_csv(corpus.streams, paths["lld"])
    write_layout(corpus.layout, paths["layout"])
    write_manifest(corpus.records, paths["manifest"], codes)
    return paths

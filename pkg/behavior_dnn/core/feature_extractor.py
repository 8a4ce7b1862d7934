import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from behavior_dnn.core.errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

FUNCTIONALS = ("p1", "p99", "range", "mean", "median", "std")
LLD_ID_COLUMNS = ["session_id", "couple_id", "speaker_id", "segment_id", "t"]
FRAME_ID_COLUMNS = ["session_id", "speaker_id", "window_start"]
TIME_AXES = ("speech", "wall")
_CONSTANT_STD = 1e-12


@dataclass(frozen=True)
class FeatureLayout:
    """LLD column names with their family labels; frame column 6j+f summarizes LLD j with functional f."""
    lld_names: tuple
    families: tuple

    def __post_init__(self):
        if len(self.lld_names) != len(self.families):
            raise ConfigurationError("Layout needs one family label per LLD column")
        if len(set(self.lld_names)) != len(self.lld_names):
            raise ConfigurationError("Layout LLD column names must be unique")

    @property
    def num_llds(self) -> int:
        return len(self.lld_names)

    @property
    def frame_dim(self) -> int:
        return len(FUNCTIONALS) * self.num_llds

    def column_family(self, column: int) -> Optional[str]:
        return self.families[column // len(FUNCTIONALS)]

    def column_name(self, column: int) -> str:
        lld, functional = divmod(column, len(FUNCTIONALS))
        return f"{self.lld_names[lld]}_{FUNCTIONALS[functional]}"

    @classmethod
    def default(cls, lld_dim: int = 28) -> "FeatureLayout":
        """pitch, intensity, jitter, shimmer, 12 MFCCs, 12 MFBs; other sizes get unlabeled generic columns."""
        if lld_dim == 28:
            names = ["pitch", "intensity", "jitter", "shimmer"] + \
                    [f"mfcc_{k}" for k in range(1, 13)] + [f"mfb_{k}" for k in range(1, 13)]
            families = ["pitch", "intensity", "jitter", "shimmer"] + ["mfcc"] * 12 + ["mfb"] * 12
            return cls(tuple(names), tuple(families))
        return cls(tuple(f"lld_{k}" for k in range(lld_dim)), tuple([None] * lld_dim))


@dataclass
class LLDSegment:
    segment_id: str
    start: float
    vectors: np.ndarray


@dataclass
class LLDStream:
    session_id: str
    couple_id: str
    speaker_id: str
    hop: float
    segments: List[LLDSegment]
    layout: FeatureLayout

    @property
    def num_vectors(self) -> int:
        return sum(len(segment.vectors) for segment in self.segments)

    @property
    def speech_duration(self) -> float:
        return self.num_vectors * self.hop

    def all_vectors(self) -> np.ndarray:
        if not self.segments:
            return np.empty((0, self.layout.num_llds))
        return np.concatenate([segment.vectors for segment in self.segments], axis=0)


@dataclass
class FrameFeature:
    session_id: str
    speaker_id: str
    window_start: float
    values: np.ndarray


@dataclass
class FrameTable:
    """Column-wise store of frames; rows keep extraction order."""
    session_ids: np.ndarray
    speaker_ids: np.ndarray
    window_starts: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.session_ids)

    @property
    def dimension(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, dimension: int) -> "FrameTable":
        return cls(np.array([], dtype=object), np.array([], dtype=object), np.array([]),
                   np.empty((0, dimension)))

    @classmethod
    def from_frames(cls, frames: Sequence[FrameFeature], dimension: int) -> "FrameTable":
        if not frames:
            return cls.empty(dimension)
        return cls(
            session_ids=np.array([f.session_id for f in frames], dtype=object),
            speaker_ids=np.array([f.speaker_id for f in frames], dtype=object),
            window_starts=np.array([f.window_start for f in frames], dtype=np.float64),
            values=np.vstack([f.values for f in frames]),
        )

    @classmethod
    def concat(cls, tables: Sequence["FrameTable"], dimension: int) -> "FrameTable":
        tables = [t for t in tables if len(t)]
        if not tables:
            return cls.empty(dimension)
        return cls(
            session_ids=np.concatenate([t.session_ids for t in tables]),
            speaker_ids=np.concatenate([t.speaker_ids for t in tables]),
            window_starts=np.concatenate([t.window_starts for t in tables]),
            values=np.vstack([t.values for t in tables]),
        )

    def sessions(self) -> List[str]:
        return list(dict.fromkeys(self.session_ids.tolist()))

    def for_sessions(self, session_ids) -> "FrameTable":
        rows = np.isin(self.session_ids, list(session_ids))
        return FrameTable(self.session_ids[rows], self.speaker_ids[rows], self.window_starts[rows],
                          self.values[rows])


@dataclass
class ExtractionReport:
    dropped_segments: int = 0
    dropped_nan_frames: int = 0
    empty_wall_windows: int = 0
    empty_sessions: List[str] = field(default_factory=list)
    short_sessions: List[str] = field(default_factory=list)

    def lines(self) -> List[str]:
        return [
            f"Dropped short segments: {self.dropped_segments}",
            f"Dropped frames with NaN LLDs: {self.dropped_nan_frames}",
            f"Skipped wall-clock windows without speech: {self.empty_wall_windows}",
            f"Sessions with no speech after segment filtering: {len(self.empty_sessions)}",
            f"Sessions shorter than one window: {len(self.short_sessions)}",
        ]


def _with_vectors(stream: LLDStream, vectors: np.ndarray) -> LLDStream:
    segments = []
    offset = 0
    for segment in stream.segments:
        n = len(segment.vectors)
        segments.append(replace(segment, vectors=vectors[offset:offset + n]))
        offset += n
    return replace(stream, segments=segments)


def normalize_session(stream: LLDStream) -> LLDStream:
    """
    Z-score every LLD column over the whole session of one speaker.

    Population std is used; columns with std < 1e-12 become all-zero. NaN entries stay NaN.

    Raises:
        InputError: if the stream holds no LLD vectors
    """
    vectors = stream.all_vectors()
    if len(vectors) == 0:
        raise InputError(f"Session {stream.session_id}/{stream.speaker_id} has no LLD vectors to normalize")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        mean = np.nanmean(vectors, axis=0)
        std = np.nanstd(vectors, axis=0)
    constant = ~(std >= _CONSTANT_STD)
    safe_std = np.where(constant, 1.0, std)
    normalized = np.where(constant, 0.0, (vectors - np.where(constant, 0.0, mean)) / safe_std)
    normalized[np.isnan(vectors)] = np.nan
    return _with_vectors(stream, normalized)


def drop_short_segments(stream: LLDStream, min_duration: float = 1.5) -> LLDStream:
    kept = [s for s in stream.segments if len(s.vectors) * stream.hop + 1e-9 >= min_duration]
    return replace(stream, segments=kept)


def extract_functionals(window) -> np.ndarray:
    """
    Six functionals per LLD column, laid out column-major: index 6j+f.

    Order: 1st percentile, 99th percentile, their range, mean, median, population std.
    Percentiles interpolate linearly at rank (p/100)(n-1) of the sorted column.

    Raises:
        InputError: on an empty window
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 1:
        # a bare series is one LLD column
        window = window.reshape(-1, 1)
    if window.ndim != 2 or window.size == 0:
        raise InputError("Cannot compute functionals over an empty window")
    p1, median, p99 = np.percentile(window, [1.0, 50.0, 99.0], axis=0, method="linear")
    table = np.stack([p1, p99, p99 - p1, window.mean(axis=0), median, window.std(axis=0)], axis=1)
    return table.ravel()


def _frame(stream: LLDStream, window: np.ndarray, start: float, report: ExtractionReport):
    if np.isnan(window).any():
        report.dropped_nan_frames += 1
        return None
    return FrameFeature(stream.session_id, stream.speaker_id, round(start, 6), extract_functionals(window))


def window_session(stream: LLDStream, window_len: float = 20.0, shift: float = 1.0,
                   time_axis: str = "speech", report: Optional[ExtractionReport] = None) -> List[FrameFeature]:
    """
    Slide a window over a normalized, segment-filtered stream.

    On the speech axis segments are abutted end-to-end and window_start is the speech-time
    offset of the first sample; on the wall axis windows follow recording time and windows
    that contain no speech are skipped. Windows running past the end are not emitted.
    """
    if window_len <= 0 or shift <= 0:
        raise ConfigurationError(f"Window length and shift must be positive, got {window_len} / {shift}")
    if time_axis not in TIME_AXES:
        raise ConfigurationError(f"time_axis must be one of {TIME_AXES}, got {time_axis!r}")
    report = report if report is not None else ExtractionReport()

    if time_axis == "wall":
        return _window_wall_clock(stream, window_len, shift, report)

    vectors = stream.all_vectors()
    width = int(round(window_len / stream.hop))
    step = int(round(shift / stream.hop))
    if width < 1 or step < 1:
        raise ConfigurationError(f"Window {window_len}s / shift {shift}s is below the LLD hop {stream.hop}s")
    if len(vectors) < width:
        logger.warning(f"⚠️ {stream.session_id}/{stream.speaker_id}: {stream.speech_duration:.2f}s of speech "
                       f"is shorter than one {window_len}s window")
        report.short_sessions.append(stream.session_id)
        return []

    frames = []
    for start in range(0, len(vectors) - width + 1, step):
        frame = _frame(stream, vectors[start:start + width], start * stream.hop, report)
        if frame is not None:
            frames.append(frame)
    return frames


def _window_wall_clock(stream: LLDStream, window_len: float, shift: float,
                       report: ExtractionReport) -> List[FrameFeature]:
    if not stream.segments:
        report.short_sessions.append(stream.session_id)
        return []
    times = np.concatenate([s.start + np.arange(len(s.vectors)) * stream.hop for s in stream.segments])
    vectors = stream.all_vectors()
    first = stream.segments[0].start
    last = stream.segments[-1].start + len(stream.segments[-1].vectors) * stream.hop
    if last - first + 1e-9 < window_len:
        report.short_sessions.append(stream.session_id)
        return []

    frames = []
    count = int(np.floor((last - first - window_len) / shift + 1e-9)) + 1
    for k in range(count):
        start = first + k * shift
        lo, hi = np.searchsorted(times, [start - 1e-9, start + window_len - 1e-9])
        if hi <= lo:
            report.empty_wall_windows += 1
            continue
        frame = _frame(stream, vectors[lo:hi], start, report)
        if frame is not None:
            frames.append(frame)
    return frames


class FeatureExtractor:
    def __init__(self, config: dict, summary_log: Optional[list] = None):
        features = config.get("features", {})
        self.window_len = float(features.get("window_len", 20.0))
        self.shift = float(features.get("shift", 1.0))
        self.min_segment = float(features.get("min_segment", 1.5))
        self.time_axis = features.get("time_axis", "speech")
        self.summary_log = summary_log if summary_log is not None else []
        self.report = ExtractionReport()
        if self.shift <= 0 or self.window_len <= 0:
            raise ConfigurationError(f"Window length and shift must be positive, got {self.window_len} / {self.shift}")
        if self.min_segment < 0:
            raise ConfigurationError(f"min_segment must be >= 0, got {self.min_segment}")

    def extract(self, streams: Sequence[LLDStream]) -> FrameTable:
        logger.info(f"📦 Extracting {self.window_len}s/{self.shift}s frames from {len(streams)} speaker sessions...")
        dimension = streams[0].layout.frame_dim if streams else 0
        tables = []
        for stream in streams:
            filtered = drop_short_segments(stream, self.min_segment)
            self.report.dropped_segments += len(stream.segments) - len(filtered.segments)
            if filtered.num_vectors == 0:
                logger.warning(f"⚠️ {stream.session_id}/{stream.speaker_id}: every segment is shorter "
                               f"than {self.min_segment}s")
                self.report.empty_sessions.append(stream.session_id)
                continue
            frames = window_session(normalize_session(filtered), self.window_len, self.shift,
                                    self.time_axis, self.report)
            logger.debug(f"{stream.session_id}/{stream.speaker_id}: {len(frames)} frames")
            tables.append(FrameTable.from_frames(frames, dimension))
        table = FrameTable.concat(tables, dimension)
        self.summary_log.extend(self.report.lines())
        logger.info(f"✅ Extracted {len(table)} frames of dimension {dimension}")
        return table


def read_layout(path) -> FeatureLayout:
    """Sidecar JSON mapping LLD column name -> family, in CSV column order."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"❌ Layout file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            mapping = json.load(f)
        except json.JSONDecodeError as e:
            raise InputError(f"Layout file {path} is not valid JSON: {e}") from e
    if not isinstance(mapping, dict) or not mapping:
        raise InputError(f"Layout file {path} must map column names to families")
    return FeatureLayout(tuple(mapping.keys()), tuple(mapping.values()))


def write_layout(layout: FeatureLayout, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(dict(zip(layout.lld_names, layout.families)), f, indent=2)
        f.write("\n")


def _numeric_or_fail(raw: pd.DataFrame, columns: List[str], allow_nan: bool) -> pd.DataFrame:
    numeric = raw[columns].apply(pd.to_numeric, errors="coerce")
    text = raw[columns].apply(lambda c: c.str.strip().str.lower())
    declared_nan = text.isin(["", "nan"]) if allow_nan else pd.DataFrame(False, index=raw.index, columns=columns)
    bad = numeric.isna() & ~declared_nan
    if bad.to_numpy().any():
        row = int(np.flatnonzero(bad.to_numpy().any(axis=1))[0])
        column = columns[int(np.flatnonzero(bad.to_numpy()[row])[0])]
        # header is line 1
        raise InputError(f"Malformed value {raw[column].iloc[row]!r} in column {column!r} at line {row + 2}")
    return numeric


def _read_csv_text(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"❌ CSV file not found: {path}")
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"Malformed CSV {path}: {e}") from e


def read_lld_csv(path, layout: Optional[FeatureLayout] = None, hop: Optional[float] = None) -> List[LLDStream]:
    """
    Parse ``session_id,couple_id,speaker_id,segment_id,t,<lld columns...>`` into streams.

    The hop is inferred from the time column when a segment has two rows, else ``hop`` (or 0.01) is used.

    Raises:
        InputError: on missing columns or a malformed row (message carries the line number)
    """
    raw = _read_csv_text(path)
    if list(raw.columns[:len(LLD_ID_COLUMNS)]) != LLD_ID_COLUMNS:
        raise InputError(f"LLD CSV header must start with {','.join(LLD_ID_COLUMNS)}")
    lld_columns = list(raw.columns[len(LLD_ID_COLUMNS):])
    if layout is None:
        layout = FeatureLayout(tuple(lld_columns), tuple([None] * len(lld_columns)))
    missing = [name for name in layout.lld_names if name not in lld_columns]
    if missing:
        raise InputError(f"LLD CSV lacks layout columns {missing}")

    times = _numeric_or_fail(raw, ["t"], allow_nan=False)["t"].to_numpy()
    values = _numeric_or_fail(raw, list(layout.lld_names), allow_nan=True).to_numpy(dtype=np.float64)

    inferred = None
    for _, rows in raw.groupby(["session_id", "speaker_id", "segment_id"], sort=False).indices.items():
        if len(rows) >= 2:
            inferred = float(round(times[rows[1]] - times[rows[0]], 9))
            break
    if inferred is not None:
        hop = inferred
    elif hop is None:
        hop = 0.01

    streams = []
    for (session_id, speaker_id), rows in raw.groupby(["session_id", "speaker_id"], sort=False).indices.items():
        rows = np.sort(rows)
        segments = []
        for segment_id, seg_rows in raw.iloc[rows].groupby("segment_id", sort=False).indices.items():
            seg_rows = rows[seg_rows]
            segments.append(LLDSegment(str(segment_id), float(times[seg_rows[0]]), values[seg_rows]))
        segments.sort(key=lambda s: s.start)
        streams.append(LLDStream(str(session_id), str(raw["couple_id"].iloc[rows[0]]), str(speaker_id),
                                 hop, segments, layout))
    return streams


def write_lld_csv(streams: Sequence[LLDStream], path):
    blocks = []
    for stream in streams:
        for segment in stream.segments:
            n = len(segment.vectors)
            block = pd.DataFrame(segment.vectors, columns=list(stream.layout.lld_names))
            block.insert(0, "t", np.round(segment.start + np.arange(n) * stream.hop, 6))
            block.insert(0, "segment_id", segment.segment_id)
            block.insert(0, "speaker_id", stream.speaker_id)
            block.insert(0, "couple_id", stream.couple_id)
            block.insert(0, "session_id", stream.session_id)
            blocks.append(block)
    frame = pd.concat(blocks, ignore_index=True) if blocks else pd.DataFrame(columns=LLD_ID_COLUMNS)
    frame.to_csv(path, index=False)


def write_frames_csv(table: FrameTable, path):
    columns = [f"f{k}" for k in range(table.dimension)]
    frame = pd.DataFrame(table.values, columns=columns)
    frame.insert(0, "window_start", table.window_starts)
    frame.insert(0, "speaker_id", table.speaker_ids)
    frame.insert(0, "session_id", table.session_ids)
    frame.to_csv(path, index=False)


def read_frames_csv(path) -> FrameTable:
    raw = _read_csv_text(path)
    if list(raw.columns[:len(FRAME_ID_COLUMNS)]) != FRAME_ID_COLUMNS:
        raise InputError(f"Frame CSV header must start with {','.join(FRAME_ID_COLUMNS)}")
    value_columns = list(raw.columns[len(FRAME_ID_COLUMNS):])
    starts = _numeric_or_fail(raw, ["window_start"], allow_nan=False)["window_start"].to_numpy(dtype=np.float64)
    values = _numeric_or_fail(raw, value_columns, allow_nan=False).to_numpy(dtype=np.float64)
    return FrameTable(raw["session_id"].to_numpy(dtype=object), raw["speaker_id"].to_numpy(dtype=object),
                      starts, values.reshape(len(raw), len(value_columns)))


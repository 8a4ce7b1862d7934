import numpy as np
import pytest

from behavior_dnn.core.corpus_manager import Gender, SessionRecord, TrainingPairs
from behavior_dnn.core.feature_extractor import FeatureLayout, FrameTable, LLDSegment, LLDStream


def make_stream(vectors, hop=0.01, session_id="s1", segment_starts=None, lengths=None):
    """One-speaker stream; vectors are cut into segments of the given lengths (default: one segment)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim == 1:
        vectors = vectors.reshape(-1, 1)
    lengths = lengths or [len(vectors)]
    segment_starts = segment_starts or [0.0] * len(lengths)
    segments, offset = [], 0
    for k, (start, n) in enumerate(zip(segment_starts, lengths)):
        segments.append(LLDSegment(f"seg{k}", start, vectors[offset:offset + n]))
        offset += n
    layout = FeatureLayout.default(vectors.shape[1])
    return LLDStream(session_id, "c1", f"{session_id}_spk", hop, segments, layout)


def make_pairs(inputs, targets, couples=None):
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    sessions = np.array([f"s{i}" for i in range(n)], dtype=object)
    couples = np.array(couples if couples is not None else [f"c{i % 4}" for i in range(n)], dtype=object)
    return TrainingPairs(inputs, targets, sessions, couples)


@pytest.fixture
def separable_pairs():
    rng = np.random.default_rng(3)
    labels = np.repeat([0.0, 1.0], 20)
    centers = np.where(labels[:, None] > 0, 1.0, -1.0)
    inputs = centers + rng.normal(0.0, 0.1, (40, 2))
    return make_pairs(inputs, labels)


@pytest.fixture
def signal_pairs():
    """24-dim frames (4 LLDs x 6 functionals); class 1 is shifted on the first 12 columns."""
    rng = np.random.default_rng(11)
    labels = np.repeat([0.0, 1.0], 60)
    inputs = rng.normal(0.0, 1.0, (120, 24))
    inputs[:, :12] += np.where(labels[:, None] > 0, 0.8, -0.8)
    return make_pairs(inputs, labels)


@pytest.fixture
def duplicated_corpus():
    """
    8 couples, two sessions each. Every high-rated session has identical frames, every
    low-rated one identical (different) frames.
    """
    layout = FeatureLayout.default(2)
    records, session_ids, starts, values = [], [], [], []
    for c in range(8):
        couple = f"c{c:03d}"
        for n, (gender, rating, level) in enumerate(((Gender.FEMALE, 8.0, 1.0), (Gender.MALE, 2.0, -1.0))):
            session = f"{couple}_s0_{gender.value}"
            records.append(SessionRecord(session, couple, f"{couple}_{gender.value}", gender,
                                         {"acceptance": rating}))
            for k in range(5):
                session_ids.append(session)
                starts.append(float(k))
                values.append(np.full(layout.frame_dim, level))
    frames = FrameTable(np.array(session_ids, dtype=object), np.array(session_ids, dtype=object),
                        np.array(starts), np.vstack(values))
    return frames, records, layout

import numpy as np
import pytest

from behavior_dnn.core.corpus_manager import (CorpusManager, Gender, SessionRecord, SynthConfig, label_frames,
                                              make_folds, read_manifest, select_extremes, synth_corpus,
                                              write_manifest, write_synthetic_corpus)
from behavior_dnn.core.errors import ConfigurationError, InputError
from behavior_dnn.core.feature_extractor import FeatureExtractor, FrameTable, read_lld_csv


def record(session, couple, rating, gender=Gender.FEMALE, code="acceptance"):
    return SessionRecord(session, couple, f"{couple}_{gender.value}", gender, {code: rating})


@pytest.fixture(scope="module")
def small_corpus():
    return synth_corpus(SynthConfig(num_couples=4, sessions_per_couple=2, mean_speech_duration=25.0, seed=7))


class TestExtremes:
    def test_lowest_and_highest(self):
        sessions = [record(f"s{k}", f"c{k}", 1.0 + 0.8 * k) for k in range(10)]
        selection = select_extremes(sessions, "acceptance", 2)
        assert selection.labels() == {"s0": 0, "s1": 0, "s8": 1, "s9": 1}
        assert not selection.degenerate

    def test_ties_break_by_session_id(self):
        sessions = [record("b", "c1", 5.0), record("a", "c2", 5.0), record("c", "c3", 5.0), record("d", "c4", 5.0)]
        selection = select_extremes(sessions, "acceptance", 1)
        assert selection.labels() == {"a": 0, "d": 1}
        assert selection.degenerate

    def test_not_enough_sessions(self):
        with pytest.raises(ConfigurationError):
            select_extremes([record("s0", "c0", 3.0)], "acceptance", 1)

    def test_rating_out_of_range(self):
        with pytest.raises(InputError):
            record("s0", "c0", 10.0)


class TestFolds:
    def test_no_couple_in_train_and_test(self):
        corpus = synth_corpus(SynthConfig(num_couples=20, sessions_per_couple=2, mean_speech_duration=2.0, seed=1))
        selection = select_extremes(corpus.records, "acceptance", 16)
        plan = make_folds(selection.sessions)
        couple_of = {r.session_id: r.couple_id for r in corpus.records}
        tested = []
        for fold in plan.folds:
            train_couples = {couple_of[s] for s in fold.train_session_ids}
            assert fold.held_out_couple_id not in train_couples
            assert {couple_of[s] for s in fold.test_session_ids} == {fold.held_out_couple_id}
            tested.extend(fold.test_session_ids)
        assert sorted(tested) == sorted(s.session_id for s in selection.sessions)

    def test_label_frames(self):
        frames = FrameTable(np.array(["a", "a", "b"], dtype=object), np.array(["x", "x", "y"], dtype=object),
                            np.array([0.0, 1.0, 0.0]), np.zeros((3, 6)))
        pairs = label_frames(frames, {"a": 1, "b": 0}, {"a": "c1", "b": "c2"})
        np.testing.assert_array_equal(pairs.targets, [1.0, 1.0, 0.0])
        assert pairs.couple_ids.tolist() == ["c1", "c1", "c2"]
        with pytest.raises(InputError):
            label_frames(frames, {"a": 1})


class TestSynth:
    def test_ids_and_ratings(self, small_corpus):
        assert len(small_corpus.records) == 4 * 2 * 2
        assert small_corpus.records[0].session_id == "c000_s0_F"
        assert {r.gender for r in small_corpus.records} == {Gender.FEMALE, Gender.MALE}
        for r in small_corpus.records:
            assert set(r.ratings) == {"acceptance", "negativity", "blame"}
            assert all(1.0 <= v <= 9.0 for v in r.ratings.values())

    def test_speech_duration(self, small_corpus):
        for stream in small_corpus.streams:
            assert stream.speech_duration >= 25.0 * 0.8 - 1e-9
            assert stream.all_vectors().shape[1] == 28

    def test_same_seed_same_files(self, tmp_path):
        config = SynthConfig(num_couples=2, sessions_per_couple=1, mean_speech_duration=3.0, seed=4)
        a = write_synthetic_corpus(synth_corpus(config), tmp_path / "a", config.codes)
        b = write_synthetic_corpus(synth_corpus(config), tmp_path / "b", config.codes)
        for name in a:
            assert a[name].read_bytes() == b[name].read_bytes()

    def test_row_count_matches_vectors(self, tmp_path, small_corpus):
        paths = write_synthetic_corpus(small_corpus, tmp_path, ["acceptance"])
        lines = paths["lld"].read_text().splitlines()
        assert len(lines) - 1 == sum(s.num_vectors for s in small_corpus.streams)

    def test_effect_shifts_designated_columns(self, small_corpus):
        code = "acceptance"
        columns = small_corpus.effect_columns[code]
        assert len(columns) == 3
        high = max(small_corpus.records, key=lambda r: r.ratings[code])
        low = min(small_corpus.records, key=lambda r: r.ratings[code])
        streams = {s.session_id: s for s in small_corpus.streams}

        def skew(session_id):
            values = streams[session_id].all_vectors()[:, columns]
            centered = values - values.mean(axis=0)
            return float(np.mean((centered ** 3).mean(axis=0) / values.std(axis=0) ** 3))

        assert skew(high.session_id) > skew(low.session_id)

    def test_bad_config(self):
        with pytest.raises(ConfigurationError):
            SynthConfig.from_mapping({"num_couples": 0})
        with pytest.raises(ConfigurationError):
            SynthConfig.from_mapping({"bogus": 1})

    def test_extraction_yields_168_columns(self, small_corpus, tmp_path):
        paths = write_synthetic_corpus(small_corpus, tmp_path, ["acceptance"])
        table = FeatureExtractor({"features": {"window_len": 5.0}}).extract(read_lld_csv(paths["lld"]))
        assert table.dimension == 168
        assert set(table.sessions()) <= {r.session_id for r in small_corpus.records}


class TestManifest:
    def test_csv_and_json(self, tmp_path, small_corpus):
        for name in ("manifest.csv", "manifest.json"):
            path = tmp_path / name
            write_manifest(small_corpus.records, path, ["acceptance", "blame"])
            loaded = read_manifest(path)
            assert [r.session_id for r in loaded] == [r.session_id for r in small_corpus.records]
            assert loaded[3].ratings["blame"] == pytest.approx(small_corpus.records[3].ratings["blame"])
            assert loaded[3].gender == small_corpus.records[3].gender

    def test_malformed_rating(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("session_id,couple_id,speaker_id,gender,acceptance\nc0_s0_F,c0,c0_F,F,high\n")
        with pytest.raises(InputError, match="line 2"):
            read_manifest(path)


class TestCorpusManager:
    def test_populations(self, small_corpus):
        per_gender = CorpusManager(small_corpus.records, {})
        assert [g for g, _ in per_gender.populations()] == ["F", "M"]
        pooled = CorpusManager(small_corpus.records, {"evaluation": {"gender_mode": "pooled"}})
        [(label, pool)] = pooled.populations()
        assert label == "pooled" and len(pool) == 16

    def test_per_class_from_fraction(self, small_corpus):
        manager = CorpusManager(small_corpus.records, {"evaluation": {"extreme_fraction": 0.25}})
        females = [r for r in small_corpus.records if r.gender is Gender.FEMALE]
        assert manager.per_class_for(females, "acceptance") == 2
        selection, plan = manager.plan(females, "acceptance")
        assert len(selection.sessions) == 4
        assert sum(len(f.test_session_ids) for f in plan.folds) == 4
        assert manager.summary_log

    def test_bad_gender_mode(self, small_corpus):
        with pytest.raises(ConfigurationError):
            CorpusManager(small_corpus.records, {"evaluation": {"gender_mode": "mixed"}})

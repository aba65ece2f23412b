import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cldino.curriculum import (AUG_PRESETS, DATA_PRESETS, TRACE_COLUMNS, Course, aug_count,
                               aug_mask, course_value, emit_schedule_trace, epoch_subset, preset)
from cldino.errors import ConfigError
from cldino.schedule import LrConfig, sgdr_lr

ALL_NAMES = ["none", "CL_A1"] + sorted(DATA_PRESETS) + sorted(AUG_PRESETS)


class TestCourses:
    @pytest.mark.parametrize("name", ALL_NAMES)
    @pytest.mark.parametrize("block", [1, 8, 16])
    def test_non_decreasing_and_ends_at_one(self, name, block):
        course = preset(name, block)
        values = [course_value(course, e) for e in range(6 * block + 3)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        # every course trains the final epoch of the run at full strength
        assert all(course_value(course, e) == 1.0 for e in range(5 * block - 1, 6 * block))

    def test_baseline_is_one(self):
        assert {course_value(preset("none"), e) for e in range(80)} == {1.0}

    def test_cl_d3_breakpoints(self):
        c = preset("CL_D3")
        assert course_value(c, 0) == 0.2
        assert course_value(c, 15) == 0.2
        assert course_value(c, 16) == 0.4
        assert course_value(c, 64) == 1.0

    def test_desk_block(self):
        c = preset("CL_D3", 8)
        assert [course_value(c, e) for e in (0, 8, 16, 24, 32)] == [0.2, 0.4, 0.6, 0.8, 1.0]

    def test_cl_a1_ramp(self):
        c = preset("CL_A1")
        assert course_value(c, 0) == 0.0
        assert course_value(c, 40) == pytest.approx(40 / 79)
        assert course_value(c, 78) < 1.0
        assert course_value(c, 79) == 1.0
        assert course_value(preset("CL_A1", 8), 39) == 1.0

    @pytest.mark.parametrize("bp", [((1, 1.0),), ((0, 0.5), (3, 0.4), (5, 1.0)),
                                    ((0, 0.5), (0, 1.0)), ((0, 0.5),), ((0, 1.5),)])
    def test_invalid(self, bp):
        with pytest.raises(ConfigError):
            Course("bad", bp)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="CL_D3"):
            preset("CL_D9")

    @given(st.lists(st.tuples(st.integers(1, 100), st.floats(0, 1)), max_size=6), st.integers(0, 200))
    @settings(max_examples=200, deadline=None)
    def test_random_courses_monotone(self, pts, epoch):
        starts = sorted({e for e, _ in pts})
        fracs = sorted(f for _, f in pts)[: len(starts)]
        course = Course("r", ((0, 0.0),) + tuple(zip(starts, fracs)) + ((starts[-1] + 1 if starts else 1, 1.0),))
        assert course_value(course, epoch) <= course_value(course, epoch + 1)


class TestSubsets:
    def test_full_and_counts(self, desk_corpus):
        assert sorted(epoch_subset(desk_corpus, 1.0)) == sorted(desk_corpus.ids)
        assert len(epoch_subset(desk_corpus, 0.25)) == 200
        assert len(epoch_subset(desk_corpus, 0.6)) == 480

    def test_nested_for_all_pairs(self, desk_corpus):
        fracs = [0.05, 0.2, 0.25, 0.4, 0.55, 0.6, 0.7, 0.8, 0.85, 0.9, 1.0]
        subsets = {f: epoch_subset(desk_corpus, f, seed=3) for f in fracs}
        for i, a in enumerate(fracs):
            for b in fracs[i:]:
                assert set(subsets[a]) <= set(subsets[b])
                assert subsets[b][: len(subsets[a])] == subsets[a]

    def test_seed_changes_order(self, desk_corpus):
        assert epoch_subset(desk_corpus, 0.2, seed=0) != epoch_subset(desk_corpus, 0.2, seed=1)

    def test_fixed_speakers(self, desk_corpus):
        for f in (0.05, 0.2, 0.5):
            ids = epoch_subset(desk_corpus, f, "fixed_speakers", seed=0)
            assert len(ids) == max(math.ceil(f * 800), 20)
            assert {desk_corpus.speaker_of(u) for u in ids} == set(desk_corpus.speakers)
        small = epoch_subset(desk_corpus, 0.2, "fixed_speakers")
        assert set(small) <= set(epoch_subset(desk_corpus, 0.5, "fixed_speakers"))

    def test_fixed_speakers_needs_labels(self, desk_corpus):
        with pytest.raises(ConfigError, match="labels"):
            epoch_subset(desk_corpus.without_labels(), 0.5, "fixed_speakers")

    def test_cluster_needs_result(self, desk_corpus):
        with pytest.raises(ConfigError):
            epoch_subset(desk_corpus, 0.5, "cluster")

    @pytest.mark.parametrize("f", [0.0, -0.1, 1.01])
    def test_bad_fraction(self, desk_corpus, f):
        with pytest.raises(ConfigError):
            epoch_subset(desk_corpus, f)


class TestAugMask:
    def test_examples(self):
        r = np.random.default_rng(0)
        assert aug_mask(200, 1.0, r).all()
        assert not aug_mask(200, 0.0, r).any()
        assert aug_mask(200, 0.4, r).sum() == 80

    def test_exhaustive_cardinality(self):
        r = np.random.default_rng(1)
        for b in range(1, 65):
            for f in np.linspace(0, 1, 41):
                assert aug_mask(b, f, r).sum() == math.floor(f * b + 0.5)

    def test_positions_follow_rng(self):
        a = aug_mask(32, 0.5, np.random.default_rng(4))
        b = aug_mask(32, 0.5, np.random.default_rng(4))
        c = aug_mask(32, 0.5, np.random.default_rng(5))
        assert (a == b).all() and not (a == c).all()

    def test_half_rounds_up(self):
        assert aug_count(5, 0.5) == 3 and aug_count(3, 0.5) == 2


class TestTrace:
    def test_rows_and_columns(self):
        text = emit_schedule_trace(preset("CL_D3"), preset("CL_A2"), LrConfig(), 80)
        lines = text.splitlines()
        assert lines[0] == ",".join(TRACE_COLUMNS)
        assert len(lines) == 81
        assert lines[1] == "0,0.2,0.2,0.001"
        assert lines[17].split(",")[3] == repr(0.001 * 0.8)

    def test_baseline_all_ones(self):
        text = emit_schedule_trace(preset("none"), preset("none"), LrConfig(), 80)
        for line in text.splitlines()[1:]:
            _, d, a, _ = line.split(",")
            assert d == a == "1.0"

    def test_lr_column_matches_sgdr(self):
        text = emit_schedule_trace(preset("none"), preset("CL_A1"), LrConfig(), 80)
        for line in text.splitlines()[1:]:
            e, _, _, lr = line.split(",")
            assert float(lr) == sgdr_lr(int(e), 0.0, LrConfig())

    def test_file_and_text_agree(self, tmp_path):
        text = emit_schedule_trace(preset("CL_D1"), preset("CL_A1"), LrConfig(), 10, tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text() == text

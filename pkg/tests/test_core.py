"""Shared vocabulary: task types, queries, weights, score bundles."""
import dataclasses

import pytest
from PIL import Image

from slidecouncil.core import (
    AllZeroWeights,
    BadThumbnail,
    ConfigError,
    CorruptLine,
    ExpertRole,
    Query,
    ROLE_FOR_TASK,
    ScoreBundle,
    TaskType,
    WeightConfig,
    normalize_weights,
    require_unit_interval,
    validate_thumbnail,
)


class TestTaskType:
    def test_eleven_routable_types_plus_out_of_scope(self):
        assert len(TaskType) == 12
        assert TaskType.OUT_OF_SCOPE not in ROLE_FOR_TASK

    def test_parse_tolerates_case_and_separators(self):
        assert TaskType.parse("HistologicalTyping") is TaskType.HISTOLOGICAL_TYPING
        assert TaskType.parse("histological typing") is TaskType.HISTOLOGICAL_TYPING
        assert TaskType.parse("GLOBAL_MORPH") is TaskType.GLOBAL_MORPH

    def test_parse_rejects_unknown(self):
        with pytest.raises(ValueError):
            TaskType.parse("Necromancy")

    def test_every_routable_type_has_an_owner(self):
        for task in TaskType:
            if task is TaskType.OUT_OF_SCOPE:
                continue
            assert isinstance(ROLE_FOR_TASK[task], ExpertRole)

    def test_role_ownership_matches_the_four_groups(self):
        assert ROLE_FOR_TASK[TaskType.GLOBAL_MORPH] is ExpertRole.MORPHOLOGY
        assert ROLE_FOR_TASK[TaskType.GRADING] is ExpertRole.DIAGNOSIS
        assert ROLE_FOR_TASK[TaskType.PROGNOSIS] is ExpertRole.TREATMENT_PLANNING
        assert ROLE_FOR_TASK[TaskType.REPORT_GENERATION] is ExpertRole.REPORT_GENERATION


class TestQuery:
    def test_question_is_trimmed(self):
        q = Query(slide_ref="s1", question="  What is this?  ")
        assert q.question == "What is this?"

    def test_blank_question_rejected(self):
        with pytest.raises(ValueError):
            Query(slide_ref="s1", question="   ")

    def test_thumbnail_bounds(self, tmp_path):
        ok = tmp_path / "ok.png"
        Image.new("L", (64, 32)).save(ok)
        assert validate_thumbnail(ok) == (64, 32)

        big = tmp_path / "big.png"
        Image.new("L", (1025, 10)).save(big)
        with pytest.raises(BadThumbnail):
            validate_thumbnail(big)

    def test_unreadable_thumbnail(self, tmp_path):
        bogus = tmp_path / "bogus.png"
        bogus.write_bytes(b"not an image")
        with pytest.raises(BadThumbnail):
            validate_thumbnail(bogus)


class TestWeights:
    def test_normalization_preserves_ratios(self):
        w = normalize_weights(WeightConfig(w1=1, w2=2, w3=1))
        assert (w.w1, w.w2, w.w3) == (0.25, 0.5, 0.25)
        assert w.total == 1.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            WeightConfig(w1=-0.1)

    def test_all_zero_rejected(self):
        with pytest.raises(AllZeroWeights):
            normalize_weights(WeightConfig(w1=0, w2=0, w3=0))

    def test_zero_single_weight_allowed(self):
        w = normalize_weights(WeightConfig(w1=1, w2=0, w3=1))
        assert (w.w1, w.w2, w.w3) == (0.5, 0.0, 0.5)


class TestScoreBundle:
    def test_rejects_out_of_range(self):
        with pytest.raises(Exception):
            ScoreBundle(phi_g=1.5)
        with pytest.raises(Exception):
            ScoreBundle(phi_k=-0.01)

    def test_as_dict_round_trip(self):
        bundle = ScoreBundle(phi_g=0.5, phi_l=0.25, phi_c_applicable=False)
        d = bundle.as_dict()
        assert d["phi_g"] == 0.5
        assert d["phi_c_applicable"] is False

    def test_frozen(self):
        bundle = ScoreBundle()
        with pytest.raises(dataclasses.FrozenInstanceError):
            bundle.phi_g = 0.2

    def test_require_unit_interval_names_the_score(self):
        with pytest.raises(Exception, match="phi_x"):
            require_unit_interval(phi_x=1.2)


class TestCorruptLine:
    def test_carries_the_line_number(self):
        err = CorruptLine(7, "bad json")
        assert err.line_no == 7
        assert "bad json" in str(err)

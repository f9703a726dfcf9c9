"""Claim extraction and the internal-consistency scores."""
import math

import pytest
from hypothesis import given, strategies as st

from slidecouncil.consistency import (
    Claim,
    CompatibilityMatrix,
    Evidence,
    compatibility_score,
    extract_claims,
    internal_consistency,
    judge_compatibility,
    judge_evidence,
    split_sentences,
    validity_score,
)
from slidecouncil.core import (
    ABS_TOL,
    EmptyList,
    ExtractionEmpty,
    JudgeError,
    MalformedExtraction,
)

from conftest import scripted


def matrix(n, values):
    pairs = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]
    return CompatibilityMatrix(n=n, entries=dict(zip(pairs, values)))


class TestSplitSentences:
    def test_periods_questions_exclamations(self):
        text = "First one. Second one! Third one? Fourth"
        assert split_sentences(text) == ["First one", "Second one", "Third one", "Fourth"]

    def test_decimal_free_abbreviation_noise_is_tolerable(self):
        assert split_sentences("One... Two.") == ["One", "Two"]

    def test_empty_text(self):
        assert split_sentences("   ") == []


class TestExtractClaims:
    def test_sentences_become_claims_without_an_extractor(self):
        claims = extract_claims("A is true. B is false.")
        assert [(c.index, c.text) for c in claims] == [(1, "A is true"), (2, "B is false")]
        assert all(c.evidence is None for c in claims)

    def test_blank_response_rejected(self):
        with pytest.raises(ExtractionEmpty):
            extract_claims("   ")

    def test_extractor_json_path(self):
        extractor = scripted(
            {"*": '[{"claim": "X", "evidence": "because Y"}, {"claim": "Z", "evidence": null}]'}
        )
        claims = extract_claims("anything", extractor)
        assert claims[0].evidence.text == "because Y"
        assert claims[1].evidence is None
        assert [c.index for c in claims] == [1, 2]

    def test_extractor_code_fence_is_stripped(self):
        extractor = scripted({"*": '```json\n[{"claim": "X", "evidence": null}]\n```'})
        assert extract_claims("anything", extractor)[0].text == "X"

    def test_non_json_reply_rejected(self):
        extractor = scripted({"*": "I cannot help with that"})
        with pytest.raises(MalformedExtraction):
            extract_claims("anything", extractor)

    def test_non_array_reply_rejected(self):
        extractor = scripted({"*": '{"claim": "X"}'})
        with pytest.raises(MalformedExtraction):
            extract_claims("anything", extractor)

    def test_empty_array_rejected(self):
        extractor = scripted({"*": "[]"})
        with pytest.raises(ExtractionEmpty):
            extract_claims("anything", extractor)

    def test_claim_without_text_rejected(self):
        extractor = scripted({"*": '[{"evidence": "Y"}]'})
        with pytest.raises(MalformedExtraction):
            extract_claims("anything", extractor)


class TestCompatibilityMatrix:
    def test_requires_exactly_the_upper_triangle(self):
        with pytest.raises(ValueError):
            CompatibilityMatrix(n=3, entries={(1, 2): 1.0})
        with pytest.raises(ValueError):
            CompatibilityMatrix(n=2, entries={(1, 2): 1.0, (2, 1): 1.0})

    def test_rejects_out_of_range_entries(self):
        with pytest.raises(ValueError):
            matrix(2, [1.5])

    def test_payload_keys_are_sorted_pairs(self):
        m = matrix(3, [0.1, 0.2, 0.3])
        assert list(m.to_payload()["entries"]) == ["1,2", "1,3", "2,3"]


class TestCompatibilityScore:
    def test_three_claims_one_contradiction(self):
        # pairs (1,2)=1, (1,3)=0, (2,3)=1 over 3 pairs
        assert math.isclose(compatibility_score(matrix(3, [1, 0, 1])), 2 / 3, abs_tol=ABS_TOL)

    def test_single_claim_is_fully_consistent(self):
        assert compatibility_score(matrix(1, [])) == 1.0

    def test_all_compatible(self):
        assert compatibility_score(matrix(4, [1] * 6)) == 1.0

    def test_all_contradictory(self):
        assert compatibility_score(matrix(3, [0, 0, 0])) == 0.0

    @given(st.integers(2, 8), st.data())
    def test_stays_in_unit_interval(self, n, data):
        count = n * (n - 1) // 2
        values = data.draw(
            st.lists(st.floats(0, 1, allow_nan=False), min_size=count, max_size=count)
        )
        assert 0.0 <= compatibility_score(matrix(n, values)) <= 1.0


class TestValidityScore:
    def test_mean_of_binary_validities(self):
        assert math.isclose(validity_score([0.0, 1.0, 1.0]), 2 / 3, abs_tol=ABS_TOL)

    def test_empty_rejected(self):
        with pytest.raises(EmptyList):
            validity_score([])

    def test_out_of_range_rejected(self):
        with pytest.raises(Exception):
            validity_score([1.01])


class TestInternalConsistency:
    def test_average_of_the_two_scores(self):
        assert math.isclose(internal_consistency(0.8, 0.4), 0.6, abs_tol=ABS_TOL)

    def test_spot_value_two_thirds_and_half(self):
        assert math.isclose(internal_consistency(2 / 3, 0.5), 7 / 12, abs_tol=ABS_TOL)

    @given(st.floats(0, 1, allow_nan=False), st.floats(0, 1, allow_nan=False))
    def test_bounded_and_symmetric(self, g, e):
        value = internal_consistency(g, e)
        assert 0.0 <= value <= 1.0
        assert value == internal_consistency(e, g)


class TestJudgeCompatibility:
    def test_per_pair_prompts_and_assembly(self):
        claims = [Claim(1, "A"), Claim(2, "B"), Claim(3, "C")]
        judge = scripted(
            {
                "Statement A: A\nStatement B: B": "1",
                "Statement A: A\nStatement B: C": "0",
                "Statement A: B\nStatement B: C": "0.5",
            }
        )
        m = judge_compatibility(claims, judge, parallelism=3)
        assert m.entries == {(1, 2): 1.0, (1, 3): 0.0, (2, 3): 0.5}

    def test_out_of_range_reply_is_clamped(self):
        claims = [Claim(1, "A"), Claim(2, "B")]
        judge = scripted({"*": "7"})
        m = judge_compatibility(claims, judge)
        assert m.entries[(1, 2)] == 1.0

    def test_numberless_reply_is_an_error(self):
        claims = [Claim(1, "A"), Claim(2, "B")]
        judge = scripted({"*": "maybe"})
        with pytest.raises(JudgeError):
            judge_compatibility(claims, judge)

    def test_single_claim_needs_no_judge_call(self):
        claims = [Claim(1, "A")]
        judge = scripted({"never-matched": "0"})
        m = judge_compatibility(claims, judge)
        assert m.entries == {}
        assert compatibility_score(m) == 1.0


class TestJudgeEvidence:
    def test_evidence_free_claim_scores_zero_without_a_call(self):
        claims = [Claim(1, "A"), Claim(2, "B", evidence=Evidence(text="proof"))]
        judge = scripted({"Evidence: proof": "0.75"})
        assert judge_evidence(claims, judge) == [0.0, 0.75]

    def test_failing_judge_is_surfaced(self):
        claims = [Claim(1, "A", evidence=Evidence(text="proof"))]
        judge = scripted({"*": {"error": "timeout"}})
        with pytest.raises(JudgeError):
            judge_evidence(claims, judge)

"""Backend descriptors, scripted replies, retries, and label handling."""
import json

import httpx
import pytest

from slidecouncil.backends import (
    BackendDescriptor,
    ChatRequest,
    ChatResponse,
    make_scripted_backend,
    make_substring_judge,
    chat_complete,
    classify,
    first_number,
    load_synonym_table,
    normalize_label,
    substring_judge_reply,
)
from slidecouncil.core import (
    EmptyScript,
    Exhausted,
    ProtocolError,
    Timeout,
    UnknownSlide,
)

from conftest import classifier, scripted


def ask(backend, *turns):
    return chat_complete(backend, ChatRequest(user_turns=tuple(turns))).text


class TestScriptedChat:
    def test_exact_last_turn_wins(self):
        backend = scripted({"hello": "hi", "*": "fallback"})
        assert ask(backend, "hello") == "hi"

    def test_substring_containment_over_joined_turns(self):
        backend = scripted({"needle": "found"})
        assert ask(backend, "first turn", "hay needle stack") == "found"

    def test_longest_contained_key_wins(self):
        backend = scripted({"ab": "short", "abcd": "long"})
        assert ask(backend, "xx abcd yy") == "long"

    def test_length_ties_break_lexicographically(self):
        backend = scripted({"bb": "later", "aa": "earlier"})
        assert ask(backend, "aa bb") == "earlier"

    def test_catch_all(self):
        backend = scripted({"*": "default"})
        assert ask(backend, "anything at all") == "default"

    def test_no_match_is_a_protocol_error(self):
        backend = scripted({"only-this": "x"})
        with pytest.raises(ProtocolError):
            ask(backend, "something else")

    def test_scripted_timeout_and_protocol_failures(self):
        t = scripted({"*": {"error": "timeout"}})
        with pytest.raises(Timeout):
            ask(t, "q")
        p = scripted({"*": {"error": "protocol"}})
        with pytest.raises(ProtocolError):
            ask(p, "q")

    def test_reply_object_with_text_field(self):
        backend = scripted({"*": {"text": "wrapped"}})
        assert ask(backend, "q") == "wrapped"

    def test_empty_script_rejected(self):
        with pytest.raises(EmptyScript):
            make_scripted_backend({})

    def test_script_file_endpoint(self, tmp_path):
        path = tmp_path / "replies.json"
        path.write_text(json.dumps({"*": "from disk"}), encoding="utf-8")
        backend = BackendDescriptor(id="b", endpoint=str(path), max_retries=0)
        assert ask(backend, "q") == "from disk"

    def test_classifier_backend_rejects_chat(self):
        backend = classifier({"s": "melanoma"})
        with pytest.raises(ProtocolError):
            ask(backend, "q")


class TestScriptedClassifier:
    def test_slide_ref_lookup(self):
        backend = classifier({"slide-9": "Melanoma"})
        verdict = classify(backend, "slide-9")
        assert verdict.label == "melanoma"
        assert verdict.confidence is None

    def test_catch_all_and_unknown_slide(self):
        backend = classifier({"*": "sarcoma"})
        assert classify(backend, "whatever").label == "sarcoma"
        strict = classifier({"slide-1": "sarcoma"})
        with pytest.raises(UnknownSlide):
            classify(strict, "slide-2")

    def test_label_with_confidence(self):
        backend = classifier({"s": {"label": "Melanoma", "confidence": 0.9}})
        verdict = classify(backend, "s")
        assert verdict.label == "melanoma"
        assert verdict.confidence == 0.9

    def test_label_is_canonicalized_through_synonyms(self):
        backend = classifier({"s": "Malignant  Melanoma"})
        assert classify(backend, "s").label == "melanoma"

    def test_chat_backend_rejects_classify(self):
        backend = scripted({"*": "x"})
        with pytest.raises(ProtocolError):
            classify(backend, "s")


class TestHttpRetries:
    def _bk(self, retries):
        return BackendDescriptor(id="h", endpoint="http://unit.test/v1", max_retries=retries)

    def test_transient_failures_retried_then_succeed(self, monkeypatch):
        calls = {"n": 0}

        def fake_post(url, **kwargs):
            calls["n"] += 1
            if calls["n"] < 3:
                raise httpx.ConnectError("refused")
            return httpx.Response(200, json={"text": "ok"}, request=httpx.Request("POST", url))

        monkeypatch.setattr("slidecouncil.backends.httpx.post", fake_post)
        monkeypatch.setattr("slidecouncil.backends.time.sleep", lambda s: None)
        assert ask(self._bk(retries=2), "q") == "ok"
        assert calls["n"] == 3

    def test_exhausted_after_max_retries(self, monkeypatch):
        def fake_post(url, **kwargs):
            raise httpx.ConnectError("refused")

        monkeypatch.setattr("slidecouncil.backends.httpx.post", fake_post)
        monkeypatch.setattr("slidecouncil.backends.time.sleep", lambda s: None)
        with pytest.raises(Exhausted):
            ask(self._bk(retries=1), "q")

    def test_protocol_errors_are_not_retried(self, monkeypatch):
        calls = {"n": 0}

        def fake_post(url, **kwargs):
            calls["n"] += 1
            return httpx.Response(400, json={}, request=httpx.Request("POST", url))

        monkeypatch.setattr("slidecouncil.backends.httpx.post", fake_post)
        with pytest.raises(ProtocolError):
            ask(self._bk(retries=3), "q")
        assert calls["n"] == 1

    def test_server_errors_are_retried(self, monkeypatch):
        calls = {"n": 0}

        def fake_post(url, **kwargs):
            calls["n"] += 1
            status = 503 if calls["n"] == 1 else 200
            body = {} if status == 503 else {"text": "recovered"}
            return httpx.Response(status, json=body, request=httpx.Request("POST", url))

        monkeypatch.setattr("slidecouncil.backends.httpx.post", fake_post)
        monkeypatch.setattr("slidecouncil.backends.time.sleep", lambda s: None)
        assert ask(self._bk(retries=1), "q") == "recovered"

    def test_timeout_is_reported_as_timeout(self, monkeypatch):
        def fake_post(url, **kwargs):
            raise httpx.ReadTimeout("slow")

        monkeypatch.setattr("slidecouncil.backends.httpx.post", fake_post)
        with pytest.raises(Timeout):
            ask(self._bk(retries=0), "q")

    def test_missing_text_field_is_a_protocol_error(self, monkeypatch):
        def fake_post(url, **kwargs):
            return httpx.Response(200, json={"nope": 1}, request=httpx.Request("POST", url))

        monkeypatch.setattr("slidecouncil.backends.httpx.post", fake_post)
        with pytest.raises(ProtocolError):
            ask(self._bk(retries=0), "q")

    def test_bearer_token_header(self, monkeypatch):
        seen = {}

        def fake_post(url, **kwargs):
            seen.update(kwargs.get("headers") or {})
            return httpx.Response(200, json={"text": "ok"}, request=httpx.Request("POST", url))

        monkeypatch.setattr("slidecouncil.backends.httpx.post", fake_post)
        monkeypatch.setenv("SLIDECOUNCIL_TOKEN", "sekrit")
        ask(self._bk(retries=0), "q")
        assert seen["Authorization"] == "Bearer sekrit"


class TestBuiltinSubstringJudge:
    def test_claim_inside_answer_scores_one(self):
        prompt = "CLAIM: solid nests\n\nANSWER: The tissue shows solid nests."
        assert substring_judge_reply(prompt) == "1"

    def test_match_ignores_case_and_whitespace(self):
        prompt = "CLAIM: Solid   Nests\n\nANSWER: the tissue shows solid nests."
        assert substring_judge_reply(prompt) == "1"

    def test_absent_claim_scores_zero(self):
        prompt = "CLAIM: ulceration\n\nANSWER: No atypia identified."
        assert substring_judge_reply(prompt) == "0"

    def test_malformed_prompt_scores_zero(self):
        assert substring_judge_reply("no sections here") == "0"

    def test_works_through_chat_complete(self):
        judge = make_substring_judge()
        reply = ask(judge, "CLAIM: x\n\nANSWER: has x inside")
        assert reply == "1"


class TestLabelsAndNumbers:
    def test_synonym_chains_resolve_to_fixed_points(self, tmp_path):
        table_file = tmp_path / "syn.tsv"
        table_file.write_text("a\tb\nb\tc\nc\tc\n", encoding="utf-8")
        table = load_synonym_table(table_file)
        assert table["a"] == "c"

    def test_comments_and_blanks_skipped(self, tmp_path):
        table_file = tmp_path / "syn.tsv"
        table_file.write_text("# header\n\nfoo\tbar\n", encoding="utf-8")
        assert load_synonym_table(table_file) == {"foo": "bar"}

    def test_normalize_label_collapses_whitespace(self):
        assert normalize_label("  Invasive   Adenocarcinoma ") == "adenocarcinoma"

    def test_first_number_variants(self):
        assert first_number("score: 0.75 overall") == 0.75
        assert first_number("-2 then 3") == -2.0
        assert first_number("1e-3") == 1e-3
        assert first_number("no digits") is None


class TestChatRequest:
    def test_needs_a_user_turn(self):
        with pytest.raises(ValueError):
            ChatRequest(user_turns=())

    def test_response_latency_nonnegative(self):
        with pytest.raises(ValueError):
            ChatResponse(text="x", backend_id="b", latency_ms=-1)

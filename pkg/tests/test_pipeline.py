"""End-to-end orchestration: configuration, runs, ablations, determinism."""
import json

import pytest

from slidecouncil import Query, load_config, run, run_ablation
from slidecouncil.core import ConfigError, TaskType
from slidecouncil.memory import AgentKind, MemoryStore
from slidecouncil.pipeline import (
    REFUSAL_TEXT,
    Stage,
    config_from_dict,
    derive_session_id,
)

from conftest import FIXTURES, GOLDEN


AGENT_ORDER = {
    AgentKind.TASK: 0,
    AgentKind.EXPERT: 1,
    AgentKind.LOGIC: 2,
    AgentKind.FACT: 2,
    AgentKind.CONSENSUS: 2,
    AgentKind.SUMMARIZING: 3,
    AgentKind.REASONING: 4,
}


def minimal_raw(**overrides):
    raw = {
        "zoo": ["m"],
        "weights": {"logic": 1, "knowledge": 0, "consensus": 0},
        "agents": {"logic_judge": "judge"},
        "backends": [
            {"id": "m", "script": {"*": "One claim."}},
            {"id": "judge", "script": {"*": "1"}},
        ],
    }
    raw.update(overrides)
    return raw


class TestStage:
    def test_parse_tolerates_separators_and_case(self):
        assert Stage.parse("fact-ekv") is Stage.FACT_EKV
        assert Stage.parse("FACT_EKV") is Stage.FACT_EKV
        assert Stage.parse(Stage.ICV) is Stage.ICV

    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigError):
            Stage.parse("Telepathy")


class TestConfigValidation:
    def test_minimal_config_parses(self):
        config = config_from_dict(minimal_raw())
        assert config.zoo == ["m"]

    def test_empty_zoo_rejected(self):
        with pytest.raises(ConfigError, match="zoo"):
            config_from_dict(minimal_raw(zoo=[]))

    def test_zoo_must_be_chat_backends(self):
        raw = minimal_raw()
        raw["backends"][0]["kind"] = "classifier"
        with pytest.raises(ConfigError, match="chat"):
            config_from_dict(raw)

    def test_classifier_panel_must_be_classifiers(self):
        raw = minimal_raw(classifiers=["judge"])
        with pytest.raises(ConfigError, match="classifier"):
            config_from_dict(raw)

    def test_unknown_backend_reference_rejected(self):
        raw = minimal_raw(zoo=["ghost"])
        with pytest.raises(ConfigError, match="ghost"):
            config_from_dict(raw)

    def test_duplicate_backend_ids_rejected(self):
        raw = minimal_raw()
        raw["backends"].append({"id": "m", "script": {"*": "again"}})
        with pytest.raises(ConfigError, match="duplicate"):
            config_from_dict(raw)

    def test_unknown_backend_keys_rejected(self):
        raw = minimal_raw()
        raw["backends"][0]["surprise"] = True
        with pytest.raises(ConfigError, match="surprise"):
            config_from_dict(raw)

    def test_positive_logic_weight_needs_a_judge(self):
        raw = minimal_raw(agents={})
        with pytest.raises(ConfigError, match="logic_judge"):
            config_from_dict(raw)

    def test_knowledge_weight_with_kb_needs_a_fact_judge(self, tmp_path):
        raw = minimal_raw(
            weights={"logic": 0, "knowledge": 1, "consensus": 0},
            agents={},
            knowledge={"manifest": "kb.json"},
        )
        with pytest.raises(ConfigError, match="fact_judge"):
            config_from_dict(raw, tmp_path)

    def test_all_zero_weights_rejected(self):
        raw = minimal_raw(weights={"logic": 0, "knowledge": 0, "consensus": 0})
        with pytest.raises(ConfigError):
            config_from_dict(raw)

    def test_bad_chunk_overlap_rejected(self):
        raw = minimal_raw(knowledge={"chunk_size": 10, "overlap": 10})
        with pytest.raises(ConfigError, match="overlap"):
            config_from_dict(raw)

    def test_offline_backends_default_to_zero_retries(self):
        config = config_from_dict(minimal_raw())
        assert config.backend("m").max_retries == 0

    def test_http_backends_default_to_two_retries(self):
        raw = minimal_raw()
        raw["backends"].append({"id": "remote", "endpoint": "https://x.test/v1"})
        config = config_from_dict(raw)
        assert config.backend("remote").max_retries == 2

    def test_relative_paths_resolve_against_the_base_dir(self, tmp_path):
        (tmp_path / "rules.tsv").write_text("tumor\tGrading\n", encoding="utf-8")
        raw = minimal_raw(routing={"rules_path": "rules.tsv"})
        config = config_from_dict(raw, tmp_path)
        assert config.rules_path == str((tmp_path / "rules.tsv").resolve())


class TestConfigLoading:
    def test_golden_config_loads(self):
        config = load_config(FIXTURES / "golden" / "config.yaml")
        assert config.session_id == "golden-e2e"
        assert config.kb_manifest.endswith("manifest.json")

    def test_non_mapping_config_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("- just\n- a list\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(path)

    def test_unparseable_config_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("zoo: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="parse"):
            load_config(path)


class TestSessionIds:
    def test_derived_id_is_stable_and_query_dependent(self):
        q1 = Query(slide_ref="s", question="one?")
        q2 = Query(slide_ref="s", question="two?")
        assert derive_session_id(q1) == derive_session_id(q1)
        assert derive_session_id(q1) != derive_session_id(q2)
        assert len(derive_session_id(q1)) == 16

    def test_configured_id_wins(self, golden_config, golden_query):
        result = run(golden_query, golden_config)
        assert result.session_id == "golden-e2e"


class TestGoldenRun:
    def test_run_matches_the_golden_file(self, golden_config, golden_query):
        result = run(golden_query, golden_config)
        expected = (GOLDEN / "pipeline_run.json").read_text(encoding="utf-8")
        assert result.to_json() == expected

    def test_scores_and_selection(self, golden_config, golden_query):
        result = run(golden_query, golden_config)
        totals = [r.scores.phi_total for r in result.records]
        assert totals == [1.0, 0.5, 0.95]
        assert result.final.best_response_index == 0
        assert result.final.consensus_round == 2

    def test_log_respects_stage_order(self, golden_config, golden_query):
        result = run(golden_query, golden_config)
        ranks = [AGENT_ORDER[e.agent] for e in result.log_entries]
        assert ranks == sorted(ranks)
        seqs = [e.seq for e in result.log_entries]
        assert seqs == list(range(1, len(seqs) + 1))

    def test_verification_logged_in_candidate_order(self, golden_config, golden_query):
        result = run(golden_query, golden_config)
        logic_entries = [e for e in result.log_entries if e.agent is AgentKind.LOGIC]
        assert [e.response_index for e in logic_entries] == [0, 1, 2]

    def test_caller_supplied_store_is_not_closed(self, golden_config, golden_query):
        store = MemoryStore()
        run(golden_query, golden_config, store=store)
        run(golden_query, golden_config, store=store)
        # same session id: the second run continues the seq numbering
        seqs = [e.seq for e in store.query("golden-e2e")]
        assert seqs == list(range(1, len(seqs) + 1))


class TestMockVerifierSelection:
    def test_best_of_three_scripted_totals(self):
        # logic-only weights; per-candidate pair and evidence judgments
        # give phi_l of 0.2, 0.9, and 0.4
        raw = {
            "zoo": ["ma", "mb", "mc"],
            "weights": {"logic": 1, "knowledge": 0, "consensus": 0},
            "agents": {"claim_extractor": "extract", "logic_judge": "judge"},
            "session": {"suppress_timing": True},
            "backends": [
                {"id": "ma", "script": {"*": "Alpha one. Alpha two."}},
                {"id": "mb", "script": {"*": "Beta one. Beta two."}},
                {"id": "mc", "script": {"*": "Gamma one. Gamma two."}},
                {
                    "id": "extract",
                    "script": {
                        "Alpha one. Alpha two.": '[{"claim": "A1", "evidence": "alpha proof"}, {"claim": "A2", "evidence": "alpha proof"}]',
                        "Beta one. Beta two.": '[{"claim": "B1", "evidence": "beta proof"}, {"claim": "B2", "evidence": "beta proof"}]',
                        "Gamma one. Gamma two.": '[{"claim": "C1", "evidence": "gamma proof"}, {"claim": "C2", "evidence": "gamma proof"}]',
                    },
                },
                {
                    "id": "judge",
                    "script": {
                        "Statement A: A1": "0.4",
                        "Statement A: B1": "1",
                        "Statement A: C1": "0.6",
                        "Evidence: alpha proof": "0",
                        "Evidence: beta proof": "0.8",
                        "Evidence: gamma proof": "0.2",
                    },
                },
            ],
        }
        config = config_from_dict(raw)
        result = run(Query(slide_ref="s", question="What grade is this carcinoma?"), config)
        totals = [round(r.scores.phi_total, 12) for r in result.records]
        assert totals == [0.2, 0.9, 0.4]
        assert result.final.best_response_index == 1
        assert result.final.text == "Beta one. Beta two."


class TestRefusal:
    def test_out_of_scope_short_circuits(self):
        config = config_from_dict(minimal_raw())
        result = run(Query(slide_ref="s", question="What is the capital of France?"), config)
        assert result.refused
        assert result.final.text == REFUSAL_TEXT
        assert result.candidates == []
        assert result.records == []
        agents = {e.agent for e in result.log_entries}
        assert agents == {AgentKind.TASK}


class TestAblations:
    @pytest.mark.parametrize(
        "filename,stage",
        [
            ("ablation_icv.json", "ICV"),
            ("ablation_fact_ekv.json", "FactEKV"),
            ("ablation_consensus_ekv.json", "ConsensusEKV"),
            ("ablation_summarizing.json", "Summarizing"),
            ("ablation_reasoning.json", "Reasoning"),
            ("ablation_task_routing.json", "TaskRouting"),
            ("ablation_expert_selection.json", "ExpertSelection"),
        ],
    )
    def test_ablations_match_their_goldens(self, golden_config, golden_query, filename, stage):
        result = run_ablation(golden_query, golden_config, [stage])
        expected = (GOLDEN / filename).read_text(encoding="utf-8")
        assert result.to_json() == expected

    def test_disabled_icv_zeroes_the_logic_weight(self, golden_config, golden_query):
        result = run_ablation(golden_query, golden_config, ["ICV"])
        totals = [round(r.scores.phi_total, 6) for r in result.records]
        assert totals == [1.0, 0.333333, 0.933333]

    def test_disabled_fact_breaks_ties_deterministically(self, golden_config, golden_query):
        result = run_ablation(golden_query, golden_config, ["FactEKV"])
        totals = [r.scores.phi_total for r in result.records]
        assert totals[0] == totals[2] == 1.0
        assert result.final.best_response_index == 0

    def test_disabled_summarizing_returns_the_raw_best(self, golden_config, golden_query):
        result = run_ablation(golden_query, golden_config, ["Summarizing"])
        assert result.final.text == "The tumor is adenocarcinoma. Glandular structures are present."
        assert result.state is None
        agents = {e.agent for e in result.log_entries}
        assert AgentKind.SUMMARIZING not in agents
        assert AgentKind.REASONING not in agents

    def test_disabled_reasoning_stops_at_the_draft(self, golden_config, golden_query):
        result = run_ablation(golden_query, golden_config, ["Reasoning"])
        assert result.final.text == (
            "The tumor is adenocarcinoma. Glandular structures are present."
            "\n\nSupporting observations:\n- Mitotic figures are frequent"
        )
        assert result.state is None
        assert AgentKind.SUMMARIZING in {e.agent for e in result.log_entries}

    def test_disabled_routing_requires_a_default_task(self, golden_query):
        config = config_from_dict(minimal_raw())
        with pytest.raises(ConfigError, match="default_task"):
            run_ablation(golden_query, config, ["TaskRouting"])

    def test_disabled_routing_uses_the_default(self, golden_config, golden_query):
        result = run_ablation(golden_query, golden_config, ["TaskRouting"])
        assert result.task_type is TaskType.HISTOLOGICAL_TYPING
        routed = result.log_entries[0]
        assert routed.payload["disabled_stages"] == ["TaskRouting"]

    def test_disabled_selection_fans_out_to_the_whole_zoo(self, golden_config, golden_query):
        result = run_ablation(golden_query, golden_config, ["ExpertSelection"])
        assert [c.model_id for c in result.candidates] == [
            "model-a", "model-b", "model-c", "model-d",
        ]
        outsider = result.records[3]
        assert outsider.scores.phi_total == 0.0
        assert not outsider.scores.phi_c_applicable

    def test_multiple_stages_disable_together(self, golden_config, golden_query):
        result = run_ablation(golden_query, golden_config, ["Summarizing", "ICV"])
        assert result.final.text == "The tumor is adenocarcinoma. Glandular structures are present."
        totals = [round(r.scores.phi_total, 6) for r in result.records]
        assert totals == [1.0, 0.333333, 0.933333]


class TestDeterminism:
    def test_repeat_runs_are_byte_identical(self, golden_config, golden_query):
        outputs = {run(golden_query, golden_config).to_json() for _ in range(3)}
        assert len(outputs) == 1

    def test_payload_is_json_round_trippable(self, golden_config, golden_query):
        result = run(golden_query, golden_config)
        parsed = json.loads(result.to_json())
        assert parsed["session_id"] == "golden-e2e"
        assert parsed["final"]["deliberation"]["outcome"] == "Consensus"


class TestFusionIntegration:
    def test_fused_map_lands_in_the_payload(self, tmp_path):
        map_a = tmp_path / "a.json"
        map_b = tmp_path / "b.json"
        map_a.write_text(json.dumps({"rows": 1, "cols": 2, "values": [0.0, 1.0]}))
        map_b.write_text(json.dumps({"rows": 1, "cols": 2, "values": [1.0, 0.0]}))
        raw = minimal_raw(fusion={"maps": ["a.json", "b.json"], "target_grid": [1, 2]})
        config = config_from_dict(raw, tmp_path)
        result = run(Query(slide_ref="s", question="What grade is this carcinoma?"), config)
        assert result.fused is not None
        assert result.fused.degenerate
        payload = result.to_payload()["fused_map"]
        assert payload["values"] == [0.0, 0.0]
        assert payload["source_ids"] == ["a", "b"]


class TestMemorySinkIntegration:
    def test_run_streams_its_log_to_the_sink(self, tmp_path):
        sink = tmp_path / "log.jsonl"
        raw = minimal_raw(memory={"sink": "log.jsonl"}, session={"suppress_timing": True})
        config = config_from_dict(raw, tmp_path)
        result = run(Query(slide_ref="s", question="What grade is this carcinoma?"), config)
        lines = sink.read_text(encoding="utf-8").splitlines()
        assert len(lines) == len(result.log_entries) + 1


class TestPromptTemplates:
    def test_custom_prompts_dir(self, tmp_path, golden_query):
        prompts = tmp_path / "prompts"
        prompts.mkdir()
        for name in ("morphology", "diagnosis", "treatment_planning", "report_generation"):
            (prompts / f"{name}.txt").write_text("CUSTOM TEMPLATE", encoding="utf-8")
        raw = minimal_raw(prompts_dir="prompts")
        raw["backends"][0]["script"] = {"CUSTOM TEMPLATE": "saw the template."}
        config = config_from_dict(raw, tmp_path)
        result = run(golden_query, config)
        assert result.candidates[0].text == "saw the template."

    def test_missing_template_is_a_config_error(self, tmp_path, golden_query):
        (tmp_path / "prompts").mkdir()
        raw = minimal_raw(prompts_dir="prompts")
        config = config_from_dict(raw, tmp_path)
        with pytest.raises(ConfigError, match="template"):
            run(golden_query, config)

import copy
import json

import pytest

from activedx.emitter import (
    TrainingRecord,
    emission_stats,
    emit,
    read_jsonl,
    write_jsonl,
)
from activedx.environment import AVAILABLE
from activedx.errors import RenderMismatch
from activedx.filtering import DISCARDED, FilterConfig, FilterOutcome, filter_trajectory
from activedx.protocol import FREE_FORM, NO_NEW_RESULTS_MARKER, parse_turn_reply, render_initial_prompt
from activedx.rollout import materialize_paths


@pytest.fixture(scope="module")
def filtered(toy_trees, toy_envs, disease_graph, test_graph):
    """(trajectory, outcome, env) for every toy trajectory, keyed by ref."""
    out = {}
    for case_id, tree in toy_trees.items():
        env = toy_envs[case_id]
        for trajectory in materialize_paths(tree):
            _series, outcome = filter_trajectory(
                trajectory, disease_graph, test_graph, env, FilterConfig()
            )
            out[(case_id, trajectory.path_id)] = (trajectory, outcome, env)
    return out


def _emit_one(filtered, case_id, path_id, **kwargs):
    trajectory, outcome, env = filtered[(case_id, path_id)]
    records = emit(trajectory, outcome, env, **kwargs)
    assert len(records) == 1
    return records[0]


class TestEmit:
    def test_full_keep_message_shape(self, filtered):
        record = _emit_one(filtered, "toy-anemia-001", "r0", window_size=2, seed=61)
        roles = [m["role"] for m in record.messages]
        # system + 3 retained turn pairs
        assert roles == ["system", "user", "assistant", "user", "assistant", "user", "assistant"]
        assert record.provenance["case_id"] == "toy-anemia-001"
        assert record.provenance["original_turns"] == [1, 2, 3]
        assert record.provenance["filter_decision"] == "kept_full"
        assert record.provenance["teacher_label"] == "alpha"
        assert record.provenance["seed"] == 61
        assert record.provenance["node_path"].startswith("toy-anemia-001/r0/1")

    def test_assistant_messages_verbatim(self, filtered):
        trajectory, _outcome, _env = filtered[("toy-anemia-001", "r0")]
        record = _emit_one(filtered, "toy-anemia-001", "r0")
        replies = [m["content"] for m in record.messages if m["role"] == "assistant"]
        assert replies == [n.turn.raw_reply for n in trajectory.nodes]

    def test_truncated_drops_tail_context(self, filtered):
        trajectory, outcome, _env = filtered[("toy-anemia-001", "r1")]
        assert outcome.retained_turns == [1, 2]
        record = _emit_one(filtered, "toy-anemia-001", "r1")
        roles = [m["role"] for m in record.messages]
        assert roles == ["system", "user", "assistant", "user", "assistant"]
        dropped = trajectory.nodes[2].turn.raw_reply
        assert all(dropped not in m["content"] for m in record.messages)

    def test_rac_removed_head_rerenders_as_initial(self, filtered, toy_envs):
        # thyroid r0 keeps only original turn 2; its prompt must be the
        # free-form INITIAL prompt, not a follow-up with dangling history
        trajectory, outcome, env = filtered[("toy-thyroid-002", "r0")]
        assert outcome.retained_turns == [2]
        record = _emit_one(filtered, "toy-thyroid-002", "r0")
        assert trajectory.mode == FREE_FORM
        roles = [m["role"] for m in record.messages]
        assert roles == ["system", "user", "assistant"]
        _system, initial_user = render_initial_prompt(env, FREE_FORM)
        assert record.messages[1]["content"] == initial_user
        assert record.messages[2]["content"] == trajectory.nodes[1].turn.raw_reply
        assert record.provenance["original_turns"] == [2]

    def test_non_contiguous_retention_bridges_answers(self, filtered):
        # appendix b0 keeps original turns 1 and 4; the second user prompt
        # must carry turn 1's oracle answers as the new results
        trajectory, outcome, _env = filtered[("toy-appendix-003", "b0")]
        assert outcome.retained_turns == [1, 4]
        record = _emit_one(filtered, "toy-appendix-003", "b0")
        roles = [m["role"] for m in record.messages]
        assert roles == ["system", "user", "assistant", "user", "assistant"]
        followup = record.messages[3]["content"]
        turn1_answers = [a for a in trajectory.nodes[0].oracle_answers if a.status == AVAILABLE]
        assert turn1_answers
        for answer in turn1_answers:
            assert f"- {answer.requested_name}: {answer.result}" in followup
        # nothing from the removed turns leaks into the prompt
        for removed in (trajectory.nodes[1], trajectory.nodes[2]):
            for answer in removed.oracle_answers:
                if answer.result:
                    assert answer.result not in followup
        assert record.provenance["original_turns"] == [1, 4]

    def test_user_prompt_renumbers_turn_summaries(self, filtered):
        record = _emit_one(filtered, "toy-appendix-003", "b0")
        followup = record.messages[3]["content"]
        assert "Turn 1:" in followup
        assert "Turn 4:" not in followup

    def test_discarded_raises(self, filtered):
        trajectory, _outcome, env = filtered[("toy-anemia-001", "r2")]
        with pytest.raises(ValueError):
            emit(trajectory, FilterOutcome(decision=DISCARDED), env)

    def test_empty_retention_raises(self, filtered):
        trajectory, _outcome, env = filtered[("toy-anemia-001", "r0")]
        outcome = FilterOutcome(decision="kept_truncated", retained_turns=[9])
        with pytest.raises(ValueError):
            emit(trajectory, outcome, env)

    def test_tampered_reply_raises_render_mismatch(self, filtered):
        trajectory, outcome, env = filtered[("toy-anemia-001", "r0")]
        tampered = copy.deepcopy(trajectory)
        tampered.nodes[1].turn.raw_reply = "no longer structured"
        with pytest.raises(RenderMismatch):
            emit(tampered, outcome, env)

    def test_emitted_prompts_reparse(self, filtered):
        # every assistant message must still parse in the record's mode
        for (case_id, path_id), (trajectory, outcome, env) in sorted(filtered.items()):
            if outcome.decision == DISCARDED:
                continue
            (record,) = emit(trajectory, outcome, env)
            mode = record.provenance["mode"]
            for message in record.messages:
                if message["role"] == "assistant":
                    parsed = parse_turn_reply(message["content"], mode)
                    assert parsed.raw_reply == message["content"]

    def test_hermetic_prompts(self, filtered):
        for (_case_id, _path_id), (trajectory, outcome, env) in sorted(filtered.items()):
            if outcome.decision == DISCARDED:
                continue
            (record,) = emit(trajectory, outcome, env)
            blob = json.dumps(record.to_json())
            assert "gtsentinel" not in blob


def _mini_record(case_id, node_path, mode="structured", teacher="alpha"):
    return TrainingRecord(
        messages=[{"role": "system", "content": "s"}],
        provenance={
            "case_id": case_id,
            "node_path": node_path,
            "mode": mode,
            "teacher_label": teacher,
        },
    )


class TestWriteJsonl:
    def test_sorted_round_trip(self, tmp_path):
        records = [
            _mini_record("b-case", "b-case/r0/1"),
            _mini_record("a-case", "a-case/r1/1"),
            _mini_record("a-case", "a-case/r0/1"),
        ]
        path = tmp_path / "data.jsonl"
        assert write_jsonl(records, path) == 3
        loaded = read_jsonl(path)
        assert [r.provenance["node_path"] for r in loaded] == [
            "a-case/r0/1",
            "a-case/r1/1",
            "b-case/r0/1",
        ]
        assert [r.to_json() for r in loaded] == [
            r.to_json() for r in sorted(records, key=lambda r: r.provenance["node_path"])
        ]

    def test_sharding(self, tmp_path):
        records = [_mini_record("c", f"c/r{i}/1") for i in range(5)]
        path = tmp_path / "data.jsonl"
        assert write_jsonl(records, path, shard_size=2) == 5
        shards = sorted(p.name for p in tmp_path.glob("data-*.jsonl"))
        assert shards == ["data-00000.jsonl", "data-00001.jsonl", "data-00002.jsonl"]
        sizes = [len(read_jsonl(tmp_path / name)) for name in shards]
        assert sizes == [2, 2, 1]
        assert not (tmp_path / "data.jsonl").exists()

    def test_single_shard_still_suffixed(self, tmp_path):
        records = [_mini_record("c", "c/r0/1")]
        path = tmp_path / "data.jsonl"
        write_jsonl(records, path, shard_size=10)
        assert (tmp_path / "data-00000.jsonl").exists()

    def test_byte_stable(self, filtered, tmp_path):
        records = []
        for (_case_id, _path_id), (trajectory, outcome, env) in sorted(filtered.items()):
            if outcome.decision == DISCARDED:
                continue
            records.extend(emit(trajectory, outcome, env, window_size=2, seed=61))
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        write_jsonl(records, a)
        write_jsonl(list(reversed(records)), b)
        assert a.read_bytes() == b.read_bytes()

    def test_matches_golden_dataset(self, filtered, tmp_path, data_dir):
        records = []
        for (_case_id, _path_id), (trajectory, outcome, env) in sorted(filtered.items()):
            if outcome.decision == DISCARDED:
                continue
            records.extend(emit(trajectory, outcome, env, window_size=2))
        path = tmp_path / "dataset.jsonl"
        write_jsonl(records, path)
        golden = (data_dir / "golden" / "dataset.jsonl").read_bytes()
        assert path.read_bytes() == golden


class TestEmissionStats:
    def test_counts_and_fractions(self):
        records = [
            _mini_record("a", "a/r0/1", mode="structured"),
            _mini_record("a", "a/r1/1", mode="structured"),
            _mini_record("b", "b/r0/1", mode="free_form", teacher="beta"),
            _mini_record("b", "b/r1/1", mode="structured"),
        ]
        stats = emission_stats(records)
        assert stats == {
            "records": 4,
            "by_mode": {"free_form": 1, "structured": 3},
            "mode_fractions": {"free_form": 0.25, "structured": 0.75},
            "by_teacher": {"alpha": 3, "beta": 1},
        }

    def test_empty(self):
        assert emission_stats([]) == {
            "records": 0,
            "by_mode": {},
            "mode_fractions": {},
            "by_teacher": {},
        }

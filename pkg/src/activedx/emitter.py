"""Chat-format training records from filtered trajectories.

Each retained trajectory becomes one record: a system message followed by
alternating user/assistant pairs. User prompts are re-rendered from the
retained turns only, so removed turns leave no dangling context; assistant
messages are the stored raw replies verbatim. Writes are byte-stable:
fixed key order, stable sort, compact separators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from . import PIPELINE_VERSION
from .environment import ClinicalEnvironment
from .errors import RenderMismatch, ReplyParseError
from .filtering import DISCARDED, FilterOutcome
from .protocol import parse_turn_reply, render_followup_prompt, render_initial_prompt
from .rollout import Trajectory


@dataclass
class TrainingRecord:
    messages: list[dict]
    provenance: dict

    def to_json(self) -> dict:
        return {"messages": self.messages, "provenance": self.provenance}


def emit(
    trajectory: Trajectory,
    outcome: FilterOutcome,
    env: ClinicalEnvironment,
    *,
    window_size: int = 2,
    seed: int = 0,
) -> list[TrainingRecord]:
    """Zero or one training record for a filtered trajectory.

    Retained turns are renumbered contiguously for rendering; the original
    indices go to provenance. The first retained turn renders as the initial
    prompt even when original turn 1 was removed.
    """
    if outcome.decision == DISCARDED:
        raise ValueError("cannot emit a discarded trajectory")
    retained_set = set(outcome.retained_turns)
    retained_nodes = [
        node
        for node in trajectory.nodes
        if node.turn is not None and node.turn.turn_index in retained_set
    ]
    if not retained_nodes:
        raise ValueError("outcome retains no turns present in the trajectory")

    # Store-corruption guard: every retained reply must still parse in its
    # recorded mode.
    for node in retained_nodes:
        try:
            parse_turn_reply(node.turn.raw_reply, node.turn.mode, node.turn.turn_index)
        except ReplyParseError as exc:
            raise RenderMismatch(f"{node.node_id}: {exc}") from exc

    renumbered = []
    for position, node in enumerate(retained_nodes, start=1):
        renumbered.append((node, replace(node.turn, turn_index=position)))

    mode = trajectory.mode
    messages: list[dict] = [{"role": "system", "content": render_initial_prompt(env, mode)[0]}]
    for position, (node, _record) in enumerate(renumbered):
        if position == 0:
            _system, user = render_initial_prompt(env, mode)
        else:
            history = [
                (prev_record, prev_node.oracle_answers)
                for prev_node, prev_record in renumbered[:position]
            ]
            prev_node = renumbered[position - 1][0]
            _system, user = render_followup_prompt(
                env,
                history,
                prev_node.oracle_answers,
                window_size=window_size,
                mode=mode,
            )
        messages.append({"role": "user", "content": user})
        messages.append({"role": "assistant", "content": node.turn.raw_reply})

    provenance = {
        "case_id": trajectory.case_id,
        "node_path": "/".join(node.node_id for node in trajectory.nodes),
        "teacher_label": trajectory.nodes[-1].teacher_label,
        "mode": mode,
        "filter_decision": outcome.decision,
        "original_turns": [node.turn.turn_index for node in retained_nodes],
        "pipeline_version": PIPELINE_VERSION,
        "seed": seed,
    }
    return [TrainingRecord(messages=messages, provenance=provenance)]


def _record_sort_key(record: TrainingRecord) -> tuple[str, str]:
    return (record.provenance["case_id"], record.provenance["node_path"])


def write_jsonl(records: list[TrainingRecord], path: str | Path, shard_size: int | None = None) -> int:
    """Write records sorted by (case_id, node_path); returns the count.

    With shard_size, writes ``<stem>-NNNNN<suffix>`` shards of at most that
    many records each.
    """
    ordered = sorted(records, key=_record_sort_key)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def dump(batch: list[TrainingRecord], target: Path) -> None:
        with open(target, "w", encoding="utf-8") as fh:
            for record in batch:
                fh.write(json.dumps(record.to_json(), ensure_ascii=True, separators=(",", ":")) + "\n")

    if shard_size is None or shard_size <= 0 or len(ordered) <= shard_size:
        if shard_size and shard_size > 0:
            dump(ordered, path.with_name(f"{path.stem}-00000{path.suffix}"))
        else:
            dump(ordered, path)
        return len(ordered)

    for shard_index in range(0, (len(ordered) + shard_size - 1) // shard_size):
        batch = ordered[shard_index * shard_size : (shard_index + 1) * shard_size]
        dump(batch, path.with_name(f"{path.stem}-{shard_index:05d}{path.suffix}"))
    return len(ordered)


def read_jsonl(path: str | Path) -> list[TrainingRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            records.append(TrainingRecord(messages=payload["messages"], provenance=payload["provenance"]))
    return records


def emission_stats(records: list[TrainingRecord]) -> dict:
    """Mode mixing accounting over emitted records."""
    total = len(records)
    by_mode: dict[str, int] = {}
    by_teacher: dict[str, int] = {}
    for record in records:
        mode = record.provenance.get("mode", "unknown")
        by_mode[mode] = by_mode.get(mode, 0) + 1
        teacher = record.provenance.get("teacher_label", "unknown")
        by_teacher[teacher] = by_teacher.get(teacher, 0) + 1
    fractions = {mode: round(count / total, 4) for mode, count in sorted(by_mode.items())} if total else {}
    return {
        "records": total,
        "by_mode": dict(sorted(by_mode.items())),
        "mode_fractions": fractions,
        "by_teacher": dict(sorted(by_teacher.items())),
    }

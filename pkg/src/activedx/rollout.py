"""Tree-structured trajectory sampling over clinical environments.

Per case: k_root independent root paths per teacher, then branch_points
extra continuations launched from seeded-uniform intermediate nodes of the
completed root paths. Every stochastic decision (free-form assignment,
branch selection) derives from a hash-keyed RNG so an interrupted run can
resume and reproduce the identical tree byte for byte.
"""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .environment import ClinicalEnvironment, OracleAnswer, OracleBackend, query_oracle
from .errors import ActiveDxError, EmptyTree, GatewayError, ReplyParseError, ScriptMiss
from .gateway import (
    DEFAULT_MAX_OUTPUT_TOKENS,
    DEFAULT_TEMPERATURE,
    ChatBackend,
    ChatRequest,
    RetryPolicy,
    TeacherSpec,
    complete,
)
from .protocol import (
    CONTINUE,
    DONE,
    FORMAT_REMINDER,
    FREE_FORM,
    STRUCTURED,
    DdxEntry,
    TurnRecord,
    extract_tests,
    parse_turn_reply,
    render_followup_prompt,
    render_initial_prompt,
    render_oracle_results,
)
from .textnorm import normalize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RolloutConfig:
    t_max: int = 8
    k_root: int = 3
    branch_points: int = 1
    window_size: int = 2
    free_form_ratio: float = 0.10
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    seed: int = 0
    teachers: tuple[TeacherSpec, ...] = ()

    def snapshot(self) -> dict:
        return {
            "t_max": self.t_max,
            "k_root": self.k_root,
            "branch_points": self.branch_points,
            "window_size": self.window_size,
            "free_form_ratio": self.free_form_ratio,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "seed": self.seed,
            "teachers": [t.label for t in self.teachers],
        }


@dataclass
class TrajectoryNode:
    node_id: str
    parent_id: str | None
    case_id: str
    teacher_label: str
    branch_tag: str
    turn: TurnRecord | None
    oracle_answers: list[OracleAnswer] = field(default_factory=list)
    failure: str | None = None

    def is_terminal(self, t_max: int) -> bool:
        if self.failure is not None:
            return True
        assert self.turn is not None
        return self.turn.status == DONE or self.turn.turn_index >= t_max


@dataclass
class TrajectoryTree:
    case_id: str
    nodes: list[TrajectoryNode] = field(default_factory=list)
    config_snapshot: dict = field(default_factory=dict)

    def children(self) -> dict[str, list[TrajectoryNode]]:
        by_parent: dict[str, list[TrajectoryNode]] = {}
        for node in self.nodes:
            if node.parent_id is not None:
                by_parent.setdefault(node.parent_id, []).append(node)
        return by_parent

    def by_id(self) -> dict[str, TrajectoryNode]:
        return {node.node_id: node for node in self.nodes}


@dataclass
class Trajectory:
    case_id: str
    path_id: str
    mode: str
    nodes: list[TrajectoryNode]

    def turns(self) -> list[TurnRecord]:
        return [node.turn for node in self.nodes if node.turn is not None]


# --- seeded decision streams -------------------------------------------------


def _mode_for_path(seed: int, case_id: str, branch_tag: str, ratio: float) -> str:
    rng = random.Random(f"{seed}|{case_id}|mode|{branch_tag}")
    return FREE_FORM if rng.random() < ratio else STRUCTURED


def _branch_choice(seed: int, case_id: str, index: int, n_candidates: int) -> int:
    rng = random.Random(f"{seed}|{case_id}|branch|{index}")
    return rng.randrange(n_candidates)


# --- single turn -------------------------------------------------------------


def _known_test_keys(path: Sequence[TrajectoryNode]) -> set[str]:
    known: set[str] = set()
    for node in path:
        for answer in node.oracle_answers:
            known.add(normalize(answer.requested_name))
            if answer.matched_entry:
                known.add(normalize(answer.matched_entry))
    return known


def run_turn(
    env: ClinicalEnvironment,
    path: Sequence[TrajectoryNode],
    teacher: TeacherSpec,
    mode: str,
    *,
    config: RolloutConfig,
    backend: ChatBackend,
    branch_tag: str,
    oracle: OracleBackend | None = None,
    retry_policy: RetryPolicy | None = None,
) -> TrajectoryNode:
    """Run one reason-act turn on top of ``path``.

    Renders the prompt, queries the teacher, parses the reply (one retry
    with a format reminder before giving up), extracts ordered tests,
    filters out everything already ordered or known UNAVAILABLE, and queries
    the oracle only for the remainder. Parser and gateway failures come back
    as a failure-marked terminal node, never as an exception.
    """
    turn_index = len(path) + 1
    if turn_index > config.t_max:
        raise ValueError(f"path already at t_max={config.t_max}")
    if path:
        last = path[-1]
        if last.failure is not None or (last.turn is not None and last.turn.status != CONTINUE):
            raise ValueError("cannot extend a terminal path")

    if not path:
        system, user = render_initial_prompt(env, mode)
        new_answers: list[OracleAnswer] = []
    else:
        history = [(node.turn, node.oracle_answers) for node in path if node.turn is not None]
        new_answers = list(path[-1].oracle_answers)
        system, user = render_followup_prompt(
            env, history, new_answers, window_size=config.window_size, mode=mode
        )

    node_id = f"{env.case_id}/{branch_tag}/{turn_index}"
    parent_id = path[-1].node_id if path else None
    metadata = {"case_id": env.case_id, "branch": branch_tag, "turn": str(turn_index)}

    def ask(user_text: str) -> str:
        request = ChatRequest(
            model_id=teacher.model_id or teacher.label,
            messages=(("system", system), ("user", user_text)),
            temperature=config.temperature,
            max_output_tokens=config.max_output_tokens,
            metadata=metadata,
        )
        return complete(request, backend, retry_policy)

    record: TurnRecord | None = None
    failure: str | None = None
    try:
        raw = ask(user)
        try:
            record = parse_turn_reply(raw, mode, turn_index)
        except ReplyParseError:
            raw = ask(user + FORMAT_REMINDER)
            record = parse_turn_reply(raw, mode, turn_index)
    except ReplyParseError as exc:
        failure = f"parse:{type(exc).__name__}:{exc}"
    except (GatewayError, ScriptMiss) as exc:
        failure = f"gateway:{type(exc).__name__}:{exc}"

    if failure is not None:
        logger.warning("turn %s failed: %s", node_id, failure)
        return TrajectoryNode(
            node_id=node_id,
            parent_id=parent_id,
            case_id=env.case_id,
            teacher_label=teacher.label,
            branch_tag=branch_tag,
            turn=None,
            oracle_answers=[],
            failure=failure,
        )

    assert record is not None
    record.observation_digest = render_oracle_results(new_answers) if path else ""

    ordered = extract_tests(record)
    known = _known_test_keys(path)
    fresh: list[str] = []
    for name in ordered:
        if normalize(name) not in known:
            fresh.append(name)
    answers = query_oracle(env, fresh, oracle) if fresh else []

    return TrajectoryNode(
        node_id=node_id,
        parent_id=parent_id,
        case_id=env.case_id,
        teacher_label=teacher.label,
        branch_tag=branch_tag,
        turn=record,
        oracle_answers=answers,
    )


# --- tree growth -------------------------------------------------------------


def _grow_path(
    env: ClinicalEnvironment,
    prefix: list[TrajectoryNode],
    teacher: TeacherSpec,
    mode: str,
    branch_tag: str,
    *,
    config: RolloutConfig,
    backend: ChatBackend,
    oracle: OracleBackend | None,
    retry_policy: RetryPolicy | None,
    on_node: Callable[[TrajectoryNode], None],
) -> list[TrajectoryNode]:
    """Extend ``prefix`` until DONE, failure, or the turn budget."""
    path = list(prefix)
    while len(path) < config.t_max:
        node = run_turn(
            env,
            path,
            teacher,
            mode,
            config=config,
            backend=backend,
            branch_tag=branch_tag,
            oracle=oracle,
            retry_policy=retry_policy,
        )
        path.append(node)
        on_node(node)
        if node.is_terminal(config.t_max):
            break
    return path


def _path_of(tree_nodes: Sequence[TrajectoryNode], leaf: TrajectoryNode) -> list[TrajectoryNode]:
    by_id = {node.node_id: node for node in tree_nodes}
    path = [leaf]
    while path[0].parent_id is not None:
        path.insert(0, by_id[path[0].parent_id])
    return path


def _path_mode(path: Sequence[TrajectoryNode], config: RolloutConfig, case_id: str) -> str:
    for node in path:
        if node.turn is not None:
            return node.turn.mode
    # Failure before any parsed turn: recompute the root draw.
    return _mode_for_path(config.seed, case_id, path[0].branch_tag, config.free_form_ratio)


def run_tree(
    env: ClinicalEnvironment,
    config: RolloutConfig,
    backends: dict[str, ChatBackend],
    *,
    oracle: OracleBackend | None = None,
    retry_policy: RetryPolicy | None = None,
    existing: Sequence[TrajectoryNode] = (),
    on_node: Callable[[TrajectoryNode], None] | None = None,
) -> TrajectoryTree:
    """Grow (or finish growing) the trajectory tree for one case.

    ``existing`` nodes from a partially written store are trusted verbatim;
    only the missing turns are generated, in the same deterministic order an
    uninterrupted run would use. ``on_node`` fires once per newly generated
    node, in emission order.
    """
    if not config.teachers:
        raise ValueError("config.teachers must be non-empty")
    emit = on_node or (lambda node: None)
    tree = TrajectoryTree(case_id=env.case_id, config_snapshot=config.snapshot())
    tree.nodes.extend(existing)

    by_tag: dict[str, list[TrajectoryNode]] = {}
    for node in existing:
        by_tag.setdefault(node.branch_tag, []).append(node)

    def record_node(node: TrajectoryNode) -> None:
        tree.nodes.append(node)
        by_tag.setdefault(node.branch_tag, []).append(node)
        emit(node)

    def tag_complete(nodes: list[TrajectoryNode]) -> bool:
        return bool(nodes) and nodes[-1].is_terminal(config.t_max)

    # Root paths, teacher-major order.
    root_specs: list[tuple[str, TeacherSpec]] = []
    for ti, teacher in enumerate(config.teachers):
        for k in range(config.k_root):
            root_specs.append((f"r{ti * config.k_root + k}", teacher))

    for tag, teacher in root_specs:
        stored = by_tag.get(tag, [])
        if tag_complete(stored):
            continue
        mode = _mode_for_path(config.seed, env.case_id, tag, config.free_form_ratio)
        _grow_path(
            env,
            stored,
            teacher,
            mode,
            tag,
            config=config,
            backend=backends[teacher.label],
            oracle=oracle,
            retry_policy=retry_policy,
            on_node=record_node,
        )

    if all(
        (by_tag.get(tag, []) and by_tag[tag][0].failure is not None) or not by_tag.get(tag)
        for tag, _ in root_specs
    ):
        raise EmptyTree(env.case_id)

    # Branch launches: seeded-uniform over non-terminal intermediate nodes
    # (turn >= 2, CONTINUE, below budget) of completed root paths, insertion
    # order. Candidate list depends only on the finished roots, so resume
    # reproduces the same picks.
    root_tags = {tag for tag, _ in root_specs}
    candidates = [
        node
        for node in tree.nodes
        if node.branch_tag in root_tags
        and node.failure is None
        and node.turn is not None
        and node.turn.status == CONTINUE
        and 2 <= node.turn.turn_index < config.t_max
    ]
    for i in range(config.branch_points):
        if not candidates:
            break
        tag = f"b{i}"
        pick = candidates[_branch_choice(config.seed, env.case_id, i, len(candidates))]
        stored = by_tag.get(tag, [])
        if tag_complete(stored):
            continue
        prefix = _path_of(tree.nodes, pick) + stored
        mode = _path_mode(_path_of(tree.nodes, pick), config, env.case_id)
        # Continuation teacher: first teacher with a different label, else
        # the same teacher re-sampled.
        teacher = next(
            (t for t in config.teachers if t.label != pick.teacher_label),
            next(t for t in config.teachers if t.label == pick.teacher_label),
        )
        _grow_path(
            env,
            prefix,
            teacher,
            mode,
            tag,
            config=config,
            backend=backends[teacher.label],
            oracle=oracle,
            retry_policy=retry_policy,
            on_node=record_node,
        )

    return tree


def materialize_paths(tree: TrajectoryTree) -> list[Trajectory]:
    """One trajectory per leaf, root-to-leaf order, prefixes copied by value.

    A failure node truncates its path at the last valid turn; paths left
    empty by that (failure at turn 1) are excluded here and only show up in
    tree_stats.
    """
    children = tree.children()
    trajectories = []
    for node in tree.nodes:
        if children.get(node.node_id):
            continue
        path = _path_of(tree.nodes, node)
        valid = []
        for item in path:
            if item.failure is not None:
                break
            valid.append(item)
        if not valid:
            continue
        mode = valid[0].turn.mode if valid[0].turn is not None else STRUCTURED
        trajectories.append(
            Trajectory(
                case_id=tree.case_id,
                path_id=node.branch_tag,
                mode=mode,
                nodes=copy.deepcopy(valid),
            )
        )
    return trajectories


def tree_stats(tree: TrajectoryTree) -> dict:
    children = tree.children()
    leaves = [node for node in tree.nodes if not children.get(node.node_id)]
    failed_paths = sum(1 for leaf in leaves if leaf.failure is not None)
    excluded = sum(1 for leaf in leaves if leaf.failure is not None and leaf.parent_id is None)
    return {
        "nodes": len(tree.nodes),
        "paths": len(leaves),
        "failed_paths": failed_paths,
        "excluded_paths": excluded,
        "free_form_paths": sum(
            1
            for leaf in leaves
            if leaf.turn is not None and leaf.turn.mode == FREE_FORM
        ),
    }


# --- store (JSONL, one file per case, append-only) ---------------------------


def _ddx_to_json(entries: list[DdxEntry]) -> list[dict]:
    return [{"rank": e.rank, "diagnosis": e.diagnosis, "rationale": e.rationale} for e in entries]


def _turn_to_json(turn: TurnRecord | None) -> dict | None:
    if turn is None:
        return None
    return {
        "turn_index": turn.turn_index,
        "observation_digest": turn.observation_digest,
        "chain_of_thought": turn.chain_of_thought,
        "ddx": _ddx_to_json(turn.ddx),
        "pivot": turn.pivot,
        "primary_actions": [[n, p] for n, p in turn.primary_actions],
        "additional_info": (
            turn.additional_info
            if isinstance(turn.additional_info, str)
            else [[c, r] for c, r in turn.additional_info]
        ),
        "status": turn.status,
        "conclusion": turn.conclusion,
        "raw_reply": turn.raw_reply,
        "mode": turn.mode,
        "sections": dict(turn.sections),
    }


def _turn_from_json(payload: dict | None) -> TurnRecord | None:
    if payload is None:
        return None
    additional = payload["additional_info"]
    if not isinstance(additional, str):
        additional = [(c, r) for c, r in additional]
    return TurnRecord(
        turn_index=payload["turn_index"],
        observation_digest=payload["observation_digest"],
        chain_of_thought=payload["chain_of_thought"],
        ddx=[DdxEntry(rank=d["rank"], diagnosis=d["diagnosis"], rationale=d["rationale"]) for d in payload["ddx"]],
        pivot=payload["pivot"],
        primary_actions=[(n, p) for n, p in payload["primary_actions"]],
        additional_info=additional,
        status=payload["status"],
        conclusion=payload["conclusion"],
        raw_reply=payload["raw_reply"],
        mode=payload["mode"],
        sections=dict(payload["sections"]),
    )


def node_to_json(node: TrajectoryNode) -> dict:
    return {
        "kind": "node",
        "node_id": node.node_id,
        "parent_id": node.parent_id,
        "case_id": node.case_id,
        "teacher_label": node.teacher_label,
        "branch_tag": node.branch_tag,
        "turn": _turn_to_json(node.turn),
        "oracle_answers": [
            {
                "requested_name": a.requested_name,
                "status": a.status,
                "result": a.result,
                "matched_entry": a.matched_entry,
            }
            for a in node.oracle_answers
        ],
        "failure": node.failure,
    }


def node_from_json(payload: dict) -> TrajectoryNode:
    return TrajectoryNode(
        node_id=payload["node_id"],
        parent_id=payload["parent_id"],
        case_id=payload["case_id"],
        teacher_label=payload["teacher_label"],
        branch_tag=payload["branch_tag"],
        turn=_turn_from_json(payload["turn"]),
        oracle_answers=[
            OracleAnswer(
                requested_name=a["requested_name"],
                status=a["status"],
                result=a["result"],
                matched_entry=a["matched_entry"],
            )
            for a in payload["oracle_answers"]
        ],
        failure=payload["failure"],
    )


def _dump_line(payload: dict) -> str:
    return json.dumps(payload, ensure_ascii=True, separators=(",", ":"))


def store_path(store_dir: str | Path, case_id: str) -> Path:
    return Path(store_dir) / f"{case_id}.jsonl"


def save_tree(tree: TrajectoryTree, store_dir: str | Path) -> Path:
    path = store_path(store_dir, tree.case_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_line({"kind": "tree_meta", "case_id": tree.case_id, "config": tree.config_snapshot}) + "\n")
        for node in tree.nodes:
            fh.write(_dump_line(node_to_json(node)) + "\n")
    return path


def load_store_nodes(path: str | Path) -> tuple[dict | None, list[TrajectoryNode]]:
    """Read back (meta, nodes), dropping a torn trailing line if present."""
    meta = None
    nodes: list[TrajectoryNode] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("%s: dropping torn trailing line", path)
                break
            if payload.get("kind") == "tree_meta":
                meta = payload
            elif payload.get("kind") == "node":
                nodes.append(node_from_json(payload))
    return meta, nodes


def load_tree(path: str | Path) -> TrajectoryTree:
    meta, nodes = load_store_nodes(path)
    if meta is None:
        raise ActiveDxError(f"{path}: missing tree_meta line")
    return TrajectoryTree(case_id=meta["case_id"], nodes=nodes, config_snapshot=meta.get("config", {}))

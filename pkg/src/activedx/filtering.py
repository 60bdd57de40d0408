"""Knowledge-graph filtering of distilled trajectories.

Two per-turn metrics judge a trajectory: DTC (hop distance from the
turn's top differential to the ground-truth disease node) and RAC (how far
the turn-to-turn differential change strays from the previous turn's
actions on the test-disease graph). DTC drives a backward-scan truncation;
RAC removes the turn preceding any ungrounded differential jump, in one
pass over the original series.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .environment import ClinicalEnvironment
from .errors import GroundTruthUnlinkable
from .graph import UNREACHABLE, KnowledgeGraph, LinkResult, hop_distance, link_entity
from .protocol import TurnRecord, extract_tests
from .rollout import Trajectory

logger = logging.getLogger(__name__)

KEPT_FULL = "kept_full"
KEPT_TRUNCATED = "kept_truncated"
DISCARDED = "discarded"

REASON_DTC = "dtc_truncation"
REASON_RAC = "rac_ungrounded"

FLAG_DTC1_ZERO_DISCARDED = "dtc1_zero_discarded"
FLAG_TURN1_UNLINKED = "turn1_unlinked"
FLAG_MISSING_TURN1_DDX = "missing_turn1_ddx"

MODE_DTC_RAC = "dtc-rac"
MODE_CORRECTNESS = "correctness"
MODE_NONE = "none"


@dataclass(frozen=True)
class FilterConfig:
    tau_rac: float = 3.0
    unreachable_cap: int = 99
    require_turn1_link: bool = True
    include_additional_requests: bool = True
    mode: str = MODE_DTC_RAC

    def snapshot(self) -> dict:
        return {
            "tau_rac": self.tau_rac,
            "unreachable_cap": self.unreachable_cap,
            "require_turn1_link": self.require_turn1_link,
            "include_additional_requests": self.include_additional_requests,
            "mode": self.mode,
        }


@dataclass
class MetricSeries:
    trajectory_ref: str
    dtc: list[tuple[int, float]] = field(default_factory=list)
    rac: list[tuple[int, float]] = field(default_factory=list)
    # (turn_index, text, role) for every string that failed to link.
    link_failures: list[tuple[int, str, str]] = field(default_factory=list)


@dataclass
class FilterOutcome:
    decision: str
    retained_turns: list[int] = field(default_factory=list)
    removed_turns: list[tuple[int, str]] = field(default_factory=list)
    t_star: int | None = None
    flags: tuple[str, ...] = ()


def _capped(distance: float, cap: int) -> float:
    return float(cap) if distance == UNREACHABLE else float(distance)


def _link(graph: KnowledgeGraph, text: str, linker) -> LinkResult:
    if linker is not None:
        return linker(text)
    return link_entity(graph, text)


def compute_dtc(
    trajectory: Trajectory,
    disease_graph: KnowledgeGraph,
    env: ClinicalEnvironment,
    *,
    cap: int = 99,
    linker=None,
) -> tuple[list[tuple[int, float]], list[tuple[int, str, str]]]:
    """Per-turn distance-to-correct series.

    One entry per turn with a parseable top differential. Unlinkable top
    differentials score the cap and are recorded as link failures;
    UNREACHABLE maps to the cap. Raises GroundTruthUnlinkable if the
    case's ground truth has no disease-graph node.
    """
    gt_link = _link(disease_graph, env.ground_truth_diagnosis, linker)
    if gt_link.node_id is None:
        raise GroundTruthUnlinkable(env.case_id)

    series: list[tuple[int, float]] = []
    failures: list[tuple[int, str, str]] = []
    for record in trajectory.turns():
        top = record.top_diagnosis()
        if top is None:
            continue
        link = _link(disease_graph, top, linker)
        if link.node_id is None:
            failures.append((record.turn_index, top, "diagnosis"))
            series.append((record.turn_index, float(cap)))
            continue
        hops = hop_distance(disease_graph, link.node_id, gt_link.node_id)
        series.append((record.turn_index, _capped(hops, cap)))
    return series, failures


def _linked_ddx_ids(
    record: TurnRecord,
    test_graph: KnowledgeGraph,
    linker,
    failures: list[tuple[int, str, str]],
) -> set[str]:
    ids: set[str] = set()
    for entry in record.ddx:
        link = _link(test_graph, entry.diagnosis, linker)
        if link.node_id is None:
            failures.append((record.turn_index, entry.diagnosis, "diagnosis"))
        else:
            ids.add(link.node_id)
    return ids


def compute_rac(
    trajectory: Trajectory,
    test_graph: KnowledgeGraph,
    *,
    cap: int = 99,
    include_additional: bool = True,
    linker=None,
) -> tuple[list[tuple[int, float]], list[tuple[int, str, str]]]:
    """Reason-action consistency series for turns >= 2.

    RAC_t averages, over the symmetric difference of linked differential
    node sets between turns t-1 and t, the hop distance to the nearest
    turn-(t-1) action node. An empty difference scores 0; a non-empty
    difference with no previous actions scores the cap; unlinkable actions
    and UNREACHABLE hops count as the cap. Unlinkable differential entries
    are excluded from the difference and logged.
    """
    failures: list[tuple[int, str, str]] = []
    turns = trajectory.turns()
    series: list[tuple[int, float]] = []

    linked_ddx: dict[int, set[str]] = {}
    for record in turns:
        linked_ddx[record.turn_index] = _linked_ddx_ids(record, test_graph, linker, failures)

    by_index = {record.turn_index: record for record in turns}
    for record in turns:
        t = record.turn_index
        prev = by_index.get(t - 1)
        if t < 2 or prev is None:
            continue
        delta = linked_ddx[t] ^ linked_ddx[t - 1]
        if not delta:
            series.append((t, 0.0))
            continue
        actions = extract_tests(prev, include_additional=include_additional)
        if not actions:
            series.append((t, float(cap)))
            continue
        action_ids: list[str | None] = []
        for action in actions:
            link = _link(test_graph, action, linker)
            if link.node_id is None:
                failures.append((prev.turn_index, action, "action"))
                action_ids.append(None)
            else:
                action_ids.append(link.node_id)
        total = 0.0
        for disease_id in sorted(delta):
            best = float(cap)
            for action_id in action_ids:
                if action_id is None:
                    distance = float(cap)  # unlinkable action counts as the cap
                else:
                    distance = _capped(hop_distance(test_graph, disease_id, action_id), cap)
                best = min(best, distance)
            total += best
        series.append((t, total / len(delta)))
    return series, failures


def prune_dtc(trajectory: Trajectory, dtc: list[tuple[int, float]]) -> FilterOutcome:
    """Backward-scan truncation against the turn-1 baseline.

    Finds the largest t in [2, T] with DTC_t <= DTC_1; retains turns 1..t*,
    removes the rest as dtc_truncation; discards the trajectory when no such
    t* exists (including 1-turn trajectories).
    """
    turns = trajectory.turns()
    total = len(turns)
    dmap = dict(dtc)
    if 1 not in dmap:
        return FilterOutcome(decision=DISCARDED, flags=(FLAG_MISSING_TURN1_DDX,))
    baseline = dmap[1]

    t_star: int | None = None
    for t in range(total, 1, -1):
        if t in dmap and dmap[t] <= baseline:
            t_star = t
            break
    if t_star is None:
        flags = (FLAG_DTC1_ZERO_DISCARDED,) if baseline == 0 else ()
        return FilterOutcome(decision=DISCARDED, flags=flags)

    retained = list(range(1, t_star + 1))
    removed = [(t, REASON_DTC) for t in range(t_star + 1, total + 1)]
    decision = KEPT_FULL if t_star == total else KEPT_TRUNCATED
    return FilterOutcome(decision=decision, retained_turns=retained, removed_turns=removed, t_star=t_star)


def prune_rac(
    outcome: FilterOutcome,
    rac: list[tuple[int, float]],
    config: FilterConfig,
) -> FilterOutcome:
    """Single-pass RAC removals over the DTC-retained prefix.

    For every retained t >= 2 whose original-series RAC exceeds tau, turn
    t-1 is removed (turn 1 included). Flags are computed from the original
    series only, so re-applying with the same series is a no-op.
    """
    if outcome.decision == DISCARDED:
        return outcome
    racmap = dict(rac)
    retained_set = set(outcome.retained_turns)
    to_remove = sorted(
        {
            t - 1
            for t in outcome.retained_turns
            if t >= 2 and racmap.get(t, 0.0) > config.tau_rac and (t - 1) in retained_set
        }
    )
    if not to_remove:
        return outcome
    retained = [t for t in outcome.retained_turns if t not in set(to_remove)]
    removed = list(outcome.removed_turns) + [(t, REASON_RAC) for t in to_remove]
    removed.sort()
    if not retained:
        return replace(outcome, decision=DISCARDED, retained_turns=[], removed_turns=removed)
    return replace(outcome, decision=KEPT_TRUNCATED, retained_turns=retained, removed_turns=removed)


def filter_trajectory(
    trajectory: Trajectory,
    disease_graph: KnowledgeGraph,
    test_graph: KnowledgeGraph,
    env: ClinicalEnvironment,
    config: FilterConfig | None = None,
) -> tuple[MetricSeries, FilterOutcome]:
    """Metrics plus the filter decision for one trajectory, honoring mode."""
    config = config or FilterConfig()
    cap = config.unreachable_cap
    ref = f"{trajectory.case_id}/{trajectory.path_id}"

    dtc, dtc_failures = compute_dtc(trajectory, disease_graph, env, cap=cap)
    rac, rac_failures = compute_rac(
        trajectory, test_graph, cap=cap, include_additional=config.include_additional_requests
    )
    series = MetricSeries(trajectory_ref=ref, dtc=dtc, rac=rac, link_failures=dtc_failures + rac_failures)

    total = len(trajectory.turns())
    all_turns = list(range(1, total + 1))

    if config.mode == MODE_NONE:
        return series, FilterOutcome(decision=KEPT_FULL, retained_turns=all_turns, t_star=total or None)

    if config.mode == MODE_CORRECTNESS:
        dmap = dict(dtc)
        final = dmap.get(total)
        if final == 0:
            return series, FilterOutcome(decision=KEPT_FULL, retained_turns=all_turns, t_star=total)
        return series, FilterOutcome(decision=DISCARDED)

    dmap = dict(dtc)
    if 1 not in dmap:
        return series, FilterOutcome(decision=DISCARDED, flags=(FLAG_MISSING_TURN1_DDX,))
    if config.require_turn1_link and any(
        turn == 1 and role == "diagnosis" for turn, _text, role in dtc_failures
    ):
        return series, FilterOutcome(decision=DISCARDED, flags=(FLAG_TURN1_UNLINKED,))

    outcome = prune_dtc(trajectory, dtc)
    outcome = prune_rac(outcome, rac, config)
    return series, outcome


def retention_stats(outcomes: list[FilterOutcome]) -> dict:
    """Retention percentages and a removal-reason histogram."""
    total = len(outcomes)
    counts = {KEPT_FULL: 0, KEPT_TRUNCATED: 0, DISCARDED: 0}
    histogram: dict[str, int] = {REASON_DTC: 0, REASON_RAC: 0}
    flag_counts: dict[str, int] = {}
    retained_turns = 0
    removed_turns = 0
    for outcome in outcomes:
        counts[outcome.decision] += 1
        retained_turns += len(outcome.retained_turns)
        removed_turns += len(outcome.removed_turns)
        for _turn, reason in outcome.removed_turns:
            histogram[reason] = histogram.get(reason, 0) + 1
        for flag in outcome.flags:
            flag_counts[flag] = flag_counts.get(flag, 0) + 1

    def pct(n: int) -> float:
        return round(100.0 * n / total, 2) if total else 0.0

    return {
        "trajectories": total,
        "kept_full": counts[KEPT_FULL],
        "kept_truncated": counts[KEPT_TRUNCATED],
        "discarded": counts[DISCARDED],
        "kept_full_pct": pct(counts[KEPT_FULL]),
        "kept_truncated_pct": pct(counts[KEPT_TRUNCATED]),
        "discarded_pct": pct(counts[DISCARDED]),
        "retained_turns": retained_turns,
        "removed_turns": removed_turns,
        "removal_reasons": histogram,
        "flags": dict(sorted(flag_counts.items())),
    }

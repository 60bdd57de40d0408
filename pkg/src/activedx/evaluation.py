"""Offline evaluation: run a model on held-out cases and score it.

Scoring has two halves: test recommendation (precision/recall/F1 of ordered
tests against the documented ground-truth tests) and final-diagnosis
accuracy. Both default to deterministic matchers (shared normalization, a
synonym table, a token-subset rule, disease-graph linker equality); chat
backends are opt-in replacements.
"""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass, field

from .environment import ClinicalEnvironment
from .errors import EmptyTree, JudgeParseError
from .gateway import ChatBackend, TeacherSpec
from .graph import KnowledgeGraph, link_entity, synonyms_from_graph
from .protocol import extract_tests
from .rollout import RolloutConfig, Trajectory, materialize_paths, run_tree
from .textnorm import dedupe_normalized, normalize, split_compound, token_set

logger = logging.getLogger(__name__)

# Abbreviations the deterministic matcher always understands; a graph-derived
# table (synonyms_from_graph) extends this at call sites that have a graph.
DEFAULT_SYNONYMS: dict[str, str] = {
    "cbc": "complete blood count",
    "cxr": "chest x ray",
    "cmp": "comprehensive metabolic panel",
    "tsh": "thyroid stimulating hormone",
    "crp": "c reactive protein",
    "esr": "erythrocyte sedimentation rate",
    "ecg": "electrocardiogram",
    "ekg": "electrocardiogram",
    "ua": "urinalysis",
}


@dataclass(frozen=True)
class EvalConfig:
    t_max: int = 8
    window_size: int = 2
    seed: int = 0
    repeats: int = 1
    granularity: str = "case"  # "case" | "turn"


@dataclass
class MatchReport:
    gt_covered: list[str] = field(default_factory=list)
    gt_uncovered: list[str] = field(default_factory=list)
    pred_used: list[str] = field(default_factory=list)
    pred_unused: list[str] = field(default_factory=list)

    def precision(self) -> float:
        predicted = len(self.pred_used) + len(self.pred_unused)
        return len(self.pred_used) / predicted if predicted else 0.0

    def recall(self) -> float:
        ground_truth = len(self.gt_covered) + len(self.gt_uncovered)
        return len(self.gt_covered) / ground_truth if ground_truth else 0.0


@dataclass
class CaseScore:
    case_id: str
    precision: float
    recall: float
    f1: float
    diagnosis_correct: bool
    turns_used: int
    flags: tuple[str, ...] = ()


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# --- test matching -----------------------------------------------------------


def _canonical_tokens(name: str, synonyms: dict[str, str]) -> frozenset[str]:
    phrase = normalize(name)
    phrase = synonyms.get(phrase, phrase)
    return token_set(phrase)


def _covers(pred: str, gt_component: str, synonyms: dict[str, str]) -> bool:
    # Subset rule: the prediction's tokens must all appear in the GT item
    # ("MRI Brain" covers "MRI Brain T1"); equality included.
    pred_tokens = _canonical_tokens(pred, synonyms)
    gt_tokens = _canonical_tokens(gt_component, synonyms)
    return bool(pred_tokens) and pred_tokens <= gt_tokens


class MatchBackend:
    """Interface for chat-backed matching; see ChatMatchBackend."""

    def match(self, predicted: list[str], ground_truth: list[str]) -> MatchReport:
        raise NotImplementedError


def match_tests(
    predicted: list[str],
    ground_truth: list[str],
    *,
    synonyms: dict[str, str] | None = None,
    backend: MatchBackend | None = None,
) -> MatchReport:
    """Partition predictions and GT items into covered/used sets.

    Deterministic rules: shared normalization; a synonym table applied to
    whole phrases; the token-subset rule; compound GT items (comma/slash)
    count as one unit and are covered only if every component is; one
    prediction may cover many GT items; every GT item counts once.
    """
    if backend is not None:
        return backend.match(predicted, ground_truth)
    table = dict(DEFAULT_SYNONYMS)
    if synonyms:
        table.update(synonyms)

    preds = dedupe_normalized(predicted)
    gts = dedupe_normalized(ground_truth)

    used: set[str] = set()
    covered: list[str] = []
    uncovered: list[str] = []
    for gt_item in gts:
        components = split_compound(gt_item) or [gt_item]
        component_hits: list[list[str]] = []
        for component in components:
            hits = [p for p in preds if _covers(p, component, table)]
            component_hits.append(hits)
        # Compound items are one unit: covered only when every component is,
        # and only then do the hitting predictions count as used.
        if all(component_hits):
            covered.append(gt_item)
            for hits in component_hits:
                used.update(hits)
        else:
            uncovered.append(gt_item)

    pred_used = [p for p in preds if p in used]
    pred_unused = [p for p in preds if p not in used]
    return MatchReport(
        gt_covered=covered,
        gt_uncovered=uncovered,
        pred_used=pred_used,
        pred_unused=pred_unused,
    )


class ChatMatchBackend(MatchBackend):
    def __init__(self, backend: ChatBackend, model_id: str = "matcher") -> None:
        from .gateway import ChatRequest, complete
        from .prompts import render_template

        self._complete = complete
        self._request_type = ChatRequest
        self._render = render_template
        self._backend = backend
        self._model_id = model_id

    def match(self, predicted: list[str], ground_truth: list[str]) -> MatchReport:
        user = json.dumps({"PREDICTED": predicted, "GT": ground_truth}, ensure_ascii=True)
        request = self._request_type(
            model_id=self._model_id,
            messages=(("system", self._render("match_tests")), ("user", user)),
            temperature=0.0,
        )
        reply = self._complete(request, self._backend)
        try:
            payload = json.loads(reply.strip())
            return MatchReport(
                gt_covered=list(payload["gt_covered"]),
                gt_uncovered=list(payload["gt_uncovered"]),
                pred_used=list(payload["pred_used"]),
                pred_unused=list(payload["pred_unused"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise JudgeParseError(str(exc)) from exc


# --- diagnosis judging -------------------------------------------------------


class JudgeBackend:
    def judge(self, conclusion: str, ground_truth: str) -> bool:
        raise NotImplementedError


def judge_diagnosis(
    conclusion: str,
    ground_truth: str,
    *,
    disease_graph: KnowledgeGraph | None = None,
    backend: JudgeBackend | None = None,
) -> bool:
    """True iff the conclusion names the ground-truth disease.

    Deterministic: normalized string equality, else both sides link to the
    same disease-graph node. Unlinkable or missing text is simply wrong,
    never an error.
    """
    if backend is not None:
        return backend.judge(conclusion, ground_truth)
    if not conclusion.strip() or not ground_truth.strip():
        return False
    if normalize(conclusion) == normalize(ground_truth):
        return True
    if disease_graph is None:
        return False
    pred_link = link_entity(disease_graph, conclusion)
    gt_link = link_entity(disease_graph, ground_truth)
    return pred_link.node_id is not None and pred_link.node_id == gt_link.node_id


class ChatJudgeBackend(JudgeBackend):
    def __init__(self, backend: ChatBackend, model_id: str = "judge") -> None:
        from .gateway import ChatRequest, complete
        from .prompts import render_template

        self._complete = complete
        self._request_type = ChatRequest
        self._render = render_template
        self._backend = backend
        self._model_id = model_id

    def judge(self, conclusion: str, ground_truth: str) -> bool:
        user = f"Predicted Diagnosis: {conclusion}\nGround Truth Diagnosis: {ground_truth}"
        request = self._request_type(
            model_id=self._model_id,
            messages=(("system", self._render("judge_diagnosis")), ("user", user)),
            temperature=0.0,
        )
        reply = self._complete(request, self._backend)
        try:
            payload = json.loads(reply.strip())
            return bool(payload["match"])
        except (ValueError, KeyError, TypeError) as exc:
            raise JudgeParseError(str(exc)) from exc


# --- case runs ---------------------------------------------------------------


def run_case(
    env: ClinicalEnvironment,
    teacher: TeacherSpec,
    backend: ChatBackend,
    config: EvalConfig,
) -> tuple[Trajectory | None, dict]:
    """Single linear rollout (k_root=1, no branching) plus score inputs.

    Shares the rollout engine code path. Terminal failure yields
    (None or partial trajectory, inputs with failed=True).
    """
    rollout_config = RolloutConfig(
        t_max=config.t_max,
        k_root=1,
        branch_points=0,
        window_size=config.window_size,
        free_form_ratio=0.0,
        seed=config.seed,
        teachers=(teacher,),
    )
    try:
        tree = run_tree(env, rollout_config, {teacher.label: backend})
    except EmptyTree:
        return None, {"failed": True, "predicted": [], "per_turn": [], "conclusion": "", "turns_used": 0}
    trajectories = materialize_paths(tree)
    if not trajectories:
        return None, {"failed": True, "predicted": [], "per_turn": [], "conclusion": "", "turns_used": 0}
    trajectory = trajectories[0]
    turns = trajectory.turns()
    per_turn = [extract_tests(record) for record in turns]
    predicted = dedupe_normalized([name for tests in per_turn for name in tests])
    # materialize strips failure nodes, so look at the whole (single-path)
    # tree to notice a mid-rollout failure
    failed = any(node.failure is not None for node in tree.nodes)
    return trajectory, {
        "failed": failed,
        "predicted": predicted,
        "per_turn": per_turn,
        "conclusion": turns[-1].conclusion if turns else "",
        "turns_used": len(turns),
    }


def score_case(
    env: ClinicalEnvironment,
    inputs: dict,
    *,
    disease_graph: KnowledgeGraph | None = None,
    test_graph: KnowledgeGraph | None = None,
    synonyms: dict[str, str] | None = None,
    match_backend: MatchBackend | None = None,
    judge_backend: JudgeBackend | None = None,
    granularity: str = "case",
) -> CaseScore:
    table = dict(synonyms or {})
    if test_graph is not None:
        for alias, canon in synonyms_from_graph(test_graph).items():
            table.setdefault(alias, canon)

    ground_truth = env.ground_truth_tests()
    flags: list[str] = []
    if inputs.get("failed"):
        flags.append("terminal_failure")

    if granularity == "turn" and inputs.get("per_turn"):
        precisions, recalls = [], []
        for tests in inputs["per_turn"]:
            report = match_tests(tests, ground_truth, synonyms=table, backend=match_backend)
            precisions.append(report.precision())
            recalls.append(report.recall())
        precision = statistics.fmean(precisions) if precisions else 0.0
        recall = statistics.fmean(recalls) if recalls else 0.0
    else:
        predicted = inputs.get("predicted", [])
        if predicted:
            report = match_tests(predicted, ground_truth, synonyms=table, backend=match_backend)
            precision = report.precision()
            recall = report.recall()
        else:
            precision = 0.0
            recall = 0.0
            flags.append("no_tests_ordered")

    diagnosis_correct = (
        not inputs.get("failed")
        and judge_diagnosis(
            inputs.get("conclusion", ""),
            env.ground_truth_diagnosis,
            disease_graph=disease_graph,
            backend=judge_backend,
        )
    )
    return CaseScore(
        case_id=env.case_id,
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        diagnosis_correct=diagnosis_correct,
        turns_used=inputs.get("turns_used", 0),
        flags=tuple(flags),
    )


# --- aggregation -------------------------------------------------------------


def aggregate(scores: list[CaseScore]) -> dict:
    """Case-level means for one run."""
    if not scores:
        return {
            "cases": 0,
            "precision": 0.0,
            "recall": 0.0,
            "f1": 0.0,
            "diagnostic_accuracy": 0.0,
            "mean_turns": 0.0,
        }
    return {
        "cases": len(scores),
        "precision": statistics.fmean(s.precision for s in scores),
        "recall": statistics.fmean(s.recall for s in scores),
        "f1": statistics.fmean(s.f1 for s in scores),
        "diagnostic_accuracy": statistics.fmean(1.0 if s.diagnosis_correct else 0.0 for s in scores),
        "mean_turns": statistics.fmean(s.turns_used for s in scores),
    }


def aggregate_runs(run_reports: list[dict]) -> dict:
    """Mean and population stddev across repeated runs."""
    if not run_reports:
        return {"runs": 0}
    metrics = ("precision", "recall", "f1", "diagnostic_accuracy", "mean_turns")
    out: dict = {"runs": len(run_reports), "cases": run_reports[0].get("cases", 0)}
    for metric in metrics:
        values = [report[metric] for report in run_reports]
        out[metric] = statistics.fmean(values)
        out[f"{metric}_stddev"] = statistics.pstdev(values) if len(values) > 1 else 0.0
    return out


def render_table(report: dict, label: str = "model") -> str:
    """Plain-text summary table."""
    header = f"{'Model':<24} {'Prec':>8} {'Rec':>8} {'F1':>8} {'Diag Acc':>9} {'Turns':>7}"
    row = (
        f"{label:<24} {report.get('precision', 0.0):>8.4f} {report.get('recall', 0.0):>8.4f} "
        f"{report.get('f1', 0.0):>8.4f} {report.get('diagnostic_accuracy', 0.0):>9.4f} "
        f"{report.get('mean_turns', 0.0):>7.2f}"
    )
    rule = "-" * len(header)
    return "\n".join((header, rule, row))

"""Command-line pipeline: build-env, rollout, filter, emit, eval, stats.

Every command that writes an output directory drops exactly one
manifest.json there (config snapshot, seed, input/output paths, pipeline
version, counters). Exit codes: 0 success, 1 partial failure (some cases
failed but the run continued), 2 invalid invocation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import PIPELINE_VERSION
from .emitter import emission_stats, emit, read_jsonl, write_jsonl
from .environment import ClinicalEnvironment, case_to_payload, extract_case, load_case
from .errors import ActiveDxError
from .evaluation import (
    EvalConfig,
    aggregate,
    aggregate_runs,
    render_table,
    run_case,
    score_case,
)
from .filtering import DISCARDED, FilterConfig, FilterOutcome, filter_trajectory, retention_stats
from .gateway import TeacherSpec, backend_from_spec, teacher_spec_from_dict
from .graph import KnowledgeGraph, load_graph
from .rollout import (
    RolloutConfig,
    Trajectory,
    load_store_nodes,
    load_tree,
    materialize_paths,
    node_to_json,
    run_tree,
    store_path,
    tree_stats,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict = field(default_factory=dict)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    pipeline_version: str = PIPELINE_VERSION
    elapsed_seconds: float = 0.0

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        payload = {
            "command": self.command,
            "pipeline_version": self.pipeline_version,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "counters": self.counters,
            "elapsed_seconds": round(self.elapsed_seconds, 3),
        }
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, ensure_ascii=True)
            fh.write("\n")
        return path


def _load_json(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _case_files(case_dir: Path) -> list[Path]:
    return sorted(p for p in case_dir.glob("*.json") if p.name != "manifest.json")


def _load_cases(case_dir: Path) -> list[ClinicalEnvironment]:
    return [load_case(path) for path in _case_files(case_dir)]


def _write_case(env: ClinicalEnvironment, out_dir: Path) -> Path:
    path = out_dir / f"{env.case_id}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(case_to_payload(env), fh, indent=2, ensure_ascii=True)
        fh.write("\n")
    return path


def _resolve_scripts(teachers: list[dict], config_path: str | None) -> list[dict]:
    # Script paths in a config file are relative to the file, not the cwd.
    if not config_path:
        return teachers
    base = Path(config_path).resolve().parent
    resolved = []
    for teacher in teachers:
        teacher = dict(teacher)
        script = teacher.get("script", "")
        if script and not Path(script).is_absolute():
            teacher["script"] = str(base / script)
        resolved.append(teacher)
    return resolved


def _rollout_config(args: argparse.Namespace) -> RolloutConfig:
    payload = _load_json(args.config) if args.config else {}
    teacher_dicts = _resolve_scripts(payload.get("teachers", []), args.config)
    teachers = tuple(teacher_spec_from_dict(t) for t in teacher_dicts)
    base = RolloutConfig()
    seed = args.seed if args.seed is not None else payload.get("seed", base.seed)
    return RolloutConfig(
        t_max=payload.get("t_max", base.t_max),
        k_root=payload.get("k_root", base.k_root),
        branch_points=payload.get("branch_points", base.branch_points),
        window_size=payload.get("window_size", base.window_size),
        free_form_ratio=payload.get("free_form_ratio", base.free_form_ratio),
        temperature=payload.get("temperature", base.temperature),
        max_output_tokens=payload.get("max_output_tokens", base.max_output_tokens),
        seed=seed,
        teachers=teachers,
    )


# --- subcommands --------------------------------------------------------------


def cmd_build_env(args: argparse.Namespace) -> int:
    started = time.monotonic()
    in_dir, out_dir = Path(args.case_dir), Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    failures: list[str] = []

    backend = None
    if args.extract:
        if not args.model:
            print("build-env --extract requires --model", file=sys.stderr)
            return EXIT_USAGE
        backend = backend_from_spec(teacher_spec_from_dict(_load_json(args.model)))

    if args.extract:
        sources = sorted(in_dir.glob("*.txt"))
    else:
        sources = _case_files(in_dir)
    if not sources:
        print(f"no input case files found in {in_dir}", file=sys.stderr)
        return EXIT_USAGE

    for source in sources:
        try:
            if args.extract:
                raw = source.read_text(encoding="utf-8")
                env = extract_case(raw, backend, metadata={"case_id": source.stem, "branch": "extract", "turn": "1"})
            else:
                env = load_case(source)
            written.append(str(_write_case(env, out_dir)))
        except ActiveDxError as exc:
            failures.append(f"{source.name}: {exc}")
            logger.error("build-env failed for %s: %s", source.name, exc)
            if not args.keep_going:
                break

    manifest = RunManifest(
        command="build-env",
        seed=args.seed if args.seed is not None else 0,
        config={"extract": bool(args.extract)},
        inputs=[str(in_dir)],
        outputs=written,
        counters={"cases_written": len(written), "failures": len(failures), "failure_detail": failures},
        elapsed_seconds=time.monotonic() - started,
    )
    manifest.write(out_dir)
    for failure in failures:
        print(f"FAILED {failure}", file=sys.stderr)
    print(f"build-env: {len(written)} case(s) -> {out_dir}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_rollout(args: argparse.Namespace) -> int:
    started = time.monotonic()
    case_dir, out_dir = Path(args.case_dir), Path(args.out_dir)
    config = _rollout_config(args)
    if not config.teachers:
        print("rollout requires a --config file with a non-empty teachers list", file=sys.stderr)
        return EXIT_USAGE
    out_dir.mkdir(parents=True, exist_ok=True)
    backends = {spec.label: backend_from_spec(spec) for spec in config.teachers}
    envs = _load_cases(case_dir)
    if not envs:
        print(f"no case files found in {case_dir}", file=sys.stderr)
        return EXIT_USAGE

    failures: list[str] = []
    counters = {"cases": 0, "nodes": 0, "paths": 0, "failed_paths": 0, "skipped_complete": 0}

    def roll_one(env: ClinicalEnvironment) -> None:
        path = store_path(out_dir, env.case_id)
        existing: list = []
        if path.exists():
            meta, existing = load_store_nodes(path)
            if meta is not None and meta.get("config") != config.snapshot():
                raise ActiveDxError(f"{path}: existing store was built with a different config")
        # Rewrite meta plus trusted nodes, then append new nodes as they
        # arrive so an interrupt leaves a resumable prefix.
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {"kind": "tree_meta", "case_id": env.case_id, "config": config.snapshot()},
                    ensure_ascii=True,
                    separators=(",", ":"),
                )
                + "\n"
            )
            for node in existing:
                fh.write(json.dumps(node_to_json(node), ensure_ascii=True, separators=(",", ":")) + "\n")
            fh.flush()

            def on_node(node) -> None:
                fh.write(json.dumps(node_to_json(node), ensure_ascii=True, separators=(",", ":")) + "\n")
                fh.flush()

            tree = run_tree(env, config, backends, existing=existing, on_node=on_node)
        stats = tree_stats(tree)
        counters["cases"] += 1
        counters["nodes"] += stats["nodes"]
        counters["paths"] += stats["paths"]
        counters["failed_paths"] += stats["failed_paths"]

    if args.deterministic or args.jobs <= 1:
        for env in envs:
            try:
                roll_one(env)
            except ActiveDxError as exc:
                failures.append(f"{env.case_id}: {exc}")
                if not args.keep_going:
                    break
    else:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futures = {pool.submit(roll_one, env): env for env in envs}
            for future, env in futures.items():
                try:
                    future.result()
                except ActiveDxError as exc:
                    failures.append(f"{env.case_id}: {exc}")

    manifest = RunManifest(
        command="rollout",
        seed=config.seed,
        config=config.snapshot(),
        inputs=[str(case_dir)] + ([args.config] if args.config else []),
        outputs=[str(store_path(out_dir, env.case_id)) for env in envs],
        counters={**counters, "failures": failures},
        elapsed_seconds=time.monotonic() - started,
    )
    manifest.write(out_dir)
    for failure in failures:
        print(f"FAILED {failure}", file=sys.stderr)
    print(f"rollout: {counters['cases']} case tree(s) -> {out_dir}")
    return EXIT_PARTIAL if failures else EXIT_OK


def _filter_config(args: argparse.Namespace) -> FilterConfig:
    base = FilterConfig()
    payload = _load_json(args.config) if getattr(args, "config", None) else {}
    return FilterConfig(
        tau_rac=args.tau_rac if args.tau_rac is not None else payload.get("tau_rac", base.tau_rac),
        unreachable_cap=(
            args.unreachable_cap
            if args.unreachable_cap is not None
            else payload.get("unreachable_cap", base.unreachable_cap)
        ),
        require_turn1_link=payload.get("require_turn1_link", base.require_turn1_link),
        include_additional_requests=payload.get(
            "include_additional_requests", base.include_additional_requests
        ),
        mode=args.filter if args.filter else payload.get("mode", base.mode),
    )


def cmd_filter(args: argparse.Namespace) -> int:
    started = time.monotonic()
    store_dir, out_dir = Path(args.store_dir), Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _filter_config(args)
    disease_graph = load_graph(args.disease_nodes, args.disease_edges, name="disease")
    test_graph = load_graph(args.test_nodes, args.test_edges, name="test")
    envs = {env.case_id: env for env in _load_cases(Path(args.case_dir))}

    cases_out: list[dict] = []
    outcomes: list[FilterOutcome] = []
    failures: list[str] = []
    for path in sorted(store_dir.glob("*.jsonl")):
        tree = load_tree(path)
        env = envs.get(tree.case_id)
        if env is None:
            failures.append(f"{tree.case_id}: no case file")
            cases_out.append({"case_id": tree.case_id, "error": "no case file", "trajectories": []})
            continue
        entries = []
        try:
            for traj in materialize_paths(tree):
                series, outcome = filter_trajectory(traj, disease_graph, test_graph, env, config)
                outcomes.append(outcome)
                entries.append(
                    {
                        "path_id": traj.path_id,
                        "mode": traj.mode,
                        "decision": outcome.decision,
                        "t_star": outcome.t_star,
                        "retained_turns": outcome.retained_turns,
                        "removed_turns": [[t, reason] for t, reason in outcome.removed_turns],
                        "flags": list(outcome.flags),
                        "dtc": [[t, v] for t, v in series.dtc],
                        "rac": [[t, v] for t, v in series.rac],
                        "link_failures": [[t, text, role] for t, text, role in series.link_failures],
                    }
                )
            cases_out.append({"case_id": tree.case_id, "error": None, "trajectories": entries})
        except ActiveDxError as exc:
            failures.append(f"{tree.case_id}: {exc}")
            cases_out.append({"case_id": tree.case_id, "error": str(exc), "trajectories": []})
            if not args.keep_going:
                break

    report = {
        "pipeline_version": PIPELINE_VERSION,
        "filter_config": config.snapshot(),
        "cases": cases_out,
        "retention": retention_stats(outcomes),
    }
    report_path = out_dir / "filter_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, ensure_ascii=True, sort_keys=False)
        fh.write("\n")

    manifest = RunManifest(
        command="filter",
        seed=args.seed if args.seed is not None else 0,
        config=config.snapshot(),
        inputs=[str(store_dir), args.case_dir, args.disease_nodes, args.disease_edges, args.test_nodes, args.test_edges],
        outputs=[str(report_path)],
        counters={"trajectories": len(outcomes), "failures": failures, **retention_stats(outcomes)},
        elapsed_seconds=time.monotonic() - started,
    )
    manifest.write(out_dir)
    for failure in failures:
        print(f"FAILED {failure}", file=sys.stderr)
    print(f"filter: {len(outcomes)} trajectory decision(s) -> {report_path}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_emit(args: argparse.Namespace) -> int:
    started = time.monotonic()
    store_dir, out_dir = Path(args.store_dir), Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = _load_json(args.report)
    envs = {env.case_id: env for env in _load_cases(Path(args.case_dir))}

    decisions: dict[tuple[str, str], dict] = {}
    for case_entry in report.get("cases", []):
        for entry in case_entry.get("trajectories", []):
            decisions[(case_entry["case_id"], entry["path_id"])] = entry

    records = []
    failures: list[str] = []
    skipped_discarded = 0
    for path in sorted(store_dir.glob("*.jsonl")):
        tree = load_tree(path)
        env = envs.get(tree.case_id)
        if env is None:
            failures.append(f"{tree.case_id}: no case file")
            continue
        for traj in materialize_paths(tree):
            entry = decisions.get((traj.case_id, traj.path_id))
            if entry is None:
                failures.append(f"{traj.case_id}/{traj.path_id}: missing from filter report")
                continue
            if entry["decision"] == DISCARDED:
                skipped_discarded += 1
                continue
            outcome = FilterOutcome(
                decision=entry["decision"],
                retained_turns=list(entry["retained_turns"]),
                removed_turns=[(t, reason) for t, reason in entry["removed_turns"]],
                t_star=entry["t_star"],
                flags=tuple(entry["flags"]),
            )
            try:
                records.extend(
                    emit(traj, outcome, env, window_size=args.window_size, seed=args.seed or 0)
                )
            except ActiveDxError as exc:
                failures.append(f"{traj.case_id}/{traj.path_id}: {exc}")
                if not args.keep_going:
                    break

    dataset_path = out_dir / "dataset.jsonl"
    count = write_jsonl(records, dataset_path, shard_size=args.shard_size)
    stats = emission_stats(records)

    manifest = RunManifest(
        command="emit",
        seed=args.seed if args.seed is not None else 0,
        config={"window_size": args.window_size, "shard_size": args.shard_size},
        inputs=[str(store_dir), args.report, args.case_dir],
        outputs=[str(dataset_path)],
        counters={"records": count, "skipped_discarded": skipped_discarded, "failures": failures, **stats},
        elapsed_seconds=time.monotonic() - started,
    )
    manifest.write(out_dir)
    for failure in failures:
        print(f"FAILED {failure}", file=sys.stderr)
    print(f"emit: {count} record(s) -> {dataset_path}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.monotonic()
    case_dir, out_dir = Path(args.case_dir), Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = teacher_spec_from_dict(_resolve_scripts([_load_json(args.model)], args.model)[0])
    envs = _load_cases(case_dir)
    if not envs:
        print(f"no case files found in {case_dir}", file=sys.stderr)
        return EXIT_USAGE

    disease_graph = (
        load_graph(args.disease_nodes, args.disease_edges, name="disease")
        if args.disease_nodes and args.disease_edges
        else None
    )
    test_graph = (
        load_graph(args.test_nodes, args.test_edges, name="test")
        if args.test_nodes and args.test_edges
        else None
    )

    base_seed = args.seed if args.seed is not None else 0
    granularity = "turn" if args.per_turn else "case"
    run_reports = []
    per_case_last: list[dict] = []
    failures: list[str] = []
    for repeat in range(max(1, args.repeats)):
        config = EvalConfig(
            t_max=args.t_max,
            window_size=args.window_size,
            seed=base_seed + repeat,
            repeats=args.repeats,
            granularity=granularity,
        )
        backend = backend_from_spec(spec)
        scores = []
        per_case: list[dict] = []
        for env in envs:
            _traj, inputs = run_case(env, spec, backend, config)
            if inputs.get("failed"):
                failures.append(f"{env.case_id} (repeat {repeat})")
            score = score_case(
                env,
                inputs,
                disease_graph=disease_graph,
                test_graph=test_graph,
                granularity=granularity,
            )
            scores.append(score)
            per_case.append(
                {
                    "case_id": score.case_id,
                    "precision": score.precision,
                    "recall": score.recall,
                    "f1": score.f1,
                    "diagnosis_correct": score.diagnosis_correct,
                    "turns_used": score.turns_used,
                    "flags": list(score.flags),
                }
            )
        run_reports.append(aggregate(scores))
        per_case_last = per_case

    summary = aggregate_runs(run_reports)
    report = {
        "pipeline_version": PIPELINE_VERSION,
        "model": spec.label,
        "granularity": granularity,
        "repeats": max(1, args.repeats),
        "summary": summary,
        "runs": run_reports,
        "per_case": per_case_last,
    }
    report_path = out_dir / "eval_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, ensure_ascii=True)
        fh.write("\n")
    table = render_table(summary, label=spec.label)
    table_path = out_dir / "eval_report.txt"
    table_path.write_text(table + "\n", encoding="utf-8")

    manifest = RunManifest(
        command="eval",
        seed=base_seed,
        config={"t_max": args.t_max, "window_size": args.window_size, "repeats": args.repeats, "granularity": granularity},
        inputs=[str(case_dir), args.model],
        outputs=[str(report_path), str(table_path)],
        counters={"cases": len(envs), "failed_cases": failures},
        elapsed_seconds=time.monotonic() - started,
    )
    manifest.write(out_dir)
    print(table)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    path = Path(args.report)
    if not path.exists():
        print(f"no such file: {path}", file=sys.stderr)
        return EXIT_USAGE
    if path.suffix == ".jsonl":
        stats = emission_stats(read_jsonl(path))
        print(json.dumps(stats, indent=2, ensure_ascii=True))
        return EXIT_OK
    payload = _load_json(path)
    if "retention" in payload:
        print(json.dumps(payload["retention"], indent=2, ensure_ascii=True))
        return EXIT_OK
    if "summary" in payload:
        print(render_table(payload["summary"], label=payload.get("model", "model")))
        return EXIT_OK
    print(json.dumps(payload.get("counters", payload), indent=2, ensure_ascii=True))
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="activedx",
        description="Build diagnostic environments, distill trajectories, filter, emit, and evaluate.",
    )
    parser.add_argument("--log-level", default="WARNING", help="logging level name")

    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--jobs", type=int, default=1, help="worker pool size")
        p.add_argument("--deterministic", action="store_true", help="sequential, fixed order, byte-stable output")
        p.add_argument("--keep-going", action="store_true", help="continue past per-case failures")

    p = sub.add_parser("build-env", help="validate or extract case files into environments")
    p.add_argument("case_dir")
    p.add_argument("out_dir")
    p.add_argument("--extract", action="store_true", help="extract raw .txt reports via a chat model")
    p.add_argument("--model", default=None, help="model spec JSON (for --extract)")
    common(p)
    p.set_defaults(func=cmd_build_env)

    p = sub.add_parser("rollout", help="grow trajectory trees for each case")
    p.add_argument("case_dir")
    p.add_argument("out_dir")
    p.add_argument("--config", required=True, help="run config JSON (teachers, t_max, k_root, ...)")
    common(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("filter", help="score trajectories with graph metrics and decide retention")
    p.add_argument("store_dir")
    p.add_argument("out_dir")
    p.add_argument("--cases", dest="case_dir", required=True, help="directory of case JSON files")
    p.add_argument("--disease-nodes", required=True)
    p.add_argument("--disease-edges", required=True)
    p.add_argument("--test-nodes", required=True)
    p.add_argument("--test-edges", required=True)
    p.add_argument("--config", default=None, help="filter config JSON")
    p.add_argument("--tau-rac", type=float, default=None)
    p.add_argument("--unreachable-cap", type=int, default=None)
    p.add_argument("--filter", default=None, choices=["dtc-rac", "correctness", "none"], help="filter mode")
    common(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("emit", help="emit chat-format training records for retained trajectories")
    p.add_argument("store_dir")
    p.add_argument("out_dir")
    p.add_argument("--report", required=True, help="filter_report.json from the filter step")
    p.add_argument("--cases", dest="case_dir", required=True)
    p.add_argument("--window-size", type=int, default=2)
    p.add_argument("--shard-size", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("eval", help="run a model over held-out cases and score it")
    p.add_argument("case_dir")
    p.add_argument("out_dir")
    p.add_argument("--model", required=True, help="model spec JSON")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--t-max", type=int, default=8)
    p.add_argument("--window-size", type=int, default=2)
    p.add_argument("--per-turn", action="store_true", help="turn-level precision/recall instead of case-level")
    p.add_argument("--disease-nodes", default=None)
    p.add_argument("--disease-edges", default=None)
    p.add_argument("--test-nodes", default=None)
    p.add_argument("--test-edges", default=None)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="summarize a filter report, eval report, or dataset")
    p.add_argument("report")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except ActiveDxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except (OSError, json.JSONDecodeError) as exc:
        print(f"invalid invocation: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())

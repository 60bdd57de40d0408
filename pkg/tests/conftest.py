import json
from pathlib import Path

import pytest

from activedx.environment import load_case
from activedx.gateway import TeacherSpec, scripted_agent
from activedx.graph import load_graph
from activedx.rollout import RolloutConfig, run_tree

DATA = Path(__file__).resolve().parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def disease_graph():
    return load_graph(DATA / "graphs" / "disease_nodes.tsv", DATA / "graphs" / "disease_edges.tsv", name="disease")


@pytest.fixture(scope="session")
def test_graph():
    return load_graph(DATA / "graphs" / "test_nodes.tsv", DATA / "graphs" / "test_edges.tsv", name="test")


@pytest.fixture(scope="session")
def rac3_graph():
    return load_graph(DATA / "graphs" / "rac3_nodes.tsv", DATA / "graphs" / "rac3_edges.tsv", name="rac3")


@pytest.fixture(scope="session")
def toy_envs():
    return {
        path.stem: load_case(path)
        for path in sorted((DATA / "cases").glob("*.json"))
    }


@pytest.fixture(scope="session")
def teacher_script() -> dict:
    with open(DATA / "scripts" / "teacher_alpha.json", encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def toy_rollout_config(teacher_script) -> RolloutConfig:
    with open(DATA / "configs" / "rollout_toy.json", encoding="utf-8") as fh:
        payload = json.load(fh)
    teacher = TeacherSpec(label="alpha", model_id="alpha-scripted", script=str(DATA / "scripts" / "teacher_alpha.json"))
    return RolloutConfig(
        t_max=payload["t_max"],
        k_root=payload["k_root"],
        branch_points=payload["branch_points"],
        window_size=payload["window_size"],
        free_form_ratio=payload["free_form_ratio"],
        temperature=payload["temperature"],
        max_output_tokens=payload["max_output_tokens"],
        seed=payload["seed"],
        teachers=(teacher,),
    )


@pytest.fixture(scope="session")
def toy_trees(toy_envs, toy_rollout_config, teacher_script):
    backend = scripted_agent(teacher_script)
    return {
        case_id: run_tree(env, toy_rollout_config, {"alpha": backend})
        for case_id, env in toy_envs.items()
    }

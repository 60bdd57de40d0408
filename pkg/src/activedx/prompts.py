"""Prompt template assets and placeholder substitution.

Templates live as text files next to this module. Substitution replaces only
known ``{placeholder}`` keys so literal braces inside templates (the JSON
examples) survive untouched.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    path = resources.files("activedx").joinpath("templates").joinpath(f"{name}.txt")
    return path.read_text(encoding="utf-8")


def render(template: str, **values: str) -> str:
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out


def render_template(name: str, **values: str) -> str:
    return render(load_template(name), **values)

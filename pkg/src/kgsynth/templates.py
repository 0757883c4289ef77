"""Prompt templates with named ``{placeholder}`` slots.

Template bodies live as text files next to this module so they can be
edited without touching code.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, Optional

PLACEHOLDER = re.compile(r"\{([a-z_][a-z0-9_]*)\}")

TEMPLATE_NAMES = (
    "kg_extraction",
    "kg_summarization",
    "rephrase_literal",
    "rephrase_opposite",
    "statement_judgment",
    "atomic_qa",
    "aggregated_answer",
    "aggregated_question",
    "multi_hop_qa",
)


class TemplateError(Exception):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required_placeholders: FrozenSet[str] = field(default=frozenset())

    @classmethod
    def from_body(cls, name: str, body: str) -> "PromptTemplate":
        return cls(name, body, frozenset(PLACEHOLDER.findall(body)))

    def render(self, **values) -> str:
        missing = self.required_placeholders - values.keys()
        if missing:
            raise TemplateError(f"template {self.name!r} missing values for {sorted(missing)}")
        return PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), self.body)


@lru_cache(maxsize=None)
def _builtin(name: str) -> PromptTemplate:
    body = resources.files("kgsynth").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate.from_body(name, body)


def load_template(name: str, override_dir: Optional[str | Path] = None) -> PromptTemplate:
    if name not in TEMPLATE_NAMES:
        raise TemplateError(f"unknown template {name!r}")
    if override_dir is not None:
        path = Path(override_dir) / f"{name}.txt"
        if path.exists():
            return PromptTemplate.from_body(name, path.read_text(encoding="utf-8"))
    return _builtin(name)


def load_all(override_dir: Optional[str | Path] = None) -> Dict[str, PromptTemplate]:
    return {n: load_template(n, override_dir) for n in TEMPLATE_NAMES}

"""Prompt templates with ``{{name}}`` placeholders."""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

_PLACEHOLDER = re.compile(r"\{\{\s*(\w+)\s*\}\}")

STL_TEMPLATE = "stl"
DM_TEMPLATE = "dm"
STL_PLACEHOLDERS = ("instruction",)
DM_PLACEHOLDERS = ("subtask_table", "focus_id", "history_tail", "action_menu")


class TemplateError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.body))

    def require(self, *names: str) -> PromptTemplate:
        missing = [n for n in names if n not in self.placeholders]
        if missing:
            raise TemplateError(f"template {self.name!r} lacks placeholders: {', '.join(missing)}")
        return self

    def render(self, **values: object) -> str:
        missing = self.placeholders - values.keys()
        if missing:
            raise TemplateError(f"no value for placeholders: {', '.join(sorted(missing))}")
        return _PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), self.body)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.body.encode("utf-8")).hexdigest()


def load_template(path: str | os.PathLike[str], name: str | None = None) -> PromptTemplate:
    path = Path(path)
    return PromptTemplate(name or path.stem, path.read_text(encoding="utf-8"))


def default_template(name: str) -> PromptTemplate:
    body = resources.files("vlnbench").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate(name, body)


def stl_template(path: str | os.PathLike[str] | None = None) -> PromptTemplate:
    tpl = load_template(path) if path else default_template(STL_TEMPLATE)
    return tpl.require(*STL_PLACEHOLDERS)


def dm_template(path: str | os.PathLike[str] | None = None) -> PromptTemplate:
    tpl = load_template(path) if path else default_template(DM_TEMPLATE)
    return tpl.require(*DM_PLACEHOLDERS)

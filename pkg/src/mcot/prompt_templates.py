"""Instruction template loading.

Templates are plain-text package data, overridable per run through the
config file.  They carry only instruction prose; the tagged structure
around them is assembled by the prompt builders.
"""

from __future__ import annotations

from functools import cache
from importlib import resources


@cache
def builtin_template(name: str) -> str:
    path = resources.files("mcot").joinpath("templates", name)
    return path.read_text(encoding="utf-8")


def solver_step_template() -> str:
    return builtin_template("solver_step.txt")


def solver_full_template() -> str:
    return builtin_template("solver_full.txt")


def annotator_template() -> str:
    return builtin_template("annotator.txt")


def load_template_file(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()

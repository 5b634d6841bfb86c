"""Versioned prompt templates shipped with the package.

Each ``*.txt`` file starts with a ``# version: N`` line followed by
``[system]`` and/or ``[user]`` blocks. Placeholders use ``$name`` syntax
(:class:`string.Template`) so JSON examples need no escaping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from string import Template


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: int
    system: Template | None
    user: Template | None

    @property
    def ref(self) -> str:
        return f"{self.name}@v{self.version}"

    def render(self, **values: object) -> tuple[str, str]:
        """Return ``(system, user)`` text; a missing block renders as ''."""
        sys_text = self.system.substitute(values).strip() if self.system else ""
        user_text = self.user.substitute(values).strip() if self.user else ""
        return sys_text, user_text


def _parse(name: str, text: str) -> PromptTemplate:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# version:"):
        raise ValueError(f"prompt {name} lacks a version header")
    version = int(lines[0].split(":", 1)[1])
    blocks: dict[str, list[str]] = {}
    current = None
    for line in lines[1:]:
        if line.strip() in ("[system]", "[user]"):
            current = line.strip()[1:-1]
            blocks[current] = []
        elif current is not None:
            blocks[current].append(line)
    return PromptTemplate(
        name,
        version,
        Template("\n".join(blocks["system"])) if "system" in blocks else None,
        Template("\n".join(blocks["user"])) if "user" in blocks else None,
    )


@lru_cache(maxsize=None)
def load(name: str) -> PromptTemplate:
    text = resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return _parse(name, text)


@lru_cache(maxsize=None)
def exemplars() -> dict[str, list[dict]]:
    """In-context examples keyed by question type name."""
    text = resources.files(__package__).joinpath("exemplars.json").read_text(encoding="utf-8")
    return json.loads(text)

"""Template-based instruction parsing and map-grounded target resolution.

Supported instruction forms (case-insensitive, articles optional):
  go to X | pick up X | put X on Y | move X to Y | move X from A to B
Each expands into navigate / pick_up / place subtasks over named objects.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .features import feature_similarity
from .objectmap import ObjectMap

_TEMPLATES = ("go to X", "pick up X", "put X on Y", "move X to Y",
              "move X from A to B")


class InstructionError(ValueError):
    def __init__(self, instruction: str):
        super().__init__(
            f"cannot parse {instruction!r}; expected one of: "
            + ", ".join(repr(t) for t in _TEMPLATES))


@dataclass(frozen=True)
class Subtask:
    action: str                     # navigate | pick_up | place
    object_names: tuple

    def __post_init__(self):
        if self.action not in ("navigate", "pick_up", "place"):
            raise ValueError(f"unknown action {self.action!r}")
        want = 2 if self.action == "place" else 1
        if len(self.object_names) != want:
            raise ValueError(f"{self.action} takes {want} object name(s)")


def _clean(text: str) -> str:
    text = text.lower().strip()
    text = re.sub(r"[.!?,;]+", " ", text)
    text = re.sub(r"\b(the|a|an)\b", " ", text)
    return re.sub(r"\s+", " ", text).strip()


def parse_instruction(instruction: str) -> list[Subtask]:
    """Expand one templated instruction into an ordered subtask list."""
    text = _clean(instruction)
    m = re.fullmatch(r"go to (.+)", text)
    if m:
        return [Subtask("navigate", (m.group(1),))]
    m = re.fullmatch(r"pick up (.+)", text)
    if m:
        x = m.group(1)
        return [Subtask("navigate", (x,)), Subtask("pick_up", (x,))]
    # "from A to B" must win over the bare "to Y" form
    m = re.fullmatch(r"move (.+?) from (.+?) to (.+)", text)
    if m:
        x, dst = m.group(1), m.group(3)
        return [Subtask("navigate", (x,)), Subtask("pick_up", (x,)),
                Subtask("navigate", (dst,)), Subtask("place", (x, dst))]
    m = re.fullmatch(r"(?:move|put) (.+?) (?:to|on|onto) (.+)", text)
    if m:
        x, dst = m.group(1), m.group(2)
        return [Subtask("navigate", (x,)), Subtask("pick_up", (x,)),
                Subtask("navigate", (dst,)), Subtask("place", (x, dst))]
    raise InstructionError(instruction)


def render_subtasks(subtasks) -> str:
    """Canonical one-instruction rendering of a subtask list."""
    tasks = list(subtasks)
    if len(tasks) == 1 and tasks[0].action == "navigate":
        return f"go to the {tasks[0].object_names[0]}"
    if (len(tasks) == 2 and tasks[0].action == "navigate"
            and tasks[1].action == "pick_up"
            and tasks[0].object_names == tasks[1].object_names):
        return f"pick up the {tasks[0].object_names[0]}"
    if (len(tasks) == 4
            and [t.action for t in tasks] == ["navigate", "pick_up",
                                              "navigate", "place"]
            and tasks[0].object_names == tasks[1].object_names
            and tasks[3].object_names == (tasks[0].object_names[0],
                                          tasks[2].object_names[0])):
        x, dst = tasks[3].object_names
        return f"move the {x} to the {dst}"
    raise ValueError("subtask list does not match a known template")


# --- grounding ---------------------------------------------------------------

@dataclass(frozen=True)
class TargetQuery:
    name: str
    anchor: str | None = None
    k: int = 3

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError("empty target name")
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass(frozen=True)
class GroundingResult:
    node_id: int
    centroid: np.ndarray
    score: float
    anchor_id: int | None = None


def _ranked(query_feature: np.ndarray, omap: ObjectMap) -> list[tuple]:
    scores = []
    for i in omap.ids():
        s = feature_similarity(query_feature, omap.nodes[i].f_text)
        scores.append((-s, i))
    return sorted(scores)


def resolve_target(query: TargetQuery, omap: ObjectMap,
                   embedder) -> GroundingResult:
    """Ground a named target in the map by text-feature similarity.

    Without an anchor: the best-matching node (ties to the lowest id). With an
    anchor: both names are matched top-k, and the pair of distinct nodes with
    the smallest centroid distance wins (ties prefer the higher combined
    similarity, then the lower id pair).
    """
    if len(omap) == 0:
        raise ValueError("cannot ground a target in an empty map")
    name_rank = _ranked(embedder.embed_text(query.name), omap)
    if query.anchor is None:
        neg, node_id = name_rank[0]
        return GroundingResult(node_id, omap.nodes[node_id].centroid, -neg)
    anchor_rank = _ranked(embedder.embed_text(query.anchor), omap)
    k = min(query.k, len(name_rank))
    best = None
    for neg_a, a in name_rank[:k]:
        for neg_b, b in anchor_rank[:k]:
            if a == b:
                continue
            dist = float(np.linalg.norm(omap.nodes[a].centroid
                                        - omap.nodes[b].centroid))
            key = (dist, neg_a + neg_b, a, b)
            if best is None or key < best[0]:
                best = (key, a, b)
    if best is None:
        raise ValueError("anchor grounding found no distinct node pair")
    _, a, b = best
    score = float(feature_similarity(embedder.embed_text(query.name),
                                     omap.nodes[a].f_text))
    return GroundingResult(a, omap.nodes[a].centroid, score, anchor_id=b)

"""Typed student/question/concept/level graph and meta-path walk sampling.

Nodes come in five kinds: U (student), Q (question), K (knowledge concept),
A (ability level), D (difficulty level).  Edges are undirected and of four
kinds: Q-U (student answered question in the train split), Q-K (question
covers concept), Q-D (question's difficulty level), U-A (student's ability
level).

A meta-path template is a kind sequence starting and ending at Q.  Sampled
walks follow the template's kind pattern cyclically - the terminal Q of one
cycle seeds the next - until they reach the requested node count, choosing
uniformly among the neighbors of the required next kind at each step.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping

from .dataset import Dataset
from .irt import IrtModel
from .seeding import derive_rng

logger = logging.getLogger(__name__)

Node = tuple[str, str]  # (kind, id)

NODE_KINDS = ("U", "Q", "K", "A", "D")
EDGE_KINDS = frozenset({frozenset(("Q", "U")), frozenset(("Q", "K")),
                        frozenset(("Q", "D")), frozenset(("U", "A"))})

DEFAULT_NUM_WALKS = 100
DEFAULT_WALK_LEN = 20
RESAMPLE_FACTOR = 10


@dataclass(frozen=True)
class MetaPathTemplate:
    """Named kind sequence; consecutive kinds must form valid edge kinds."""

    name: str
    kinds: tuple[str, ...]

    def __post_init__(self):
        if self.kinds[0] != "Q" or self.kinds[-1] != "Q":
            raise ValueError(f"template {self.name} must start and end at Q")
        for x, y in zip(self.kinds, self.kinds[1:]):
            if frozenset((x, y)) not in EDGE_KINDS:
                raise ValueError(f"template {self.name} has invalid step {x}-{y}")

    @property
    def period(self) -> int:
        return len(self.kinds) - 1

    def kind_at(self, position: int) -> str:
        """Node kind at a walk position under cyclic extension of the pattern."""
        if position == 0:
            return self.kinds[0]
        return self.kinds[(position - 1) % self.period + 1]


_TEMPLATE_NAMES = (
    # basic
    "Q-U-Q",
    "Q-K-Q",
    "Q-D-Q",
    "Q-U-A-U-Q",
    # composite
    "Q-K-Q-D-Q",
    "Q-D-Q-K-Q",
    "Q-U-Q-D-Q",
    "Q-D-Q-U-Q",
    "Q-K-Q-U-Q",
    "Q-U-Q-K-Q",
    "Q-K-Q-U-Q-D-Q",
    "Q-U-Q-K-Q-D-Q",
    "Q-K-Q-U-A-U-Q",
    "Q-K-Q-U-Q-D-Q-U-A-U-Q",
)

TEMPLATES: dict[str, MetaPathTemplate] = {
    name: MetaPathTemplate(name, tuple(name.split("-"))) for name in _TEMPLATE_NAMES
}


@dataclass(frozen=True)
class PathInstance:
    """One concrete sampled walk under a template, tied to a target question and KC."""

    template: MetaPathTemplate
    nodes: tuple[Node, ...]
    target_kc: str

    @property
    def target_question(self) -> str:
        return self.nodes[0][1]

    @property
    def edge_count(self) -> int:
        return len(self.nodes) - 1


class Mrhin:
    """Immutable typed graph with kind-filtered adjacency."""

    def __init__(self, adjacency: Mapping[Node, Mapping[str, tuple[Node, ...]]]):
        self._adj = {n: dict(kinds) for n, kinds in adjacency.items()}

    @classmethod
    def build(cls, d: Dataset, m: IrtModel) -> "Mrhin":
        """Assemble nodes and deduplicated edges from a split dataset and fitted model."""
        adj: dict[Node, dict[str, set[Node]]] = {}

        def add_node(node: Node):
            adj.setdefault(node, {})

        def add_edge(x: Node, y: Node):
            adj.setdefault(x, {}).setdefault(y[0], set()).add(y)
            adj.setdefault(y, {}).setdefault(x[0], set()).add(x)

        for s in d.students():
            add_node(("U", s))
        for q in d.questions():
            add_node(("Q", q))
        for k in d.kcs():
            add_node(("K", k))

        for i in d.iter_split("train"):
            add_edge(("Q", i.question_id), ("U", i.student_id))
        for q, kcs in d.question_kcs().items():
            for k in kcs:
                add_edge(("Q", q), ("K", k))
        for q in d.questions():
            add_edge(("Q", q), ("D", m.difficulty_level[q].label))
        for s in d.students():
            add_edge(("U", s), ("A", m.ability_level[s].label))

        frozen = {
            node: {kind: tuple(sorted(nbrs)) for kind, nbrs in kinds.items()}
            for node, kinds in adj.items()
        }
        return cls(frozen)

    def nodes(self, kind: str | None = None) -> tuple[Node, ...]:
        if kind is None:
            return tuple(sorted(self._adj))
        return tuple(sorted(n for n in self._adj if n[0] == kind))

    def has_node(self, node: Node) -> bool:
        return node in self._adj

    def neighbors(self, node: Node, kind: str | None = None) -> tuple[Node, ...]:
        kinds = self._adj.get(node, {})
        if kind is not None:
            return kinds.get(kind, ())
        out: list[Node] = []
        for k in sorted(kinds):
            out.extend(kinds[k])
        return tuple(out)

    def has_edge(self, x: Node, y: Node) -> bool:
        return y in self._adj.get(x, {}).get(y[0], ())

    def edge_count(self) -> int:
        return sum(len(nbrs) for kinds in self._adj.values() for nbrs in kinds.values()) // 2

    def question_kcs(self, question_id: str) -> frozenset[str]:
        return frozenset(n[1] for n in self.neighbors(("Q", question_id), "K"))


def graph_distance(g: Mrhin, x: Node, y: Node, cap: int = DEFAULT_WALK_LEN) -> int:
    """Breadth-first shortest hop count between two nodes, saturating at ``cap``."""
    if not g.has_node(x) or not g.has_node(y):
        raise ValueError("both endpoints must be graph nodes")
    if x == y:
        return 0
    seen = {x}
    frontier = deque([(x, 0)])
    while frontier:
        node, depth = frontier.popleft()
        if depth >= cap:
            continue
        for nbr in g.neighbors(node):
            if nbr == y:
                return depth + 1
            if nbr not in seen:
                seen.add(nbr)
                frontier.append((nbr, depth + 1))
    return cap


def sample_instances(
    g: Mrhin,
    template: MetaPathTemplate,
    q0: str,
    n: int = DEFAULT_NUM_WALKS,
    walk_len: int = DEFAULT_WALK_LEN,
    seed: int = 0,
    target_kc: str | None = None,
) -> list[PathInstance]:
    """Sample up to ``n`` template-conformant walks of ``walk_len`` nodes from ``q0``.

    A walk that hits a node with no neighbor of the required next kind is
    kept truncated if it already completed one full template cycle, otherwise
    discarded and resampled; sampling stops after 10n attempts.  Each attempt
    draws its own RNG from (seed, template, q0, attempt index), so parallel
    and serial sampling agree and reruns are byte-identical.
    """
    start: Node = ("Q", q0)
    if not g.has_node(start):
        raise ValueError(f"question {q0!r} is not a node of the graph")
    kcs = g.question_kcs(q0)
    if target_kc is None:
        if not kcs:
            raise ValueError(f"question {q0!r} has no knowledge concepts")
        target_kc = min(kcs)
    elif target_kc not in kcs:
        raise ValueError(f"target KC {target_kc!r} does not belong to question {q0!r}")

    kept: list[PathInstance] = []
    min_full_cycle = len(template.kinds)
    for attempt in range(RESAMPLE_FACTOR * n):
        rng = derive_rng(seed, template.name, q0, attempt)
        walk: list[Node] = [start]
        dead_end = False
        for position in range(1, walk_len):
            next_kind = template.kind_at(position)
            nbrs = g.neighbors(walk[-1], next_kind)
            if not nbrs:
                dead_end = True
                break
            walk.append(nbrs[rng.randrange(len(nbrs))])
        if dead_end and len(walk) < min_full_cycle:
            continue
        kept.append(PathInstance(template=template, nodes=tuple(walk), target_kc=target_kc))
        if len(kept) == n:
            break
    if not kept:
        logger.info("no conformant walk for template %s from %s", template.name, q0)
    return kept


def validate_instance(g: Mrhin, inst: PathInstance) -> None:
    """Raise ValueError unless the instance conforms to its template on this graph."""
    if len(inst.nodes) < len(inst.template.kinds):
        raise ValueError("instance shorter than one full template cycle")
    for position, node in enumerate(inst.nodes):
        expected = inst.template.kind_at(position)
        if node[0] != expected:
            raise ValueError(f"node {position} has kind {node[0]}, template expects {expected}")
        if not g.has_node(node):
            raise ValueError(f"node {node} is not in the graph")
    for x, y in zip(inst.nodes, inst.nodes[1:]):
        if not g.has_edge(x, y):
            raise ValueError(f"missing edge {x} - {y}")
    if inst.target_kc not in g.question_kcs(inst.target_question):
        raise ValueError("target KC does not belong to the target question")


# -- graph store -------------------------------------------------------------


def write_graph(g: Mrhin, sink: str | Path | IO[str]) -> None:
    """JSON adjacency artifact for the graph-build stage."""
    payload = {
        f"{kind}:{node_id}": {
            k: [f"{nk}:{ni}" for nk, ni in g.neighbors((kind, node_id), k)]
            for k in NODE_KINDS
            if g.neighbors((kind, node_id), k)
        }
        for kind, node_id in g.nodes()
    }
    text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    if isinstance(sink, (str, Path)):
        Path(sink).write_text(text, encoding="utf-8")
    else:
        sink.write(text)


def read_graph(source: str | Path | IO[str]) -> Mrhin:
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    payload = json.loads(text)

    def decode(token: str) -> Node:
        kind, node_id = token.split(":", 1)
        return (kind, node_id)

    adjacency = {
        decode(token): {k: tuple(decode(t) for t in nbrs) for k, nbrs in kinds.items()}
        for token, kinds in payload.items()
    }
    return Mrhin(adjacency)


# -- instance store ---------------------------------------------------------


def write_instances(instances: Iterable[PathInstance], sink: str | Path | IO[str]) -> None:
    """One JSON record per instance, grouped by target question for cache scans."""
    records = sorted(
        instances,
        key=lambda p: (p.target_question, p.template.name, p.nodes),
    )
    lines = [
        json.dumps(
            {
                "target_q": p.target_question,
                "template": p.template.name,
                "target_kc": p.target_kc,
                "nodes": [[k, i] for k, i in p.nodes],
            },
            sort_keys=True,
        )
        for p in records
    ]
    text = "\n".join(lines) + ("\n" if lines else "")
    if isinstance(sink, (str, Path)):
        Path(sink).write_text(text, encoding="utf-8")
    else:
        sink.write(text)


def read_instances(source: str | Path | IO[str]) -> list[PathInstance]:
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    out: list[PathInstance] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(
            PathInstance(
                template=TEMPLATES[rec["template"]],
                nodes=tuple((k, i) for k, i in rec["nodes"]),
                target_kc=rec["target_kc"],
            )
        )
    return out

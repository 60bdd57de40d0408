"""Undirected medical knowledge graphs: TSV loading, hop distances, linking.

Two graph instances drive the pipeline (a disease-disease graph and a
test-disease graph) but the type is generic. Hop distances are exact BFS
results memoized per source node; the cache is guarded by a lock so filter
workers can share one graph instance.
"""

from __future__ import annotations

import logging
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .errors import DanglingEdge, MalformedLine, UnknownNode
from .textnorm import normalize, overlap_score

logger = logging.getLogger(__name__)

# Sentinel for "no path exists": orders above every finite hop count and
# survives symmetry/triangle comparisons. Downstream metric code maps it to
# a finite cap before anything is serialized.
UNREACHABLE = math.inf

DEFAULT_LINK_THRESHOLD = 0.85


@dataclass(frozen=True)
class GraphNode:
    node_id: str
    canonical_name: str
    synonyms: tuple[str, ...] = ()


@dataclass(frozen=True)
class LinkResult:
    query: str
    node_id: str | None
    score: float
    method: str  # "exact" | "normalized" | "fuzzy" | "external"


# External linker hook: callable returning (node_id, score) or None.
ExternalLinker = Callable[[str], "tuple[str, float] | None"]


@dataclass
class KnowledgeGraph:
    name: str
    nodes: dict[str, GraphNode]
    adjacency: dict[str, tuple[str, ...]]
    _dist_cache: dict[str, dict[str, int]] = field(default_factory=dict, repr=False)
    _link_cache: dict[tuple[str, float], LinkResult] = field(default_factory=dict, repr=False)
    _name_index: dict[str, list[str]] | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def edge_count(self) -> int:
        return sum(len(nbrs) for nbrs in self.adjacency.values()) // 2

    def name_index(self) -> dict[str, list[str]]:
        """normalized name/synonym -> sorted node ids carrying it."""
        with self._lock:
            if self._name_index is None:
                index: dict[str, list[str]] = {}
                for node in self.nodes.values():
                    for label in (node.canonical_name, *node.synonyms):
                        key = normalize(label)
                        if key:
                            index.setdefault(key, []).append(node.node_id)
                self._name_index = {key: sorted(ids) for key, ids in index.items()}
            return self._name_index


def load_graph(node_file: str | Path, edge_file: str | Path, name: str = "graph") -> KnowledgeGraph:
    """Load a graph from TSV node and edge files.

    Node rows: ``node_id<TAB>canonical_name<TAB>syn1|syn2|...`` (synonyms
    optional). Edge rows: ``node_id<TAB>node_id``. ``#`` lines and blank
    lines are skipped in both files. Duplicate edges collapse to one;
    self-loop rows are dropped with a warning.
    """
    nodes: dict[str, GraphNode] = {}
    with open(node_file, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip("\n")
            if not stripped.strip() or stripped.lstrip().startswith("#"):
                continue
            cols = stripped.split("\t")
            if len(cols) < 2:
                raise MalformedLine(line_no, f"{node_file}: expected at least 2 tab-separated columns")
            node_id, canonical = cols[0].strip(), cols[1].strip()
            if not node_id or not canonical:
                raise MalformedLine(line_no, f"{node_file}: empty node_id or canonical_name")
            if node_id in nodes:
                raise MalformedLine(line_no, f"{node_file}: duplicate node_id {node_id!r}")
            synonyms: tuple[str, ...] = ()
            if len(cols) >= 3 and cols[2].strip():
                synonyms = tuple(s.strip() for s in cols[2].split("|") if s.strip())
            nodes[node_id] = GraphNode(node_id, canonical, synonyms)

    neighbours: dict[str, set[str]] = {node_id: set() for node_id in nodes}
    with open(edge_file, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip("\n")
            if not stripped.strip() or stripped.lstrip().startswith("#"):
                continue
            cols = [c.strip() for c in stripped.split("\t")]
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise MalformedLine(line_no, f"{edge_file}: expected exactly 2 tab-separated node ids")
            a, b = cols
            for endpoint in (a, b):
                if endpoint not in nodes:
                    raise DanglingEdge(endpoint)
            if a == b:
                logger.warning("%s line %d: dropping self-loop edge on %r", edge_file, line_no, a)
                continue
            neighbours[a].add(b)
            neighbours[b].add(a)

    adjacency = {node_id: tuple(sorted(nbrs)) for node_id, nbrs in neighbours.items()}
    return KnowledgeGraph(name=name, nodes=nodes, adjacency=adjacency)


def _bfs_distances(graph: KnowledgeGraph, source: str) -> dict[str, int]:
    dist = {source: 0}
    queue: deque[str] = deque([source])
    while queue:
        current = queue.popleft()
        for nbr in graph.adjacency[current]:
            if nbr not in dist:
                dist[nbr] = dist[current] + 1
                queue.append(nbr)
    return dist


def hop_distance(graph: KnowledgeGraph, a: str, b: str) -> int | float:
    """Exact BFS hop count between two node ids, UNREACHABLE if no path."""
    for node_id in (a, b):
        if node_id not in graph.nodes:
            raise UnknownNode(node_id)
    if a == b:
        return 0
    with graph._lock:
        frontier = graph._dist_cache.get(a)
        if frontier is None and b in graph._dist_cache:
            # Undirected, so any cached frontier answers the mirrored query.
            frontier = graph._dist_cache[b]
            return frontier.get(a, UNREACHABLE)
    if frontier is None:
        computed = _bfs_distances(graph, a)
        with graph._lock:
            frontier = graph._dist_cache.setdefault(a, computed)
    return frontier.get(b, UNREACHABLE)


def link_entity(
    graph: KnowledgeGraph,
    text: str,
    *,
    threshold: float = DEFAULT_LINK_THRESHOLD,
    external: ExternalLinker | None = None,
) -> LinkResult:
    """Link free text to a graph node.

    Stages, in order: exact string match against canonical names and
    synonyms; exact match after normalization; token-set fuzzy match scored
    by the symmetric overlap ratio; optional external backend. The best
    candidate is accepted iff its score reaches the threshold, ties broken
    by lexicographically smallest node_id. Unlinkable queries come back with
    node_id None; this never raises.
    """
    query = text.strip()
    if not query:
        return LinkResult(query=text, node_id=None, score=0.0, method="fuzzy")

    cache_key = (query, threshold)
    if external is None:
        with graph._lock:
            cached = graph._link_cache.get(cache_key)
        if cached is not None:
            return LinkResult(query=text, node_id=cached.node_id, score=cached.score, method=cached.method)

    result = _link_uncached(graph, text, query, threshold, external)
    if external is None:
        with graph._lock:
            graph._link_cache[cache_key] = result
    return result


def _link_uncached(
    graph: KnowledgeGraph,
    text: str,
    query: str,
    threshold: float,
    external: ExternalLinker | None,
) -> LinkResult:
    exact_ids = sorted(
        node.node_id
        for node in graph.nodes.values()
        if query == node.canonical_name or query in node.synonyms
    )
    if exact_ids:
        return LinkResult(query=text, node_id=exact_ids[0], score=1.0, method="exact")

    norm_query = normalize(query)
    norm_ids = graph.name_index().get(norm_query)
    if norm_ids:
        return LinkResult(query=text, node_id=norm_ids[0], score=1.0, method="normalized")

    best_id: str | None = None
    best_score = 0.0
    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        score = max(overlap_score(query, label) for label in (node.canonical_name, *node.synonyms))
        if score > best_score:
            best_id, best_score = node_id, score
    if best_id is not None and best_score >= threshold:
        return LinkResult(query=text, node_id=best_id, score=best_score, method="fuzzy")

    if external is not None:
        hit = external(query)
        if hit is not None:
            ext_id, ext_score = hit
            if ext_id not in graph.nodes:
                raise UnknownNode(ext_id)
            if ext_score >= threshold:
                return LinkResult(query=text, node_id=ext_id, score=ext_score, method="external")

    return LinkResult(query=text, node_id=None, score=best_score, method="fuzzy")


def synonyms_from_graph(graph: KnowledgeGraph) -> dict[str, str]:
    """normalized synonym -> normalized canonical name, for the eval matcher."""
    table: dict[str, str] = {}
    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        canon = normalize(node.canonical_name)
        for syn in node.synonyms:
            key = normalize(syn)
            if key and key != canon:
                table.setdefault(key, canon)
    return table


def subgraph_nodes(graph: KnowledgeGraph, node_ids: Iterable[str]) -> list[GraphNode]:
    out = []
    for node_id in node_ids:
        if node_id not in graph.nodes:
            raise UnknownNode(node_id)
        out.append(graph.nodes[node_id])
    return out

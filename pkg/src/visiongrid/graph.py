"""Sparse data-graph execution engine.

Three execution modes over an undirected :class:`DataGraph`:

* :func:`run_vertex_parallel` -- map a pure function over vertex payloads
* :func:`run_edge_parallel` -- map a pure function over edge payloads
* :func:`run_message_passing` -- bulk-synchronous vertex programs: each
  round every vertex gathers its neighbors' previous-round payloads and
  applies a local update, until the max residual drops to the program's
  tolerance or the round budget runs out.

Rounds are Jacobi-style: no gather in round t can observe a round-t apply,
which makes results bit-identical regardless of executor thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import math

from .errors import DisconnectedGraph, EdgeFailure, NonFiniteResidual, VertexFailure


def edge_key(a, b) -> tuple:
    """Canonical unordered key; vertex ids must be mutually orderable."""
    if a == b:
        raise ValueError(f"self-loop on vertex {a!r}")
    return (a, b) if a < b else (b, a)


class DataGraph:
    """Undirected graph with arbitrary vertex and edge payloads.

    Vertices map id -> payload; edges map a canonical id pair -> payload.
    The adjacency index is kept sorted so iteration order (and therefore
    any floating-point reduction an algorithm builds on it) is stable.
    """

    def __init__(self, vertices: dict, edges=()):
        self.vertices = dict(vertices)
        self.edges: dict = {}
        adjacency: dict = {v: [] for v in self.vertices}
        for a, b, payload in edges:
            if a not in self.vertices or b not in self.vertices:
                raise KeyError(f"edge ({a!r}, {b!r}) references a missing vertex")
            key = edge_key(a, b)
            if key in self.edges:
                raise ValueError(f"duplicate edge {key!r}")
            self.edges[key] = payload
            adjacency[a].append(b)
            adjacency[b].append(a)
        self.adjacency = {v: tuple(sorted(ns)) for v, ns in adjacency.items()}

    def neighbors(self, v) -> tuple:
        return self.adjacency[v]

    def edge_payload(self, a, b):
        return self.edges[edge_key(a, b)]

    def with_vertices(self, vertices: dict) -> "DataGraph":
        """Same topology, new vertex payloads."""
        if set(vertices) != set(self.vertices):
            raise KeyError("vertex set must be unchanged")
        g = DataGraph.__new__(DataGraph)
        g.vertices = dict(vertices)
        g.edges = self.edges
        g.adjacency = self.adjacency
        return g

    def with_edges(self, edges: dict) -> "DataGraph":
        if set(edges) != set(self.edges):
            raise KeyError("edge set must be unchanged")
        g = DataGraph.__new__(DataGraph)
        g.vertices = self.vertices
        g.edges = dict(edges)
        g.adjacency = self.adjacency
        return g

    def is_connected(self) -> bool:
        if not self.vertices:
            return True
        seen = set()
        stack = [next(iter(self.vertices))]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            stack.extend(u for u in self.adjacency[v] if u not in seen)
        return len(seen) == len(self.vertices)

    def require_connected(self):
        if not self.is_connected():
            raise DisconnectedGraph(
                f"graph with {len(self.vertices)} vertices is not connected")


@dataclass(frozen=True)
class VertexProgram:
    """Gather/apply contract for message passing.

    ``gather(vertex_id, payload, neighbors, incident)`` sees neighbors as a
    sorted list of ``(id, payload)`` pairs and incident edges as sorted
    ``(other_id, edge_payload)`` pairs; it must not mutate anything.
    ``apply(vertex_id, payload, summary)`` returns ``(new_payload, residual)``
    with a non-negative residual; the run halts once the round's max
    residual is <= epsilon.
    """

    gather: Callable
    apply: Callable
    epsilon: float = 0.0


@dataclass(frozen=True)
class ExecutionReport:
    rounds: int
    final_residual: float
    residual_trace: tuple

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "final_residual": self.final_residual,
                "residual_trace": list(self.residual_trace)}


def _map_over(items, fn, workers):
    """Map fn over items, collecting per-item failures.

    Returns (results dict, failures dict).  Parallelism never changes the
    result: every item is computed independently and keyed by id.
    """
    results: dict = {}
    failures: dict = {}
    if workers is None or workers <= 1 or len(items) <= 1:
        for key, args in items:
            try:
                results[key] = fn(*args)
            except Exception as exc:  # noqa: BLE001 - reported via *Failure
                failures[key] = exc
        return results, failures
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {key: pool.submit(fn, *args) for key, args in items}
        for key, fut in futures.items():
            try:
                results[key] = fut.result()
            except Exception as exc:  # noqa: BLE001
                failures[key] = exc
    return results, failures


def run_vertex_parallel(graph: DataGraph, fn, workers: int | None = None) -> DataGraph:
    """Replace every vertex payload with ``fn(vertex_id, payload)``."""
    items = [(v, (v, payload)) for v, payload in graph.vertices.items()]
    results, failures = _map_over(items, fn, workers)
    if failures:
        raise VertexFailure(failures, sorted(results, key=repr))
    return graph.with_vertices(results)


def run_edge_parallel(graph: DataGraph, fn, workers: int | None = None) -> DataGraph:
    """Replace every edge payload with ``fn(a, b, payload, payload_a, payload_b)``."""
    items = [
        ((a, b), (a, b, payload, graph.vertices[a], graph.vertices[b]))
        for (a, b), payload in graph.edges.items()
    ]
    results, failures = _map_over(items, fn, workers)
    if failures:
        raise EdgeFailure(failures, sorted(results, key=repr))
    return graph.with_edges(results)


def run_message_passing(graph: DataGraph, program: VertexProgram,
                        max_rounds: int, workers: int | None = None,
                        on_round=None):
    """Run a vertex program in bulk-synchronous rounds.

    Returns ``(updated graph, ExecutionReport)``.  ``on_round(round_index,
    payloads)`` is an optional instrumentation hook called after each round
    with the freshly applied payload map.
    """
    if max_rounds < 1:
        raise ValueError(f"max_rounds must be >= 1, got {max_rounds}")
    if program.epsilon < 0:
        raise ValueError("epsilon must be >= 0")

    adjacency = graph.adjacency
    edges = graph.edges
    payloads = dict(graph.vertices)
    vertex_ids = sorted(payloads, key=repr)
    incident = {
        v: tuple((u, edge_key(v, u)) for u in adjacency[v]) for v in vertex_ids
    }

    def step(v, prev):
        neighbor_view = [(u, prev[u]) for u in adjacency[v]]
        incident_view = [(u, edges[k]) for u, k in incident[v]]
        summary = program.gather(v, prev[v], neighbor_view, incident_view)
        new_payload, residual = program.apply(v, prev[v], summary)
        residual = float(residual)
        if not math.isfinite(residual) or residual < 0:
            raise NonFiniteResidual(
                f"vertex {v!r} reported residual {residual!r}")
        return new_payload, residual

    trace = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None
    try:
        for round_index in range(1, max_rounds + 1):
            prev = payloads
            if pool is None:
                results = {v: step(v, prev) for v in vertex_ids}
            else:
                futures = {v: pool.submit(step, v, prev) for v in vertex_ids}
                results = {v: fut.result() for v, fut in futures.items()}
            payloads = {v: results[v][0] for v in vertex_ids}
            max_residual = max((results[v][1] for v in vertex_ids), default=0.0)
            trace.append(max_residual)
            if on_round is not None:
                on_round(round_index, payloads)
            if max_residual <= program.epsilon:
                break
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    report = ExecutionReport(rounds=len(trace),
                             final_residual=trace[-1] if trace else 0.0,
                             residual_trace=tuple(trace))
    return graph.with_vertices(payloads), report

"""Typed multi-relational graph container and its line-oriented file format.

Nodes are partitioned by type; edges are directed and typed. Every
non-reverse edge type is paired with a reverse type (name suffix
``_rev``) holding the swapped pairs, so aggregation can run against edge
orientation uniformly. Edge lists are kept sorted by (source,
destination) and indexed CSR-style by destination.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

REVERSE_SUFFIX = "_rev"
MAGIC = "MRGRAPH 1"


class GraphFormatError(ValueError):
    """Malformed graph file; carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class GraphInvariantError(ValueError):
    """Structural violation: schema, dangling index, or reverse closure."""


@dataclass(frozen=True)
class EdgeType:
    name: str
    src: str
    dst: str
    is_reverse: bool = False


@dataclass(frozen=True)
class GlobalNodeId:
    node_type: int
    local_index: int


def _check_name(name: str, what: str) -> None:
    if not name or not all(c.isalnum() or c == "_" for c in name):
        raise GraphInvariantError(f"invalid {what} name {name!r}")


@dataclass(frozen=True)
class Schema:
    node_types: tuple[str, ...]
    edge_types: tuple[EdgeType, ...]

    def __post_init__(self):
        names = [t for t in self.node_types]
        if len(set(names)) != len(names):
            raise GraphInvariantError("duplicate node type names")
        for t in names:
            _check_name(t, "node type")
        enames = [e.name for e in self.edge_types]
        if len(set(enames)) != len(enames):
            raise GraphInvariantError("duplicate edge type names")
        by_name = {e.name: e for e in self.edge_types}
        for e in self.edge_types:
            _check_name(e.name, "edge type")
            if e.src not in names or e.dst not in names:
                raise GraphInvariantError(
                    f"edge type {e.name}: unknown endpoint type {e.src!r} or {e.dst!r}"
                )
            if e.is_reverse != e.name.endswith(REVERSE_SUFFIX):
                raise GraphInvariantError(
                    f"edge type {e.name}: reverse flag inconsistent with {REVERSE_SUFFIX!r} suffix"
                )
            if e.is_reverse:
                base = by_name.get(e.name[: -len(REVERSE_SUFFIX)])
                if base is None or base.is_reverse:
                    raise GraphInvariantError(f"reverse type {e.name} has no base type")
                if base.src != e.dst or base.dst != e.src:
                    raise GraphInvariantError(
                        f"reverse type {e.name} does not swap endpoints of {base.name}"
                    )
            else:
                rev = by_name.get(e.name + REVERSE_SUFFIX)
                if rev is None or not rev.is_reverse:
                    raise GraphInvariantError(f"edge type {e.name} lacks a reverse type")

    @staticmethod
    def with_reverses(
        node_types: Iterable[str], forward_edges: Iterable[tuple[str, str, str]]
    ) -> "Schema":
        """Build a schema from forward edge types; reverses are appended."""
        forward = [EdgeType(n, s, d) for n, s, d in forward_edges]
        reverses = [EdgeType(e.name + REVERSE_SUFFIX, e.dst, e.src, True) for e in forward]
        return Schema(tuple(node_types), tuple(forward + reverses))

    def node_type_index(self, name: str) -> int:
        try:
            return self.node_types.index(name)
        except ValueError:
            raise GraphInvariantError(f"unknown node type {name!r}") from None

    def edge_type(self, name: str) -> EdgeType:
        for e in self.edge_types:
            if e.name == name:
                return e
        raise GraphInvariantError(f"unknown edge type {name!r}")

    def reverse_name(self, name: str) -> str:
        if name.endswith(REVERSE_SUFFIX):
            return name[: -len(REVERSE_SUFFIX)]
        return name + REVERSE_SUFFIX


class MultiRelationalGraph:
    """Immutable after construction; safe for concurrent reads.

    edges: per edge type, an (m, 2) int64 array of (src, dst) pairs,
    sorted by (src, dst). features: per node type, an (n, d) float64
    matrix.
    """

    def __init__(
        self,
        schema: Schema,
        node_counts: dict[str, int],
        edges: dict[str, np.ndarray],
        features: dict[str, np.ndarray],
    ):
        self.schema = schema
        self.node_counts = {t: int(node_counts[t]) for t in schema.node_types}
        self.edges = {}
        for et in schema.edge_types:
            e = np.asarray(edges.get(et.name, np.empty((0, 2), dtype=np.int64)),
                           dtype=np.int64).reshape(-1, 2)
            if e.shape[0]:
                order = np.lexsort((e[:, 1], e[:, 0]))
                e = np.ascontiguousarray(e[order])
            self.edges[et.name] = e
        self.features = {}
        for t in schema.node_types:
            f = np.asarray(features[t], dtype=np.float64)
            if f.ndim != 2:
                raise GraphInvariantError(f"features for {t} must be 2-D, got {f.shape}")
            self.features[t] = np.ascontiguousarray(f)
        self._csr: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.validate()

    def validate(self) -> None:
        for t in self.schema.node_types:
            n = self.node_counts[t]
            if n < 0:
                raise GraphInvariantError(f"negative count for node type {t}")
            if self.features[t].shape[0] != n:
                raise GraphInvariantError(
                    f"feature rows for {t}: {self.features[t].shape[0]} != count {n}"
                )
        for et in self.schema.edge_types:
            e = self.edges[et.name]
            ns, nd = self.node_counts[et.src], self.node_counts[et.dst]
            if e.shape[0]:
                if e[:, 0].min() < 0 or e[:, 0].max() >= ns:
                    raise GraphInvariantError(
                        f"dangling source index in edge type {et.name} (count {ns})"
                    )
                if e[:, 1].min() < 0 or e[:, 1].max() >= nd:
                    raise GraphInvariantError(
                        f"dangling destination index in edge type {et.name} (count {nd})"
                    )
            pairs = set(map(tuple, e.tolist()))
            if len(pairs) != e.shape[0]:
                raise GraphInvariantError(f"duplicate pair within edge type {et.name}")
            rev = self.edges[self.schema.reverse_name(et.name)]
            if rev.shape[0] != e.shape[0] or pairs != set(
                (int(j), int(i)) for i, j in rev.tolist()
            ):
                raise GraphInvariantError(
                    f"reverse closure broken between {et.name} and its reverse"
                )

    def num_edges(self, edge_type: str) -> int:
        return self.edges[edge_type].shape[0]

    def _csr_by_dst(self, edge_type: str) -> tuple[np.ndarray, np.ndarray]:
        cached = self._csr.get(edge_type)
        if cached is not None:
            return cached
        et = self.schema.edge_type(edge_type)
        e = self.edges[edge_type]
        n = self.node_counts[et.dst]
        order = np.lexsort((e[:, 0], e[:, 1]))
        srcs = e[order, 0]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, e[:, 1] + 1, 1)
        np.cumsum(indptr, out=indptr)
        self._csr[edge_type] = (indptr, srcs)
        return indptr, srcs

    def neighbors(self, node: GlobalNodeId, edge_type: str) -> list[GlobalNodeId]:
        """In-neighbors of ``node`` under ``edge_type``: sources of all
        edges into it, in ascending order."""
        et = self.schema.edge_type(edge_type)
        if self.schema.node_types[node.node_type] != et.dst:
            raise GraphInvariantError(
                f"node of type {self.schema.node_types[node.node_type]} is not a "
                f"destination of edge type {edge_type} (dst {et.dst})"
            )
        indptr, srcs = self._csr_by_dst(edge_type)
        lo, hi = indptr[node.local_index], indptr[node.local_index + 1]
        src_type = self.schema.node_type_index(et.src)
        return [GlobalNodeId(src_type, int(s)) for s in srcs[lo:hi]]


def neighbors(g: MultiRelationalGraph, node: GlobalNodeId, edge_type: str):
    return g.neighbors(node, edge_type)


# ---------------------------------------------------------------------------
# file format


def _fmt(v: float) -> str:
    return "%.17g" % v


def save_graph(g: MultiRelationalGraph, path) -> None:
    """Canonical serialization: schema order, sorted edge lists, reverse
    types implicit, floats as %.17g. Structurally equal graphs produce
    identical bytes."""
    g.validate()
    lines = [MAGIC]
    for t in g.schema.node_types:
        lines.append(f"nodetype {t} {g.node_counts[t]} {g.features[t].shape[1]}")
    for et in g.schema.edge_types:
        flag = "implicit_reverse" if et.is_reverse else "explicit"
        lines.append(f"edgetype {et.name} {et.src} {et.dst} {flag}")
    for t in g.schema.node_types:
        lines.append(f"features {t}")
        for row in g.features[t]:
            lines.append(" ".join(_fmt(v) for v in row))
    for et in g.schema.edge_types:
        if et.is_reverse:
            continue
        lines.append(f"edges {et.name}")
        for i, j in g.edges[et.name]:
            lines.append(f"{i} {j}")
        lines.append("end")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, path):
        with open(path, "r", encoding="utf-8") as fh:
            self.lines = fh.read().split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0

    def peek(self) -> str | None:
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def next(self) -> str | None:
        line = self.peek()
        if line is not None:
            self.pos += 1
        return line

    @property
    def line_no(self) -> int:
        return self.pos  # 1-based number of the line just consumed


def load_graph(path) -> MultiRelationalGraph:
    """Parse a graph file; any deviation from the format is an error.

    Reverse edge types marked ``implicit_reverse`` have no edges block
    and are materialized by swapping the base type's pairs.
    """
    rd = _LineReader(path)
    if rd.next() != MAGIC:
        raise GraphFormatError(1, f"expected header {MAGIC!r}")

    node_types: list[str] = []
    counts: dict[str, int] = {}
    dims: dict[str, int] = {}
    while (line := rd.peek()) is not None and line.startswith("nodetype "):
        rd.next()
        parts = line.split()
        if len(parts) != 4:
            raise GraphFormatError(rd.line_no, f"malformed nodetype line: {line!r}")
        _, name, count, dim = parts
        try:
            counts[name], dims[name] = int(count), int(dim)
        except ValueError:
            raise GraphFormatError(rd.line_no, f"bad integer in {line!r}") from None
        if counts[name] < 0 or dims[name] < 0:
            raise GraphFormatError(rd.line_no, f"negative count or width in {line!r}")
        node_types.append(name)

    edge_types: list[EdgeType] = []
    explicit: dict[str, bool] = {}
    while (line := rd.peek()) is not None and line.startswith("edgetype "):
        rd.next()
        parts = line.split()
        if len(parts) != 5 or parts[4] not in ("explicit", "implicit_reverse"):
            raise GraphFormatError(rd.line_no, f"malformed edgetype line: {line!r}")
        _, name, src, dst, flag = parts
        is_rev = name.endswith(REVERSE_SUFFIX)
        if flag == "implicit_reverse" and not is_rev:
            raise GraphFormatError(
                rd.line_no, f"implicit_reverse on non-reverse type {name!r}"
            )
        edge_types.append(EdgeType(name, src, dst, is_rev))
        explicit[name] = flag == "explicit"

    try:
        schema = Schema(tuple(node_types), tuple(edge_types))
    except GraphInvariantError as exc:
        raise GraphFormatError(rd.line_no, str(exc)) from None

    features: dict[str, np.ndarray] = {}
    for t in node_types:
        line = rd.next()
        if line != f"features {t}":
            raise GraphFormatError(
                rd.line_no, f"expected 'features {t}', got {line!r}"
            )
        rows = np.empty((counts[t], dims[t]), dtype=np.float64)
        for r in range(counts[t]):
            line = rd.next()
            if line is None:
                raise GraphFormatError(rd.line_no, f"truncated features block for {t}")
            vals = line.split()
            if len(vals) != dims[t]:
                raise GraphFormatError(
                    rd.line_no, f"expected {dims[t]} values, got {len(vals)}"
                )
            try:
                rows[r] = [float(v) for v in vals]
            except ValueError:
                raise GraphFormatError(rd.line_no, f"bad float in {line!r}") from None
        features[t] = rows

    edges: dict[str, np.ndarray] = {}
    for et in edge_types:
        if not explicit[et.name]:
            continue
        line = rd.next()
        if line != f"edges {et.name}":
            raise GraphFormatError(rd.line_no, f"expected 'edges {et.name}', got {line!r}")
        pairs: list[tuple[int, int]] = []
        while True:
            line = rd.next()
            if line is None:
                raise GraphFormatError(rd.line_no, f"edges block for {et.name} missing 'end'")
            if line == "end":
                break
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(rd.line_no, f"malformed edge line: {line!r}")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(rd.line_no, f"bad integer in {line!r}") from None
            if i < 0 or i >= counts[et.src] or j < 0 or j >= counts[et.dst]:
                raise GraphFormatError(
                    rd.line_no,
                    f"dangling edge index ({i}, {j}) for type {et.name} "
                    f"(counts {counts[et.src]}, {counts[et.dst]})",
                )
            pairs.append((i, j))
        edges[et.name] = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    if rd.peek() is not None:
        raise GraphFormatError(rd.pos + 1, f"unexpected trailing line: {rd.peek()!r}")

    # materialize implicit reverses from their base types
    for et in edge_types:
        if et.name not in edges:
            base = edges.get(schema.reverse_name(et.name))
            if base is None:
                raise GraphFormatError(
                    0, f"no edges for {et.name} and no base type to mirror"
                )
            edges[et.name] = base[:, ::-1]

    return MultiRelationalGraph(schema, counts, edges, features)

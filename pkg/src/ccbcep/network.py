"""Network and demand data model, TNTP ingestion, built-in instances."""

from __future__ import annotations

import heapq
import io
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

UMAX_FACTOR = 10.0
DEFAULT_BCOEF = 1.0

# Sioux-Falls benchmark links (1-based) whose b_a are never rescaled
SIOUX_FALLS_BENCHMARK = (16, 17, 19, 20, 25, 26, 29, 39, 48, 74)


class ParseError(ValueError):
    """Malformed input file."""


class ValidationError(ValueError):
    """Input parsed but violates a model invariant."""


class InfeasibleError(RuntimeError):
    """A requested OD pair cannot be connected."""


@dataclass(frozen=True)
class Link:
    id: int
    tail: int
    head: int
    t0: float
    cap: float
    umax: float
    bcoef: float


class Network:
    """Directed graph with BPR link data.

    Nodes are dense 0-based indices; ``labels[i]`` is the id used in files.
    Per-link fields are also exposed as numpy arrays (``t0``, ``cap``, ...),
    so a Network can stand in for a Link in the vectorised cost functions.
    """

    def __init__(self, links, n_nodes=None, labels=None):
        links = list(links)
        if not links:
            raise ValidationError("network has no links")
        for i, ln in enumerate(links):
            if ln.id != i:
                raise ValidationError(f"link ids must be dense 0..n-1, got {ln.id} at {i}")
            if not ln.t0 > 0:
                raise ValidationError(f"link {i}: t0 must be positive")
            if not ln.cap > 0:
                raise ValidationError(f"link {i}: cap must be positive")
            if ln.umax < 0:
                raise ValidationError(f"link {i}: umax must be nonnegative")
            if not ln.bcoef > 0:
                raise ValidationError(f"link {i}: bcoef must be positive")
        self.links = tuple(links)
        if n_nodes is None:
            n_nodes = 1 + max(max(ln.tail, ln.head) for ln in links)
        self.n_nodes = int(n_nodes)
        self.labels = list(labels) if labels is not None else list(range(1, self.n_nodes + 1))
        self.tail = np.array([ln.tail for ln in links], dtype=np.int64)
        self.head = np.array([ln.head for ln in links], dtype=np.int64)
        self.t0 = np.array([ln.t0 for ln in links], dtype=float)
        self.cap = np.array([ln.cap for ln in links], dtype=float)
        self.umax = np.array([ln.umax for ln in links], dtype=float)
        self.bcoef = np.array([ln.bcoef for ln in links], dtype=float)
        self.adjacency = [[] for _ in range(self.n_nodes)]
        for ln in links:
            self.adjacency[ln.tail].append(ln.id)
        self._index = {lab: i for i, lab in enumerate(self.labels)}
        self._build_graph()

    def _build_graph(self):
        # csgraph cannot hold parallel arcs; keep one arc per node pair and
        # route it through the cheapest member at query time
        pairs = {}
        for ln in self.links:
            pairs.setdefault((ln.tail, ln.head), []).append(ln.id)
        keys = sorted(pairs)  # row-major, same order as csr storage
        rows = np.array([k[0] for k in keys], dtype=np.int64)
        cols = np.array([k[1] for k in keys], dtype=np.int64)
        self._groups = [pairs[k] for k in keys]
        self._parallel = any(len(g) > 1 for g in self._groups)
        self._first = np.array([g[0] for g in self._groups], dtype=np.int64)
        self._codes = rows * self.n_nodes + cols
        indptr = np.zeros(self.n_nodes + 1, dtype=np.int32)
        np.add.at(indptr, rows + 1, 1)
        self._indptr = np.cumsum(indptr).astype(np.int32)
        self._indices = cols.astype(np.int32)

    @property
    def n_links(self):
        return len(self.links)

    def node(self, label):
        """Internal index of a file node id."""
        try:
            return self._index[label]
        except KeyError:
            raise ValidationError(f"unknown node {label}") from None

    def with_expansion(self, umax=None, bcoef=None):
        """Copy with umax and/or bcoef replaced (arrays indexed by link id)."""
        links = []
        for ln in self.links:
            links.append(Link(ln.id, ln.tail, ln.head, ln.t0, ln.cap,
                              float(umax[ln.id]) if umax is not None else ln.umax,
                              float(bcoef[ln.id]) if bcoef is not None else ln.bcoef))
        return Network(links, self.n_nodes, self.labels)

    def link_label(self, a):
        ln = self.links[a]
        return (self.labels[ln.tail], self.labels[ln.head])

    def shortest_trees(self, cost, origins):
        """One-to-all shortest paths from each origin.

        Returns (dist, pred) arrays of shape (len(origins), n_nodes); ``pred``
        holds the last link id on the shortest route, -1 at the root or when
        unreachable.
        """
        cost = np.asarray(cost, dtype=float)
        origins = np.asarray(origins, dtype=np.int64)
        if np.any(cost < 0):
            raise ValueError("link costs must be nonnegative")
        if self._parallel:
            best = np.array([g[int(np.argmin(cost[g]))] for g in self._groups], dtype=np.int64)
        else:
            best = self._first
        w = cost[best]
        if np.any(w <= 0):
            return self._heap_trees(cost, origins)
        mat = sp.csr_matrix((w, self._indices, self._indptr), shape=(self.n_nodes,) * 2)
        dist, prev = dijkstra(mat, directed=True, indices=origins, return_predecessors=True)
        pred = np.full(prev.shape, -1, dtype=np.int64)
        ok = prev >= 0
        r, c = np.nonzero(ok)
        if len(r):
            pos = np.searchsorted(self._codes, prev[r, c] * self.n_nodes + c)
            pred[r, c] = best[pos]
        return dist, pred

    def _heap_trees(self, cost, origins):
        n = self.n_nodes
        dist = np.full((len(origins), n), np.inf)
        pred = np.full((len(origins), n), -1, dtype=np.int64)
        for k, o in enumerate(origins.tolist()):
            d = dist[k]
            d[o] = 0.0
            heap = [(0.0, o)]
            done = np.zeros(n, dtype=bool)
            while heap:
                du, u = heapq.heappop(heap)
                if done[u]:
                    continue
                done[u] = True
                for a in self.adjacency[u]:
                    v = self.links[a].head
                    nd = du + cost[a]
                    if nd < d[v]:
                        d[v] = nd
                        pred[k, v] = a
                        heapq.heappush(heap, (nd, v))
        return dist, pred

    def trace_route(self, pred_row, origin, dest):
        """Link sequence from origin to dest following a predecessor row."""
        route = []
        node = dest
        while node != origin:
            a = int(pred_row[node])
            if a < 0:
                raise InfeasibleError(f"node {self.labels[dest]} unreachable from {self.labels[origin]}")
            route.append(a)
            node = self.links[a].tail
            if len(route) > self.n_links:
                raise RuntimeError("predecessor cycle")
        route.reverse()
        return tuple(route)

    def to_tntp(self):
        """Serialise as a TNTP net file (BPR columns only)."""
        out = io.StringIO()
        out.write(f"<NUMBER OF ZONES> {self.n_nodes}\n<NUMBER OF NODES> {self.n_nodes}\n")
        out.write(f"<FIRST THRU NODE> 1\n<NUMBER OF LINKS> {self.n_links}\n<END OF METADATA>\n\n")
        out.write("~\tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;\n")
        for ln in self.links:
            out.write(f"\t{self.labels[ln.tail]}\t{self.labels[ln.head]}\t{ln.cap!r}\t0\t{ln.t0!r}\t0.15\t4\t0\t0\t1\t;\n")
        return out.getvalue()

    def expansion_text(self):
        rows = ["# link_id umax bcoef"]
        rows += [f"{ln.id + 1} {ln.umax!r} {ln.bcoef!r}" for ln in self.links]
        return "\n".join(rows) + "\n"


class DemandTable:
    """Positive OD demands in fixed (origin, destination) order."""

    def __init__(self, entries):
        seen = set()
        rows = []
        for o, d, q in entries:
            if o == d:
                raise ValidationError(f"origin equals destination ({o})")
            if q < 0:
                raise ValidationError(f"negative demand {q} for {o}->{d}")
            if (o, d) in seen:
                raise ValidationError(f"duplicate OD pair {o}->{d}")
            seen.add((o, d))
            if q > 0:
                rows.append((int(o), int(d), float(q)))
        rows.sort()
        self.entries = rows
        self.orig = np.array([r[0] for r in rows], dtype=np.int64)
        self.dest = np.array([r[1] for r in rows], dtype=np.int64)
        self.d = np.array([r[2] for r in rows], dtype=float)

    def __len__(self):
        return len(self.entries)

    @property
    def total(self):
        return float(self.d.sum())

    def origins(self):
        return np.unique(self.orig)

    def scaled(self, factor):
        return DemandTable([(o, d, q * factor) for o, d, q in self.entries])


def _read(text):
    if hasattr(text, "read"):
        text = text.read()
    return text


def _split_header(lines):
    meta = {}
    for i, raw in enumerate(lines):
        line = raw.strip()
        m = re.match(r"<([^>]+)>\s*(.*)", line)
        if m:
            key = m.group(1).strip().upper()
            if key == "END OF METADATA":
                return meta, i + 1
            meta[key] = m.group(2).strip()
    return meta, 0


def parse_net(text, umax=None, bcoef=None, default_bcoef=DEFAULT_BCOEF):
    """Parse a TNTP ``_net.tntp`` file.

    ``umax``/``bcoef`` map 0-based link ids to overrides (see
    :func:`parse_expansion`); unspecified links get umax = 10 cap and
    ``default_bcoef``.
    """
    lines = _read(text).splitlines()
    meta, start = _split_header(lines)
    rows = []
    for lineno in range(start, len(lines)):
        line = lines[lineno].strip()
        if not line or line.startswith("~") or line.startswith("<"):
            continue
        parts = line.rstrip(";").split()
        if len(parts) < 5:
            raise ParseError(f"line {lineno + 1}: expected at least 5 columns, got {len(parts)}")
        try:
            tail, head = int(parts[0]), int(parts[1])
            cap, t0 = float(parts[2]), float(parts[4])
        except ValueError as exc:
            raise ParseError(f"line {lineno + 1}: {exc}") from None
        rows.append((lineno + 1, tail, head, cap, t0))
    if not rows:
        raise ValidationError("no links in net file")
    n_nodes = int(meta.get("NUMBER OF NODES", 0)) or max(max(r[1], r[2]) for r in rows)
    n_links = meta.get("NUMBER OF LINKS")
    if n_links is not None and int(n_links) != len(rows):
        raise ValidationError(f"metadata declares {n_links} links, found {len(rows)}")
    umax = umax or {}
    bcoef = bcoef or {}
    links = []
    for i, (lineno, tail, head, cap, t0) in enumerate(rows):
        if not (1 <= tail <= n_nodes and 1 <= head <= n_nodes):
            raise ValidationError(f"line {lineno}: node id outside 1..{n_nodes}")
        if cap <= 0 or t0 <= 0:
            raise ValidationError(f"line {lineno}: capacity and free-flow time must be positive")
        links.append(Link(i, tail - 1, head - 1, t0, cap,
                          float(umax.get(i, UMAX_FACTOR * cap)),
                          float(bcoef.get(i, default_bcoef))))
    return Network(links, n_nodes)


def parse_trips(text, net=None):
    """Parse a TNTP ``_trips.tntp`` file into 0-based OD entries."""
    lines = _read(text).splitlines()
    meta, start = _split_header(lines)
    entries = {}
    origin = None
    for lineno in range(start, len(lines)):
        line = lines[lineno].strip()
        if not line or line.startswith("~"):
            continue
        if line.lower().startswith("origin"):
            try:
                origin = int(line.split()[1])
            except (IndexError, ValueError):
                raise ParseError(f"line {lineno + 1}: bad origin header") from None
            continue
        if origin is None:
            raise ParseError(f"line {lineno + 1}: destination entry before any origin")
        for item in line.split(";"):
            item = item.strip()
            if not item:
                continue
            try:
                dest, flow = item.split(":")
                dest, flow = int(dest), float(flow)
            except ValueError:
                raise ParseError(f"line {lineno + 1}: bad entry {item!r}") from None
            if flow == 0:
                continue
            if dest == origin:
                raise ValidationError(f"line {lineno + 1}: origin equals destination ({origin})")
            if (origin, dest) in entries:
                raise ValidationError(f"line {lineno + 1}: duplicate OD pair {origin}->{dest}")
            entries[(origin, dest)] = flow
    if net is not None:
        pairs = [(net.node(o), net.node(d), q) for (o, d), q in entries.items()]
    else:
        pairs = [(o - 1, d - 1, q) for (o, d), q in entries.items()]
    return DemandTable(pairs)


def parse_expansion(text):
    """Sidecar rows ``link_id umax bcoef`` (1-based ids).

    Returns (umax, bcoef) dicts keyed by 0-based link id; a ``-`` in the umax
    column leaves the default.
    """
    umax, bcoef = {}, {}
    for lineno, raw in enumerate(_read(text).splitlines(), 1):
        line = raw.split("#")[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"line {lineno}: expected 'link_id umax bcoef'")
        try:
            a = int(parts[0]) - 1
            if parts[1] != "-":
                umax[a] = float(parts[1])
            bcoef[a] = float(parts[2])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    return umax, bcoef


def load_instance(net_text, trips_text, expansion_text=None, default_bcoef=DEFAULT_BCOEF):
    umax, bcoef = parse_expansion(expansion_text) if expansion_text else ({}, {})
    net = parse_net(net_text, umax, bcoef, default_bcoef)
    bad = [a for a in list(umax) + list(bcoef) if not 0 <= a < net.n_links]
    if bad:
        raise ValidationError(f"expansion file references unknown link {bad[0] + 1}")
    return net, parse_trips(trips_text, net)


BUILTINS = ("hearn", "sioux_falls")


def builtin_instance(name):
    """Return (Network, DemandTable) for a bundled benchmark."""
    if name not in BUILTINS:
        raise ValueError(f"unknown instance {name!r}; choose from {', '.join(BUILTINS)}")
    files = resources.files("ccbcep") / "data"
    read = lambda suffix: (files / f"{name}_{suffix}").read_text()
    return load_instance(read("net.tntp"), read("trips.tntp"), read("expansion.txt"))


def scale_offbenchmark(net, xi, keep=SIOUX_FALLS_BENCHMARK):
    """Multiply b_a by ``xi`` on every link outside ``keep`` (1-based ids)."""
    keep0 = {k - 1 for k in keep}
    b = np.array([ln.bcoef * (1.0 if ln.id in keep0 else xi) for ln in net.links])
    return net.with_expansion(bcoef=b)


def shortest_path(net, cost, origin, destinations=None):
    """Exact one-to-all shortest routes from ``origin`` (internal index).

    Returns {dest: (cost, route)} for ``destinations`` (default: every
    reachable node other than the origin). Raises InfeasibleError when a
    requested destination is unreachable.
    """
    dist, pred = net.shortest_trees(cost, [origin])
    dist, pred = dist[0], pred[0]
    if destinations is None:
        destinations = [j for j in range(net.n_nodes) if j != origin and np.isfinite(dist[j])]
    out = {}
    for j in destinations:
        if not np.isfinite(dist[j]):
            raise InfeasibleError(f"node {net.labels[j]} unreachable from {net.labels[origin]}")
        out[j] = (float(dist[j]), net.trace_route(pred, origin, j))
    return out

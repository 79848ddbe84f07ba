"""OD-pair graph: nodes are ordered building pairs, edges follow shared buildings.

Node ``(a, b)`` links to node ``(b, c)`` because the first pair ends where the
second begins.  The edge carries the straight-line distance from ``a`` to
``c``.  Distances are measured on a local planar projection of the building
coordinates.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_M = 6_371_008.8
INVERSE_EPS_M = 1.0
WEIGHT_MODES = ("raw", "inverse", "unit")


@dataclass(frozen=True)
class Building:
    building_id: str
    lat: float
    lon: float
    xy: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class OdNode:
    index: int
    origin: str
    destination: str


@dataclass
class OdGraph:
    buildings: list
    nodes: list
    edges: list  # (src, dst, weight_m) with the untransformed distance
    adjacency: np.ndarray
    norm_adjacency: np.ndarray
    edge_weight: str = "raw"
    self_loops: bool = True
    symmetrize: bool = True
    node_index: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return len(self.nodes)


def project_buildings(buildings):
    """Equirectangular projection about the centroid; returns new Building objects."""
    if not buildings:
        return []
    lat0 = math.radians(sum(b.lat for b in buildings) / len(buildings))
    lon0 = math.radians(sum(b.lon for b in buildings) / len(buildings))
    out = []
    for b in buildings:
        x = EARTH_RADIUS_M * (math.radians(b.lon) - lon0) * math.cos(lat0)
        y = EARTH_RADIUS_M * (math.radians(b.lat) - lat0)
        out.append(Building(b.building_id, b.lat, b.lon, (x, y)))
    return out


def haversine_m(lat1, lon1, lat2, lon2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


def distance_matrix(buildings):
    xy = np.array([b.xy for b in buildings], dtype=np.float64)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def enumerate_od_nodes(buildings):
    """All ordered pairs of distinct buildings, lexicographic by (origin, destination)."""
    ids = [b.building_id if isinstance(b, Building) else str(b) for b in buildings]
    if len(set(ids)) != len(ids):
        raise ValueError("building ids must be distinct")
    if len(ids) < 2:
        raise ValueError(f"need at least 2 buildings, got {len(ids)}")
    ids = sorted(ids)
    pairs = [(o, d) for o in ids for d in ids if o != d]
    return [OdNode(i, o, d) for i, (o, d) in enumerate(pairs)]


def build_edges(nodes, buildings):
    """Directed edges (u, v, dist_m) for every u = (a, b), v = (b, c)."""
    coords = {b.building_id: b.xy for b in buildings}
    by_origin = {}
    for v in nodes:
        by_origin.setdefault(v.origin, []).append(v)
    edges = []
    for u in nodes:
        ax, ay = coords[u.origin]
        for v in by_origin.get(u.destination, ()):
            cx, cy = coords[v.destination]
            edges.append((u.index, v.index, math.hypot(ax - cx, ay - cy)))
    return edges


def edge_weight_transform(weight, mode="raw"):
    """Map a distance in meters to an edge weight.

    ``raw`` keeps meters, ``inverse`` gives ``1 / (w + 1 m)``, ``unit`` gives 1
    for any positive distance.  Works on scalars and arrays.
    """
    w = np.asarray(weight, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("edge weight must be nonnegative")
    if mode == "raw":
        out = w.copy()
    elif mode == "inverse":
        out = 1.0 / (w + INVERSE_EPS_M)
    elif mode == "unit":
        out = (w > 0).astype(np.float64)
    else:
        raise ValueError(f"unknown edge weight mode {mode!r}; expected one of {WEIGHT_MODES}")
    return float(out) if out.ndim == 0 else out


def build_adjacency(n_nodes, edges, mode="raw", symmetrize=True):
    adj = np.zeros((n_nodes, n_nodes))
    for src, dst, dist in edges:
        # zero-distance edges are the reverse pairs (a, b) -> (b, a); drop them in every mode
        if dist > 0:
            adj[src, dst] = edge_weight_transform(dist, mode)
    if symmetrize:
        adj = np.maximum(adj, adj.T)
    return adj


def normalize_adjacency(adjacency, self_loops=True):
    """Symmetric degree normalization ``D^-1/2 (A [+ I]) D^-1/2``.

    Degrees are weighted row sums.  Without self loops, rows of degree zero stay
    all-zero.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0):
        raise ValueError("adjacency has negative entries")
    if self_loops:
        a = a + np.eye(a.shape[0])
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def build_od_graph(buildings, edge_weight="raw", self_loops=True, symmetrize=True):
    if edge_weight not in WEIGHT_MODES:
        raise ValueError(f"unknown edge weight mode {edge_weight!r}")
    projected = project_buildings(sorted(buildings, key=lambda b: b.building_id))
    nodes = enumerate_od_nodes(projected)
    edges = build_edges(nodes, projected)
    adj = build_adjacency(len(nodes), edges, edge_weight, symmetrize)
    return OdGraph(
        buildings=projected,
        nodes=nodes,
        edges=edges,
        adjacency=adj,
        norm_adjacency=normalize_adjacency(adj, self_loops),
        edge_weight=edge_weight,
        self_loops=self_loops,
        symmetrize=symmetrize,
        node_index={(n.origin, n.destination): n.index for n in nodes},
    )


def write_graph(graph, out_dir):
    """Node table, edge table and the dense normalized operator as CSV."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "origin", "destination"])
        for n in graph.nodes:
            w.writerow([n.index, n.origin, n.destination])
    with open(out / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "weight_m"])
        for s, d, wt in graph.edges:
            w.writerow([s, d, repr(float(wt))])
    np.savetxt(out / "norm_adjacency.csv", graph.norm_adjacency, delimiter=",", fmt="%.17g")

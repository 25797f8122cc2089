"""Functional linking of zone nodes across videos and kitchens.

Each node is summarised by the distribution of verbs and nouns of the clips
that happen during its visits. Nodes are compared with a KL-based score and
grouped by agglomerative clustering. Given graphs of one kitchen this yields
the combined map of that kitchen; given graphs of several kitchens it yields
the consolidated map.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels
from .core import ClipAnnotation
from .topo import TopoGraph, Visit, ZoneNode

logger = logging.getLogger(__name__)

LINK_SCHEMA_VERSION = 1

NodeKey = Tuple[str, int]  # (video_id, node_id)
DistributionSource = Union[Mapping[NodeKey, Tuple[np.ndarray, np.ndarray]],
                           Callable[[TopoGraph, ZoneNode], Tuple[np.ndarray, np.ndarray]]]


@dataclass
class LinkConfig:
    threshold_fraction: float = 0.4
    linkage: str = "average"
    epsilon: float = 1e-4
    directed: bool = False  # score with the one-sided form instead of averaging both orders

    def __post_init__(self):
        if not 0 < self.threshold_fraction <= 1:
            raise ValueError("threshold_fraction must be in (0, 1]")
        if self.linkage not in _kernels.LINKAGES:
            raise ValueError(f"linkage must be one of {sorted(_kernels.LINKAGES)}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class NodeDistributions:
    video_id: str
    node_id: int
    a: np.ndarray
    o: np.ndarray
    eps: float
    verb_counts: Optional[np.ndarray] = None
    noun_counts: Optional[np.ndarray] = None

    @property
    def key(self) -> NodeKey:
        return (self.video_id, self.node_id)


def smoothed_histogram(ids: Sequence[int], size: int, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """(probabilities, raw counts). No mass at all gives the uniform vector."""
    counts = np.bincount(np.asarray(ids, dtype=np.int64), minlength=size).astype(np.float64)[:size]
    p = counts + eps
    total = p.sum()
    if total <= 0:
        return np.full(size, 1.0 / size), counts
    return p / total, counts


def clips_in_visits(visits: Sequence[Visit], clips: Iterable[ClipAnnotation]) -> List[ClipAnnotation]:
    """Clips whose frame interval intersects any of `visits` (each clip once)."""
    return [c for c in clips if any(c.overlaps(v.start_frame, v.stop_frame) for v in visits)]


def node_distributions(node: ZoneNode, anns: Iterable[ClipAnnotation], num_verbs: int, num_nouns: int,
                       eps: float = 1e-4, video_id: str = "") -> NodeDistributions:
    clips = clips_in_visits(node.visits, anns)
    a, vc = smoothed_histogram([c.verb_id for c in clips], num_verbs, eps)
    o, nc = smoothed_histogram([c.noun_id for c in clips], num_nouns, eps)
    return NodeDistributions(video_id, node.node_id, a, o, eps, vc, nc)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    nz = p > 0
    with np.errstate(divide="ignore"):
        return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def functional_similarity(d_i: NodeDistributions, d_j: NodeDistributions, directed: bool = False) -> float:
    """-(KL(a_i||a_j) + KL(o_i||o_j)) / 2, averaged over both argument orders
    unless `directed`. Always <= 0, and 0 for identical distributions."""
    if d_i.a.shape != d_j.a.shape or d_i.o.shape != d_j.o.shape:
        raise ValueError("dimension mismatch between node distributions")
    fwd = kl_divergence(d_i.a, d_j.a) + kl_divergence(d_i.o, d_j.o)
    if directed:
        return -0.5 * fwd
    bwd = kl_divergence(d_j.a, d_i.a) + kl_divergence(d_j.o, d_i.o)
    return -0.25 * (fwd + bwd)


def _kl_matrix(P: np.ndarray) -> np.ndarray:
    """K[i, j] = KL(P[i] || P[j]), evaluated the same way as `kl_divergence`."""
    K = np.empty((len(P), len(P)))
    pos = P > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logP = np.log(P)
        for i in range(len(P)):
            d = logP[i] - logP  # (n, D)
            K[i] = np.where(pos[i], P[i] * d, 0.0).sum(axis=1)
    np.fill_diagonal(K, 0.0)
    return K


def similarity_matrix(dists: Sequence[NodeDistributions], directed: bool = False) -> np.ndarray:
    if not dists:
        return np.zeros((0, 0))
    A = np.stack([d.a for d in dists])
    O = np.stack([d.o for d in dists])
    fwd = _kl_matrix(A) + _kl_matrix(O)
    if directed:
        return -0.5 * fwd
    return -0.25 * (fwd + fwd.T)


# --------------------------------------------------------------------------- #
# Clustering


@dataclass
class Cluster:
    cluster_id: int
    members: List[NodeKey]
    visits: Dict[str, List[Visit]]
    a: np.ndarray
    o: np.ndarray


@dataclass
class ConsolidatedGraph:
    graphs: List[TopoGraph]
    clusters: List[Cluster]
    node_cluster: Dict[NodeKey, int]
    edges: Dict[Tuple[int, int], int] = field(default_factory=dict)
    threshold: float = 0.0
    merges: List[Tuple[int, int, float]] = field(default_factory=list)

    def cluster_of(self, video_id: str, node_id: int) -> int:
        return self.node_cluster[(video_id, node_id)]

    def undirected_edges(self) -> Dict[Tuple[int, int], int]:
        out: Dict[Tuple[int, int], int] = {}
        for (a, b), c in self.edges.items():
            key = (min(a, b), max(a, b))
            out[key] = out.get(key, 0) + c
        return out

    def check_invariants(self) -> None:
        keys = [(g.video_id, n.node_id) for g in self.graphs for n in g.nodes]
        seen = [m for c in self.clusters for m in c.members]
        if sorted(seen) != sorted(keys) or len(set(seen)) != len(seen):
            raise AssertionError("clusters do not partition the node set")
        if any(not c.members for c in self.clusters):
            raise AssertionError("empty cluster")

    def to_json(self) -> dict:
        return {
            "schema_version": LINK_SCHEMA_VERSION,
            "threshold": self.threshold,
            "clusters": [
                {
                    "id": c.cluster_id,
                    "members": [{"video_id": v, "node_id": n} for v, n in c.members],
                    "visits": {v: [[x.start_frame, x.stop_frame] for x in vs] for v, vs in sorted(c.visits.items())},
                    "a": c.a.tolist(),
                    "o": c.o.tolist(),
                }
                for c in self.clusters
            ],
            "edges": [{"src": a, "dst": b, "count": n} for (a, b), n in sorted(self.edges.items())],
        }

    def to_dot(self) -> str:
        lines = ["graph consolidated {"]
        for c in self.clusters:
            lines.append(f'  c{c.cluster_id} [label="cluster {c.cluster_id}\\n{len(c.members)} nodes"];')
        for (a, b), n in sorted(self.undirected_edges().items()):
            lines.append(f'  c{a} -- c{b} [penwidth={1 + np.log1p(n):.3f}, label="{n}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def save_consolidated(cg: ConsolidatedGraph, path: str) -> None:
    with open(path, "w") as f:
        json.dump(cg.to_json(), f)


def load_cluster_membership(path: str) -> Dict[NodeKey, int]:
    with open(path) as f:
        d = json.load(f)
    if d.get("schema_version") != LINK_SCHEMA_VERSION:
        raise ValueError(f"consolidated graph schema version {d.get('schema_version')} != {LINK_SCHEMA_VERSION}")
    return {(m["video_id"], int(m["node_id"])): int(c["id"]) for c in d["clusters"] for m in c["members"]}


def _external(source: DistributionSource, g: TopoGraph, n: ZoneNode, eps: float) -> NodeDistributions:
    a, o = source(g, n) if callable(source) else source[(g.video_id, n.node_id)]
    a = np.asarray(a, dtype=np.float64) + eps
    o = np.asarray(o, dtype=np.float64) + eps
    return NodeDistributions(g.video_id, n.node_id, a / a.sum(), o / o.sum(), eps)


def link_nodes(graphs: Sequence[TopoGraph], anns: Iterable[ClipAnnotation], num_verbs: int, num_nouns: int,
               cfg: Optional[LinkConfig] = None, distributions: Optional[DistributionSource] = None
               ) -> ConsolidatedGraph:
    """Cluster all nodes of `graphs` by functional similarity.

    `distributions` optionally supplies soft (a, o) per node, keyed by
    (video_id, node_id) or computed by a callable; otherwise they are
    histograms of the annotated clips.
    """
    cfg = cfg or LinkConfig()
    if not graphs:
        raise ValueError("need at least one graph")
    graphs = sorted(graphs, key=lambda g: g.video_id)
    if len({g.video_id for g in graphs}) != len(graphs):
        raise ValueError("duplicate video ids among graphs")
    by_video: Dict[str, List[ClipAnnotation]] = {}
    for c in anns:
        by_video.setdefault(c.video_id, []).append(c)

    dists: List[NodeDistributions] = []
    for g in graphs:
        for n in sorted(g.nodes, key=lambda n: n.node_id):
            if distributions is not None:
                d = _external(distributions, g, n, cfg.epsilon)
            else:
                d = node_distributions(n, by_video.get(g.video_id, []), num_verbs, num_nouns, cfg.epsilon,
                                       g.video_id)
            dists.append(d)

    S = similarity_matrix(dists, cfg.directed)
    if cfg.directed:
        S = 0.5 * (S + S.T)  # clustering needs a symmetric affinity
    n = len(dists)
    if n > 1:
        iu = np.triu_indices(n, 1)
        threshold = cfg.threshold_fraction * float(np.mean(S[iu]))
    else:
        threshold = 0.0
    labels, merges = _kernels.agglomerate(S, cfg.linkage, threshold)
    labels = np.asarray(labels)
    logger.info("linked %d nodes into %d clusters (threshold %.4f)", n, len(set(labels.tolist())), threshold)

    # renumber clusters 0.. in order of their first member
    order: Dict[int, int] = {}
    for lab in labels.tolist():
        order.setdefault(lab, len(order))
    node_cluster = {d.key: order[int(l)] for d, l in zip(dists, labels)}

    node_lookup = {(g.video_id, nd.node_id): nd for g in graphs for nd in g.nodes}
    clusters: List[Cluster] = []
    for cid in range(len(order)):
        members = [d for d in dists if node_cluster[d.key] == cid]
        visits: Dict[str, List[Visit]] = {}
        for d in members:
            visits.setdefault(d.video_id, []).extend(node_lookup[d.key].visits)
        for v in visits.values():
            v.sort(key=lambda x: x.start_frame)
        a, o = _pool(members, cfg.epsilon)
        clusters.append(Cluster(cid, [d.key for d in members], visits, a, o))

    edges: Dict[Tuple[int, int], int] = {}
    for g in graphs:
        for (x, y), c in g.edges.items():
            cx, cy = node_cluster[(g.video_id, x)], node_cluster[(g.video_id, y)]
            if cx != cy:
                edges[(cx, cy)] = edges.get((cx, cy), 0) + c
    return ConsolidatedGraph(list(graphs), clusters, node_cluster, edges, threshold,
                             [(int(i), int(j), float(s)) for i, j, s in merges])


def _pool(members: Sequence[NodeDistributions], eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Cluster distribution: pooled clip counts when available, else the member mean."""
    if all(m.verb_counts is not None for m in members):
        vc = np.sum([m.verb_counts for m in members], axis=0)
        nc = np.sum([m.noun_counts for m in members], axis=0)
        a, o = vc + eps, nc + eps
        a = a / a.sum() if a.sum() > 0 else np.full(len(a), 1.0 / len(a))
        o = o / o.sum() if o.sum() > 0 else np.full(len(o), 1.0 / len(o))
        return a, o
    return np.mean([m.a for m in members], axis=0), np.mean([m.o for m in members], axis=0)


def cluster_purity(cg: ConsolidatedGraph, node_type: Mapping[NodeKey, int]) -> float:
    """Fraction of nodes whose cluster's majority type equals their own type."""
    hits = 0
    total = 0
    for c in cg.clusters:
        types = [node_type[m] for m in c.members]
        hits += np.bincount(types).max()
        total += len(types)
    return hits / max(total, 1)

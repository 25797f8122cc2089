"""Online construction of a per-video topological zone graph.

Frames are streamed in order. Each frame is scored against every existing
zone node; it joins the best node when the score clears ``sigma``, opens a
new node when the score falls below ``sigma - margin``, and is ignored in
between. Traversals between consecutively assigned nodes become edges.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import EmbeddingMatrix

logger = logging.getLogger(__name__)

GRAPH_SCHEMA_VERSION = 1


@dataclass
class BuilderConfig:
    sigma: float = 0.7
    margin: float = 0.3
    score_window: int = 9
    frames_per_visit: int = 20
    visit_repr: str = "samples"  # "samples" | "center"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.sigma <= 1:
            raise ValueError("sigma must be in (0, 1]")
        if not 0 < self.margin < self.sigma:
            raise ValueError("margin must be in (0, sigma)")
        if self.score_window < 1 or self.frames_per_visit < 1:
            raise ValueError("score_window and frames_per_visit must be >= 1")
        if self.visit_repr not in ("samples", "center"):
            raise ValueError("visit_repr must be 'samples' or 'center'")


@dataclass
class Visit:
    start_frame: int
    stop_frame: int

    def __len__(self):
        return self.stop_frame - self.start_frame + 1

    @property
    def center(self) -> int:
        return (self.start_frame + self.stop_frame) // 2


@dataclass
class ZoneNode:
    node_id: int
    visits: List[Visit] = field(default_factory=list)
    sample_frames: List[List[int]] = field(default_factory=list)

    def frames(self) -> np.ndarray:
        return np.concatenate([np.arange(v.start_frame, v.stop_frame + 1) for v in self.visits])

    def num_frames(self) -> int:
        return sum(len(v) for v in self.visits)


@dataclass
class TopoGraph:
    video_id: str
    nodes: List[ZoneNode] = field(default_factory=list)
    edges: Dict[Tuple[int, int], int] = field(default_factory=dict)
    ignored_frames: List[int] = field(default_factory=list)
    num_frames: int = 0

    def frame_labels(self) -> np.ndarray:
        """Node id per frame, -1 for ignored (or unprocessed) frames."""
        labels = np.full(self.num_frames, -1, dtype=np.int64)
        for n in self.nodes:
            for v in n.visits:
                labels[v.start_frame : v.stop_frame + 1] = n.node_id
        return labels

    def undirected_edges(self) -> Dict[Tuple[int, int], int]:
        out: Dict[Tuple[int, int], int] = {}
        for (a, b), c in self.edges.items():
            key = (min(a, b), max(a, b))
            out[key] = out.get(key, 0) + c
        return out

    def neighbors(self) -> Dict[int, List[int]]:
        nb: Dict[int, set] = {n.node_id: set() for n in self.nodes}
        for a, b in self.edges:
            nb[a].add(b)
            nb[b].add(a)
        return {k: sorted(v) for k, v in nb.items()}

    def structure(self):
        """Hashable summary (visits per node, edges, ignored) used for equality checks."""
        return (
            tuple(tuple((v.start_frame, v.stop_frame) for v in n.visits) for n in self.nodes),
            tuple(sorted(self.edges.items())),
            tuple(self.ignored_frames),
        )

    def check_invariants(self) -> None:
        seen = np.zeros(self.num_frames, dtype=np.int64)
        for n in self.nodes:
            if not n.visits:
                raise AssertionError(f"node {n.node_id} has no visits")
            prev = -1
            for v in n.visits:
                if v.start_frame > v.stop_frame or v.start_frame <= prev:
                    raise AssertionError(f"node {n.node_id}: visits not disjoint and time-ordered")
                prev = v.stop_frame
                seen[v.start_frame : v.stop_frame + 1] += 1
            for v, samp in zip(n.visits, n.sample_frames):
                if any(not (v.start_frame <= s <= v.stop_frame) for s in samp):
                    raise AssertionError(f"node {n.node_id}: sample frame outside its visit")
        seen[list(self.ignored_frames)] += 1
        if (seen != 1).any():
            raise AssertionError("frames do not partition into visits and ignored frames")
        ids = {n.node_id for n in self.nodes}
        for a, b in self.edges:
            if a == b or a not in ids or b not in ids:
                raise AssertionError(f"invalid edge {(a, b)}")

    # -- export ------------------------------------------------------------- #

    def to_json(self) -> dict:
        return {
            "schema_version": GRAPH_SCHEMA_VERSION,
            "video_id": self.video_id,
            "num_frames": self.num_frames,
            "nodes": [
                {"id": n.node_id, "visits": [[v.start_frame, v.stop_frame] for v in n.visits],
                 "samples": n.sample_frames}
                for n in self.nodes
            ],
            "edges": [{"src": a, "dst": b, "count": c} for (a, b), c in sorted(self.edges.items())],
            "undirected_edges": [{"a": a, "b": b, "count": c} for (a, b), c in sorted(self.undirected_edges().items())],
            "ignored": list(self.ignored_frames),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TopoGraph":
        version = d.get("schema_version", GRAPH_SCHEMA_VERSION)
        if version != GRAPH_SCHEMA_VERSION:
            raise ValueError(f"graph schema version {version} != {GRAPH_SCHEMA_VERSION}")
        nodes = []
        for n in d["nodes"]:
            visits = [Visit(int(a), int(b)) for a, b in n["visits"]]
            samples = n.get("samples") or [[v.center] for v in visits]
            nodes.append(ZoneNode(int(n["id"]), visits, [list(map(int, s)) for s in samples]))
        edges = {(int(e["src"]), int(e["dst"])): int(e["count"]) for e in d["edges"]}
        num_frames = d.get("num_frames")
        if num_frames is None:
            last = [v.stop_frame for n in nodes for v in n.visits] + list(d.get("ignored", []))
            num_frames = max(last) + 1 if last else 0
        return cls(d["video_id"], nodes, edges, [int(x) for x in d.get("ignored", [])], int(num_frames))

    def to_dot(self, directed: bool = False) -> str:
        kind, arrow = ("digraph", "->") if directed else ("graph", "--")
        name = "".join(ch if ch.isalnum() else "_" for ch in self.video_id) or "g"
        lines = [f"{kind} {name} {{"]
        for n in self.nodes:
            label = f"zone {n.node_id}\\n{len(n.visits)} visits"
            lines.append(f'  n{n.node_id} [label="{label}"];')
        edges = self.edges if directed else self.undirected_edges()
        for (a, b), c in sorted(edges.items()):
            lines.append(f'  n{a} {arrow} n{b} [penwidth={1 + np.log1p(c):.3f}, label="{c}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def save_graph(g: TopoGraph, path: str) -> None:
    with open(path, "w") as f:
        json.dump(g.to_json(), f)


def load_graph(path: str) -> TopoGraph:
    with open(path) as f:
        return TopoGraph.from_json(json.load(f))


# --------------------------------------------------------------------------- #
# The online loop


NodeScoreFn = Callable[[int, "GraphState"], np.ndarray]


class GraphState:
    """Mutable graph under construction, plus per-visit reservoir samples."""

    def __init__(self, video_id: str, num_frames: int, cfg: BuilderConfig):
        self.cfg = cfg
        self.graph = TopoGraph(video_id, num_frames=num_frames)
        self.rng = np.random.default_rng(cfg.seed)
        self._seen: List[List[int]] = []  # per node, per visit: frames offered to the reservoir
        self.last_node: Optional[int] = None
        self.version = 0

    @property
    def nodes(self) -> List[ZoneNode]:
        return self.graph.nodes

    def _offer(self, node: ZoneNode, visit_idx: int, frame: int) -> None:
        samples = node.sample_frames[visit_idx]
        seen = self._seen[node.node_id]
        seen[visit_idx] += 1
        k = self.cfg.frames_per_visit
        if len(samples) < k:
            samples.append(frame)
            self.version += 1
        else:
            j = int(self.rng.integers(0, seen[visit_idx]))
            if j < k:
                samples[j] = frame
                self.version += 1

    def new_node(self, frame: int) -> int:
        nid = len(self.graph.nodes)
        self.graph.nodes.append(ZoneNode(nid, [Visit(frame, frame)], [[]]))
        self._seen.append([0])
        self._offer(self.graph.nodes[nid], 0, frame)
        return nid

    def merge(self, nid: int, frame: int) -> None:
        node = self.graph.nodes[nid]
        last = node.visits[-1]
        if last.stop_frame == frame - 1:
            last.stop_frame = frame
            self._offer(node, len(node.visits) - 1, frame)
        else:
            node.visits.append(Visit(frame, frame))
            node.sample_frames.append([])
            self._seen[nid].append(0)
            self._offer(node, len(node.visits) - 1, frame)

    def add_edge(self, current: int) -> None:
        if self.last_node is not None and self.last_node != current:
            key = (self.last_node, current)
            self.graph.edges[key] = self.graph.edges.get(key, 0) + 1
        self.last_node = current

    def representatives(self, node: ZoneNode) -> List[List[int]]:
        if self.cfg.visit_repr == "center":
            return [[v.center] for v in node.visits]
        return [sorted(s) for s in node.sample_frames]


def run_topomap(video_id: str, num_frames: int, node_scores: NodeScoreFn,
                cfg: Optional[BuilderConfig] = None, trace: Optional[list] = None) -> TopoGraph:
    """Drive the merge / create / ignore loop with an arbitrary node scorer.

    `node_scores(t, state)` returns one similarity per existing node (in node
    id order) for frame `t`. When `trace` is a list, one (t, s_star, action,
    node) tuple per frame >= 1 is appended to it.
    """
    cfg = cfg or BuilderConfig()
    if num_frames < 1:
        raise ValueError("empty video")
    state = GraphState(video_id, num_frames, cfg)
    state.last_node = state.new_node(0)
    for t in range(1, num_frames):
        scores = np.asarray(node_scores(t, state), dtype=np.float64)
        best = int(np.argmax(scores))  # first maximum -> lowest node id on ties
        s_star = scores[best]
        if s_star > cfg.sigma:
            state.merge(best, t)
            state.add_edge(best)
            action, node = "merge", best
        elif s_star < cfg.sigma - cfg.margin:
            node = state.new_node(t)
            state.add_edge(node)
            action = "create"
        else:
            state.graph.ignored_frames.append(t)
            action, node = "ignore", -1
        if trace is not None:
            trace.append((t, float(s_star), action, node))
    g = state.graph
    g.nodes[:] = [ZoneNode(n.node_id, n.visits, [sorted(s) for s in n.sample_frames]) for n in g.nodes]
    return g


def check_hysteresis(g: TopoGraph, trace: Sequence[tuple], cfg: Optional[BuilderConfig] = None) -> None:
    """Assert that frames scored inside [sigma - m, sigma] were ignored and
    that every ignored frame was scored inside that band."""
    cfg = cfg or BuilderConfig()
    ignored = set(g.ignored_frames)
    labels = g.frame_labels()
    for t, s_star, action, node in trace:
        in_band = cfg.sigma - cfg.margin <= s_star <= cfg.sigma
        if in_band != (t in ignored) or in_band != (action == "ignore"):
            raise AssertionError(f"frame {t}: s*={s_star:.6f} but action {action}")
        if in_band and labels[t] != -1:
            raise AssertionError(f"frame {t}: ignored frame assigned to node {labels[t]}")
        if not in_band and labels[t] != node:
            raise AssertionError(f"frame {t}: assigned to {labels[t]}, expected {node}")
    g.check_invariants()


# --------------------------------------------------------------------------- #
# Model-based frame-to-node similarity


def query_window(t: int, num_frames: int, window: int) -> np.ndarray:
    left = (window - 1) // 2
    right = window - 1 - left
    return np.arange(max(0, t - left), min(num_frames - 1, t + right) + 1)


def frame_node_similarity(t: int, node: ZoneNode, emb: np.ndarray, scorer, cfg: Optional[BuilderConfig] = None,
                          representatives: Optional[List[List[int]]] = None) -> float:
    """Mean over the node's visits of the mean pair score between the frame
    window around `t` and the visit's representative frames."""
    cfg = cfg or BuilderConfig()
    W = query_window(t, len(emb), cfg.score_window)
    reps = representatives
    if reps is None:
        reps = [[v.center] for v in node.visits] if cfg.visit_repr == "center" else node.sample_frames
    per_visit = []
    for frames in reps:
        S = scorer.score_matrix(emb[W], emb[list(frames)])
        per_visit.append(S.mean())
    return float(np.mean(per_visit))


class _WindowScoreCache:
    """Pair scores for the rows of the sliding query window, computed lazily."""

    def __init__(self, emb: np.ndarray, scorer):
        self.emb = emb
        self.scorer = scorer
        self.rows: Dict[int, np.ndarray] = {}
        self.evaluated = 0

    def block(self, W: np.ndarray, cols: np.ndarray) -> np.ndarray:
        T = len(self.emb)
        for u in list(self.rows):
            if u < W[0]:
                del self.rows[u]
        for u in W:
            if u not in self.rows:
                self.rows[u] = np.full(T, np.nan, dtype=np.float64)
        block = np.stack([self.rows[u][cols] for u in W])
        miss_r, miss_c = np.nonzero(np.isnan(block))
        if len(miss_r):
            us = W[miss_r]
            cs = cols[miss_c]
            vals = score_aligned(self.scorer, self.emb[us], self.emb[cs])
            self.evaluated += len(vals)
            for u in np.unique(us):
                sel = us == u
                self.rows[u][cs[sel]] = vals[sel]
            block[miss_r, miss_c] = vals
        return block


def score_aligned(scorer, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-aligned pair scores; falls back to the diagonal of score_matrix."""
    fn = getattr(scorer, "score_pairs", None)
    if fn is not None:
        return fn(A, B)
    return np.array([scorer.score_matrix(a[None], b[None])[0, 0] for a, b in zip(A, B)])


def build_graph(video: EmbeddingMatrix, scorer, cfg: Optional[BuilderConfig] = None,
                stop_frame: Optional[int] = None, trace: Optional[list] = None) -> TopoGraph:
    """Build the zone graph over frames [0, stop_frame] of a video."""
    cfg = cfg or BuilderConfig()
    emb = video.rows if stop_frame is None else video.rows[: stop_frame + 1]
    T = len(emb)
    if T < 1:
        raise ValueError("empty video")
    cache = _WindowScoreCache(emb, scorer)

    def node_scores(t, state: GraphState):
        W = query_window(t, T, cfg.score_window)
        reps = [state.representatives(n) for n in state.nodes]
        flat = np.fromiter((f for node_reps in reps for vr in node_reps for f in vr), dtype=np.int64)
        block = cache.block(W, flat)
        colmean = block.mean(axis=0)
        out = np.empty(len(reps))
        pos = 0
        for i, node_reps in enumerate(reps):
            visit_means = []
            for vr in node_reps:
                visit_means.append(colmean[pos : pos + len(vr)].mean())
                pos += len(vr)
            out[i] = np.mean(visit_means)
        return out

    g = run_topomap(video.video_id, T, node_scores, cfg, trace)
    logger.info("%s: %d nodes, %d edges, %d ignored, %d pair scores", video.video_id, len(g.nodes),
                len(g.edges), len(g.ignored_frames), cache.evaluated)
    return g

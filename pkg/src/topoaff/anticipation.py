"""Long-horizon anticipation from the zone graph of an observed prefix.

The first k = floor(K * M) clips of a video are observed. A zone graph is
built over the frames up to the end of clip k; every node gets a feature
from the clips that happened there, one graph-convolution layer mixes each
node with its neighbours, and the mean over nodes is classified into the set
of actions of the remaining clips.

Baselines: the training-set action frequency, a linear head over pooled clip
features, and the same model without the graph convolution.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .affordance import EvalSplit, eval_map
from .core import ClipAnnotation, Dataset, EmbeddingMatrix
from .topo import BuilderConfig, TopoGraph, build_graph

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "anticipation"
HORIZONS = (0.25, 0.5, 0.75)


@dataclass
class AnticipationSample:
    video_id: str
    k: int
    K_frac: float
    graph: TopoGraph
    clip_features: np.ndarray  # (k, dim) observed clips
    node_inputs: np.ndarray  # (n_nodes, dim) pooled clip features per node
    edges: np.ndarray  # (n_edges, 2) undirected, each pair once
    target: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.node_inputs)


def observed_count(num_clips: int, K_frac: float) -> int:
    """floor(K * M), kept inside [1, M - 1] so both parts are non-empty."""
    if num_clips < 2:
        raise ValueError("need at least 2 clips")
    return min(max(int(np.floor(K_frac * num_clips)), 1), num_clips - 1)


def future_target(clips: Sequence[ClipAnnotation], k: int, num_classes: int, mode: str = "verb",
                  vocab=None) -> np.ndarray:
    y = np.zeros(num_classes)
    for c in clips[k:]:
        y[c.verb_id if mode == "verb" else vocab.interaction_id(c.verb_id, c.noun_id)] = 1.0
    return y


def clip_features(rows: np.ndarray, clips: Sequence[ClipAnnotation]) -> np.ndarray:
    """Mean frame embedding of each clip."""
    if not clips:
        return np.zeros((0, rows.shape[1]), dtype=np.float64)
    return np.stack([rows[c.start_frame : c.stop_frame + 1].astype(np.float64).mean(axis=0) for c in clips])


def assign_clips(graph: TopoGraph, clips: Sequence[ClipAnnotation]) -> np.ndarray:
    """Node per clip (-1 if none): the node holding most of the clip's frames,
    provided it holds at least half; ties go to the lower node id."""
    labels = graph.frame_labels()
    n = len(graph.nodes)
    out = np.full(len(clips), -1, dtype=np.int64)
    for i, c in enumerate(clips):
        lab = labels[c.start_frame : min(c.stop_frame, len(labels) - 1) + 1]
        lab = lab[lab >= 0]
        if len(lab) == 0 or n == 0:
            continue
        counts = np.bincount(lab, minlength=n)
        best = int(np.argmax(counts))
        if 2 * counts[best] >= c.stop_frame - c.start_frame + 1:
            out[i] = best
    return out


def node_inputs(graph: TopoGraph, rows: np.ndarray, clips: Sequence[ClipAnnotation],
                feats: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean feature of the clips assigned to each node; nodes without clips
    use the mean frame embedding of their visits."""
    feats = clip_features(rows, clips) if feats is None else feats
    owner = assign_clips(graph, clips)
    out = np.empty((len(graph.nodes), rows.shape[1]))
    for n in graph.nodes:
        mine = owner == n.node_id
        if mine.any():
            out[n.node_id] = feats[mine].mean(axis=0)
        else:
            out[n.node_id] = rows[n.frames()].astype(np.float64).mean(axis=0)
    return out


def graph_edges(graph: TopoGraph) -> np.ndarray:
    e = sorted(graph.undirected_edges())
    return np.array(e, dtype=np.int64).reshape(-1, 2)


def build_observed_sample(video: EmbeddingMatrix, clips: Sequence[ClipAnnotation], K_frac: float, scorer,
                          builder: Optional[BuilderConfig] = None, num_classes: Optional[int] = None,
                          mode: str = "verb", vocab=None) -> AnticipationSample:
    clips = sorted(clips, key=lambda c: (c.start_frame, c.stop_frame))
    k = observed_count(len(clips), K_frac)
    if num_classes is None:
        num_classes = max(c.verb_id for c in clips) + 1
    observed = clips[:k]
    stop = observed[-1].stop_frame
    graph = build_graph(video, scorer, builder, stop_frame=stop)
    rows = video.rows[: stop + 1]
    feats = clip_features(rows, observed)
    return AnticipationSample(video.video_id, k, K_frac, graph, feats,
                              node_inputs(graph, rows, observed, feats), graph_edges(graph),
                              future_target(clips, k, num_classes, mode, vocab))


def build_samples(ds: Dataset, videos: Sequence[str], scorer, horizons: Sequence[float] = HORIZONS,
                  builder: Optional[BuilderConfig] = None, mode: str = "verb") -> List[AnticipationSample]:
    D = ds.vocab.num_verbs if mode == "verb" else ds.vocab.num_interactions
    out = []
    for vid in sorted(videos):
        clips = ds.clips(vid)
        if len(clips) < 2:
            logger.warning("%s: fewer than 2 clips, skipped", vid)
            continue
        for K in horizons:
            out.append(build_observed_sample(ds.videos[vid], clips, K, scorer, builder, D, mode, ds.vocab))
    return out


# --------------------------------------------------------------------------- #
# Batched graphs


@dataclass
class GraphBatch:
    F: np.ndarray  # (N, dim) stacked node inputs
    seg: np.ndarray  # (N,) sample index of each node
    src: np.ndarray  # aggregation pairs: out[dst] += in[src]; includes self pairs
    dst: np.ndarray
    counts: np.ndarray  # nodes per sample
    Y: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[AnticipationSample], dtype=np.float64) -> "GraphBatch":
        F, seg, src, dst = [], [], [], []
        off = 0
        for i, s in enumerate(samples):
            if s.num_nodes == 0:
                raise ValueError(f"{s.video_id}: empty graph")
            n = s.num_nodes
            F.append(s.node_inputs)
            seg.append(np.full(n, i))
            idx = np.arange(n) + off
            e = s.edges + off
            src.extend([idx, e[:, 0], e[:, 1]])
            dst.extend([idx, e[:, 1], e[:, 0]])
            off += n
        seg = np.concatenate(seg)
        return cls(np.concatenate(F).astype(dtype), seg, np.concatenate(src), np.concatenate(dst),
                   np.bincount(seg, minlength=len(samples)).astype(dtype),
                   np.stack([s.target for s in samples]).astype(dtype))

    def aggregate(self, Z: np.ndarray) -> np.ndarray:
        """out[n] = sum of Z over n and its neighbours (symmetric operator)."""
        out = np.zeros_like(Z)
        np.add.at(out, self.dst, Z[self.src])
        return out

    def pool(self, G: np.ndarray) -> np.ndarray:
        out = np.zeros((len(self.counts), G.shape[1]), dtype=G.dtype)
        np.add.at(out, self.seg, G)
        return out / self.counts[:, None]


# --------------------------------------------------------------------------- #
# Model


def gcn_forward(batch: GraphBatch, X: np.ndarray, W: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """g_n = ReLU(sum over n and its neighbours of W^T x + b). Returns (g, pre-activation)."""
    if X.shape[1] != W.shape[0]:
        raise ValueError(f"width mismatch: features {X.shape[1]} vs W {W.shape[0]}")
    P = batch.aggregate(X @ W) + b
    return nn.relu(P), P


@dataclass
class AntTrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    decay_epoch: int = 80
    decay_factor: float = 0.1
    weight_decay: float = 1e-5
    batch_size: int = 256
    hidden: int = 256
    gcn_layers: int = 1
    use_gcn: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.epochs > 0 and self.batch_size > 0 and self.hidden > 0):
            raise ValueError("training configuration values must be positive")
        if self.gcn_layers < 0:
            raise ValueError("gcn_layers must be >= 0")


class AnticipationModel:
    """Node MLP, optional graph convolution, mean pooling and a linear head."""

    def __init__(self, params: nn.Params, meta: Optional[dict] = None):
        self.params = params
        self.meta = meta or {}
        self.history: Dict[str, List[float]] = {}

    @classmethod
    def init(cls, dim: int, num_classes: int, hidden: int = 256, gcn_layers: int = 1, seed: int = 0,
             dtype=np.float64):
        rng = np.random.default_rng(seed)
        params = nn.init_mlp([dim, hidden, hidden], rng, prefix="node_", dtype=dtype)
        for l in range(gcn_layers):
            params[f"gcn_W{l}"] = (rng.standard_normal((hidden, hidden)) * np.sqrt(1.0 / hidden)).astype(dtype)
            params[f"gcn_b{l}"] = np.zeros(hidden, dtype=dtype)
        params.update(nn.init_mlp([hidden, num_classes], rng, prefix="cls_", dtype=dtype))
        params["feat_mean"] = np.zeros(dim, dtype=dtype)
        params["feat_std"] = np.ones(dim, dtype=dtype)
        return cls(params, {"dim": dim, "num_classes": num_classes, "hidden": hidden,
                            "gcn_layers": gcn_layers, "seed": seed})

    @property
    def gcn_layers(self) -> int:
        return sum(1 for k in self.params if k.startswith("gcn_W"))

    def forward(self, batch: GraphBatch, params: Optional[nn.Params] = None):
        p = self.params if params is None else params
        X, node_cache = nn.mlp_forward(p, (batch.F - p["feat_mean"]) / p["feat_std"], prefix="node_",
                                       final_relu=True)
        layers = []
        H = X
        for l in range(self.gcn_layers):
            G, P = gcn_forward(batch, H, p[f"gcn_W{l}"], p[f"gcn_b{l}"])
            layers.append((H, P))
            H = G
        xG = batch.pool(H)
        z, cls_cache = nn.mlp_forward(p, xG, prefix="cls_")
        return z, (node_cache, layers, H, cls_cache)

    def loss_and_grad(self, batch: GraphBatch, params: Optional[nn.Params] = None):
        p = self.params if params is None else params
        z, (node_cache, layers, H, cls_cache) = self.forward(batch, p)
        loss, gz = nn.bce_with_logits(z, batch.Y)
        grads, g_xG = nn.mlp_backward(p, cls_cache, gz, prefix="cls_")
        gH = g_xG[batch.seg] / batch.counts[batch.seg, None]
        for l in reversed(range(len(layers))):
            Hin, P = layers[l]
            gP = gH * (P > 0)
            grads[f"gcn_b{l}"] = gP.sum(axis=0)
            gZ = batch.aggregate(gP)  # the aggregation operator is symmetric
            grads[f"gcn_W{l}"] = Hin.T @ gZ
            gH = gZ @ p[f"gcn_W{l}"].T
        grads, _ = nn.mlp_backward(p, node_cache, gH, prefix="node_", final_relu=True, grads=grads)
        return loss, grads

    def predict(self, samples: Sequence[AnticipationSample]) -> np.ndarray:
        dtype = self.params["node_W0"].dtype
        z, _ = self.forward(GraphBatch.from_samples(samples, dtype))
        return nn.sigmoid(z).astype(np.float64)

    def save(self, path: str) -> None:
        nn.save_checkpoint(path, CHECKPOINT_KIND, self.params, {**self.meta, "history": self.history})

    @classmethod
    def load(cls, path: str) -> "AnticipationModel":
        params, meta = nn.load_checkpoint(path, CHECKPOINT_KIND)
        m = cls(params, meta)
        m.history = meta.get("history", {})
        return m


def predict_future(sample: AnticipationSample, model: AnticipationModel) -> np.ndarray:
    if sample.num_nodes == 0:
        raise ValueError("empty graph")
    return model.predict([sample])[0]


def _fit(model, batches_of, n: int, cfg, trainable_filter=lambda k: not k.startswith("feat_")):
    trainable = {k: v for k, v in model.params.items() if trainable_filter(k)}
    opt = nn.Adam(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for epoch in range(cfg.epochs):
        opt.lr = nn.step_lr(cfg.lr, epoch, cfg.decay_epoch, cfg.decay_factor)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            b = order[s : s + cfg.batch_size]
            loss, grads = model.loss_and_grad(batches_of(b))
            opt.step(trainable, grads)
            total += loss * len(b)
        losses.append(total / n)
        logger.debug("anticipation epoch %d loss %.4f", epoch, losses[-1])
    model.history = {"train_loss": losses}
    return model


def train_anticipation(samples: Sequence[AnticipationSample], cfg: Optional[AntTrainConfig] = None,
                       dtype=np.float64) -> AnticipationModel:
    """`cfg.use_gcn = False` trains the variant without graph convolution."""
    cfg = cfg or AntTrainConfig()
    if not samples:
        raise ValueError("no training samples")
    dim = samples[0].node_inputs.shape[1]
    D = len(samples[0].target)
    model = AnticipationModel.init(dim, D, cfg.hidden, cfg.gcn_layers if cfg.use_gcn else 0, cfg.seed, dtype)
    model.meta["train_config"] = asdict(cfg)
    F = np.concatenate([s.node_inputs for s in samples])
    std = F.std(axis=0)
    model.params["feat_mean"] = F.mean(axis=0).astype(dtype)
    model.params["feat_std"] = np.where(std > 1e-6, std, 1.0).astype(dtype)
    full: List[GraphBatch] = []

    def batches_of(idx):
        if len(idx) < len(samples):
            return GraphBatch.from_samples([samples[i] for i in idx], dtype)
        # one batch holds everything: the loss is a mean, so sample order is irrelevant
        if not full:
            full.append(GraphBatch.from_samples(samples, dtype))
        return full[0]

    return _fit(model, batches_of, len(samples), cfg)


# --------------------------------------------------------------------------- #
# Baselines


def train_dist(ds: Dataset, videos: Sequence[str], num_classes: Optional[int] = None, mode: str = "verb"
               ) -> np.ndarray:
    """Fraction of training videos in which each action occurs."""
    D = num_classes or (ds.vocab.num_verbs if mode == "verb" else ds.vocab.num_interactions)
    out = np.zeros(D)
    for vid in videos:
        seen = np.zeros(D, dtype=bool)
        for c in ds.clips(vid):
            seen[c.verb_id if mode == "verb" else ds.vocab.interaction_id(c.verb_id, c.noun_id)] = True
        out += seen
    return out / max(len(videos), 1)


def pooled_clip_feature(sample: AnticipationSample, max_clips: int = 64) -> np.ndarray:
    """Average of up to `max_clips` evenly spaced observed clip features."""
    f = sample.clip_features
    if len(f) > max_clips:
        f = f[np.linspace(0, len(f) - 1, max_clips).round().astype(int)]
    return f.mean(axis=0)


class MeanPoolModel:
    """Linear head over pooled clip features."""

    def __init__(self, params: nn.Params, max_clips: int = 64):
        self.params = params
        self.max_clips = max_clips

    @classmethod
    def init(cls, dim: int, num_classes: int, seed: int = 0, dtype=np.float64, max_clips: int = 64):
        rng = np.random.default_rng(seed)
        params = nn.init_mlp([dim, num_classes], rng, dtype=dtype)
        params["feat_mean"] = np.zeros(dim, dtype=dtype)
        params["feat_std"] = np.ones(dim, dtype=dtype)
        return cls(params, max_clips)

    def features(self, samples: Sequence[AnticipationSample]) -> np.ndarray:
        return np.stack([pooled_clip_feature(s, self.max_clips) for s in samples])

    def logits(self, X, params=None):
        p = self.params if params is None else params
        return nn.mlp_forward(p, (X - p["feat_mean"]) / p["feat_std"])

    def loss_and_grad(self, batch):
        X, Y = batch
        z, cache = self.logits(X)
        loss, gz = nn.bce_with_logits(z, Y)
        grads, _ = nn.mlp_backward(self.params, cache, gz)
        return loss, grads

    def predict(self, samples: Sequence[AnticipationSample]) -> np.ndarray:
        return nn.sigmoid(self.logits(self.features(samples))[0])


def train_mean_pool(samples: Sequence[AnticipationSample], cfg: Optional[AntTrainConfig] = None) -> MeanPoolModel:
    cfg = cfg or AntTrainConfig()
    X0 = np.stack([pooled_clip_feature(s) for s in samples])
    Y = np.stack([s.target for s in samples])
    model = MeanPoolModel.init(X0.shape[1], Y.shape[1], cfg.seed)
    std = X0.std(axis=0)
    model.params["feat_mean"] = X0.mean(axis=0)
    model.params["feat_std"] = np.where(std > 1e-6, std, 1.0)
    model.history = {}
    return _fit(model, lambda b: (X0[b], Y[b]), len(samples), cfg)


# --------------------------------------------------------------------------- #
# Evaluation


def evaluate_methods(predict: Dict[str, callable], samples: Sequence[AnticipationSample],
                     split: Optional[EvalSplit] = None) -> dict:
    """mAP per method and horizon, plus the mean over horizons.

    `predict[name](samples) -> scores` is called once per horizon group.
    """
    horizons = sorted({s.K_frac for s in samples})
    report = {}
    for name, fn in predict.items():
        per_k = {}
        for K in horizons:
            group = [s for s in samples if s.K_frac == K]
            scores = np.asarray(fn(group))
            gt = np.stack([s.target for s in group])
            per_k[f"{K:.2f}"] = eval_map(scores, gt, split)
        summary = {}
        for key in ("all", "freq", "rare"):
            vals = [r[key] for r in per_k.values() if r[key] is not None]
            summary[key] = float(np.mean(vals)) if vals else None
        report[name] = {"mean": summary,
                        "per_K": {k: {kk: v[kk] for kk in ("all", "freq", "rare")} for k, v in per_k.items()}}
    return report

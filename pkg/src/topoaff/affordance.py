"""Zone affordance learning.

Node-level labels are the union of the interactions seen during any visit
to a node. A classifier over single frame embeddings is trained on one
sample per visit with those labels, using a masked multi-label BCE, and is
scored with mean average precision split into all/frequent/rare classes.

Training-set variants:

``S``          per-video graph nodes
``M``          nodes linked within each kitchen
``C``          nodes linked across all kitchens
``ClipAction`` one sample per annotated clip, supervised on its own label only
``KMeans``     k-means clusters of frames used as nodes
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import _kernels, nn
from .core import ClipAnnotation, Dataset, InteractionVocab
from .linker import ConsolidatedGraph, clips_in_visits
from .topo import TopoGraph, Visit, ZoneNode

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "affordance"
METRICS_SCHEMA_VERSION = 1
VARIANTS = ("S", "M", "C", "ClipAction", "KMeans")


@dataclass
class AffordanceTargets:
    y: np.ndarray
    mask: np.ndarray
    source: str = "node_level"  # or "clip_level"

    def __post_init__(self):
        if self.y.shape != self.mask.shape:
            raise ValueError("y and mask shapes differ")
        if np.any((self.y > 0) & (self.mask == 0)):
            raise ValueError("positive label on a masked entry")


@dataclass
class AffordanceSamples:
    """Stacked training samples: features X, targets Y and masks M."""

    X: np.ndarray
    Y: np.ndarray
    M: np.ndarray
    refs: List[Tuple[str, int]] = field(default_factory=list)  # (video_id, frame)

    def __len__(self):
        return len(self.X)


@dataclass
class EvalSplit:
    all_classes: np.ndarray
    freq_classes: np.ndarray
    rare_classes: np.ndarray

    def __post_init__(self):
        if set(self.freq_classes.tolist()) & set(self.rare_classes.tolist()):
            raise ValueError("frequent and rare classes overlap")

    @classmethod
    def from_counts(cls, counts: np.ndarray, freq_above: int = 100, rare_below: int = 10) -> "EvalSplit":
        counts = np.asarray(counts)
        return cls(np.arange(len(counts)), np.flatnonzero(counts > freq_above), np.flatnonzero(counts < rare_below))


def interaction_counts(anns: Iterable[ClipAnnotation], vocab: InteractionVocab) -> np.ndarray:
    """Clip-level instances per interaction."""
    counts = np.zeros(vocab.num_interactions, dtype=np.int64)
    for c in anns:
        counts[vocab.interaction_id(c.verb_id, c.noun_id)] += 1
    return counts


def visit_labels(visits: Mapping[str, Sequence[Visit]], clips_by_video: Mapping[str, Sequence[ClipAnnotation]],
                 vocab: InteractionVocab) -> np.ndarray:
    y = np.zeros(vocab.num_interactions, dtype=np.float64)
    for vid, vs in visits.items():
        for c in clips_in_visits(vs, clips_by_video.get(vid, ())):
            y[vocab.interaction_id(c.verb_id, c.noun_id)] = 1.0
    return y


def node_affordance_labels(node, anns: Iterable[ClipAnnotation], vocab: InteractionVocab,
                           video_id: Optional[str] = None) -> AffordanceTargets:
    """Union of the interactions of every visit. `node` is a ZoneNode (give
    `video_id` if the annotations span several videos) or a linked cluster."""
    by_video = _by_video(anns)
    if isinstance(node, ZoneNode):
        if video_id is None:
            vids = list(by_video)
            if len(vids) > 1:
                raise ValueError("annotations span several videos; pass video_id")
            video_id = vids[0] if vids else ""
        visits = {video_id: node.visits}
    else:
        visits = node.visits
    y = visit_labels(visits, by_video, vocab)
    return AffordanceTargets(y, np.ones_like(y), "node_level")


def _by_video(anns: Iterable[ClipAnnotation]) -> Dict[str, List[ClipAnnotation]]:
    out: Dict[str, List[ClipAnnotation]] = {}
    for c in anns:
        out.setdefault(c.video_id, []).append(c)
    return out


# --------------------------------------------------------------------------- #
# Training sets


def _visit_samples(ds: Dataset, groups: Iterable[Dict[str, List[Visit]]], by_video, vocab) -> AffordanceSamples:
    X, Y, refs = [], [], []
    for visits in groups:
        y = visit_labels(visits, by_video, vocab)
        for vid in sorted(visits):
            rows = ds.videos[vid].rows
            for v in visits[vid]:
                X.append(rows[v.center])
                Y.append(y)
                refs.append((vid, v.center))
    return _stack(X, Y, [np.ones_like(y) for y in Y], refs, ds.dim, vocab.num_interactions)


def _stack(X, Y, M, refs, dim, A) -> AffordanceSamples:
    if not X:
        return AffordanceSamples(np.zeros((0, dim), np.float32), np.zeros((0, A)), np.zeros((0, A)), [])
    return AffordanceSamples(np.stack(X).astype(np.float32), np.stack(Y), np.stack(M), refs)


def build_affordance_training_set(variant: str, ds: Dataset, videos: Optional[Sequence[str]] = None,
                                  graphs: Optional[Sequence[TopoGraph]] = None,
                                  linked: Optional[Sequence[ConsolidatedGraph]] = None,
                                  kmeans_k: Optional[int] = None, seed: int = 0) -> AffordanceSamples:
    """Samples for one variant.

    S needs per-video `graphs`; M and C need `linked` graphs (one per kitchen
    for M, a single cross-kitchen one for C); KMeans needs `kmeans_k`.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    vocab = ds.vocab
    videos = sorted(videos if videos is not None else ds.video_ids("train"))
    vset = set(videos)
    anns = [a for a in ds.annotations if a.video_id in vset]
    by_video = _by_video(anns)

    if variant == "S":
        if graphs is None:
            raise ValueError("variant S needs per-video graphs")
        groups = [{g.video_id: n.visits} for g in sorted(graphs, key=lambda g: g.video_id)
                  if g.video_id in vset for n in g.nodes]
        return _visit_samples(ds, groups, by_video, vocab)

    if variant in ("M", "C"):
        if not linked:
            raise ValueError(f"variant {variant} needs linked graphs")
        groups = []
        for cg in linked:
            for c in cg.clusters:
                vis = {v: x for v, x in c.visits.items() if v in vset}
                if vis:
                    groups.append(vis)
        return _visit_samples(ds, groups, by_video, vocab)

    if variant == "ClipAction":
        X, Y, M, refs = [], [], [], []
        for c in sorted(anns, key=lambda c: (c.video_id, c.start_frame, c.stop_frame)):
            k = vocab.interaction_id(c.verb_id, c.noun_id)
            y = np.zeros(vocab.num_interactions)
            y[k] = 1.0
            center = (c.start_frame + c.stop_frame) // 2
            X.append(ds.videos[c.video_id].rows[center])
            Y.append(y)
            M.append(y.copy())
            refs.append((c.video_id, center))
        return _stack(X, Y, M, refs, ds.dim, vocab.num_interactions)

    # KMeans: clusters of frames act as nodes, runs of consecutive frames as visits
    if not kmeans_k or kmeans_k < 1:
        raise ValueError("variant KMeans needs kmeans_k >= 1")
    groups = kmeans_visits(ds, videos, kmeans_k, seed)
    return _visit_samples(ds, groups, by_video, vocab)


def kmeans_visits(ds: Dataset, videos: Sequence[str], k: int, seed: int = 0) -> List[Dict[str, List[Visit]]]:
    from sklearn.cluster import KMeans

    feats = np.concatenate([ds.videos[v].rows for v in videos]).astype(np.float64)
    km = KMeans(n_clusters=min(k, len(feats)), init="k-means++", n_init=1, random_state=seed).fit(feats)
    labels = km.labels_
    groups: List[Dict[str, List[Visit]]] = [dict() for _ in range(km.n_clusters)]
    pos = 0
    for vid in videos:
        T = ds.videos[vid].num_frames
        lab = labels[pos : pos + T]
        pos += T
        starts = np.flatnonzero(np.r_[True, lab[1:] != lab[:-1]])
        stops = np.r_[starts[1:] - 1, T - 1]
        for s, e in zip(starts, stops):
            groups[lab[s]].setdefault(vid, []).append(Visit(int(s), int(e)))
    return [g for g in groups if g]


# --------------------------------------------------------------------------- #
# Model


@dataclass
class AffTrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 256
    epochs: int = 20
    anneal_epoch: int = 15
    anneal_lr: float = 1e-5
    hidden: int = 512
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.epochs > 0 and self.hidden > 0):
            raise ValueError("training configuration values must be positive")


class AffordanceModel:
    """Two hidden ReLU layers followed by a linear layer to one logit per interaction."""

    def __init__(self, params: nn.Params, meta: Optional[dict] = None):
        self.params = params
        self.meta = meta or {}
        self.history: Dict[str, List[float]] = {}

    @classmethod
    def init(cls, dim: int, num_classes: int, hidden: int = 512, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        params = nn.init_mlp([dim, hidden, hidden, num_classes], rng, dtype=dtype)
        params["feat_mean"] = np.zeros(dim, dtype=dtype)
        params["feat_std"] = np.ones(dim, dtype=dtype)
        return cls(params, {"dim": dim, "num_classes": num_classes, "hidden": hidden, "seed": seed})

    @property
    def num_classes(self) -> int:
        return self.params["W2"].shape[1]

    def logits(self, X: np.ndarray, params: Optional[nn.Params] = None):
        p = self.params if params is None else params
        out, cache = nn.mlp_forward(p, (X - p["feat_mean"]) / p["feat_std"])
        return out, cache

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=self.params["W0"].dtype)
        return nn.sigmoid(self.logits(X)[0]).astype(np.float64)

    def loss_and_grad(self, X, Y, M, params: Optional[nn.Params] = None):
        p = self.params if params is None else params
        z, cache = self.logits(X, p)
        loss, gz = nn.bce_with_logits(z, Y, M)
        grads, _ = nn.mlp_backward(p, cache, gz)
        return loss, grads

    def save(self, path: str) -> None:
        nn.save_checkpoint(path, CHECKPOINT_KIND, self.params, {**self.meta, "history": self.history})

    @classmethod
    def load(cls, path: str) -> "AffordanceModel":
        params, meta = nn.load_checkpoint(path, CHECKPOINT_KIND)
        m = cls(params, meta)
        m.history = meta.get("history", {})
        return m


def train_affordance(samples: AffordanceSamples, cfg: Optional[AffTrainConfig] = None,
                     dtype=np.float32) -> AffordanceModel:
    cfg = cfg or AffTrainConfig()
    if len(samples) == 0:
        raise ValueError("no training samples")
    if samples.M.sum() == 0:
        raise ValueError("every label is masked; nothing to train on")
    X = samples.X.astype(dtype)
    Y = samples.Y.astype(dtype)
    M = samples.M.astype(dtype)
    model = AffordanceModel.init(X.shape[1], Y.shape[1], cfg.hidden, cfg.seed, dtype)
    model.meta["train_config"] = asdict(cfg)
    std = X.std(axis=0)
    model.params["feat_mean"] = X.mean(axis=0)
    model.params["feat_std"] = np.where(std > 1e-6, std, 1.0).astype(dtype)

    trainable = {k: v for k, v in model.params.items() if not k.startswith("feat_")}
    opt = nn.Adam(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.anneal_lr if epoch >= cfg.anneal_epoch else cfg.lr
        order = rng.permutation(len(X))
        total, weight = 0.0, 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s : s + cfg.batch_size]
            loss, grads = model.loss_and_grad(X[b], Y[b], M[b])
            opt.step(trainable, grads)
            w = float(M[b].sum())
            total += loss * w
            weight += w
        losses.append(total / max(weight, 1e-12))
        logger.debug("affordance epoch %d loss %.4f", epoch, losses[-1])
    model.history = {"train_loss": losses}
    return model


# --------------------------------------------------------------------------- #
# Evaluation


def eval_map(scores: np.ndarray, gt: np.ndarray, split: Optional[EvalSplit] = None) -> dict:
    """mAP over classes with at least one positive, for each split.

    A split with no scorable class is reported as None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt)
    if scores.shape != gt.shape:
        raise ValueError(f"shape mismatch: scores {scores.shape} vs gt {gt.shape}")
    ap = np.asarray(_kernels.average_precision_columns(scores, gt), dtype=np.float64)
    if split is None:
        split = EvalSplit(np.arange(gt.shape[1]), np.array([], dtype=np.int64), np.array([], dtype=np.int64))

    def mean_of(classes):
        vals = ap[np.asarray(classes, dtype=np.int64)]
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if len(vals) else None

    return {
        "all": mean_of(split.all_classes),
        "freq": mean_of(split.freq_classes),
        "rare": mean_of(split.rare_classes),
        "per_class": [None if np.isnan(a) else float(a) for a in ap],
    }


def write_predictions(path: str, scores: np.ndarray, sample_ids: Optional[Sequence] = None) -> None:
    with open(path, "w") as f:
        for i, row in enumerate(np.asarray(scores)):
            sid = sample_ids[i] if sample_ids is not None else i
            f.write(json.dumps({"sample_id": sid, "scores": [round(float(x), 8) for x in row]}) + "\n")


def write_metrics(path: str, metrics: dict) -> None:
    with open(path, "w") as f:
        json.dump({"schema_version": METRICS_SCHEMA_VERSION, **metrics}, f, indent=2, sort_keys=True)


# --------------------------------------------------------------------------- #
# Test sets: frames with their zone's full affordance set


@dataclass
class AffordanceTestSet:
    refs: List[Tuple[str, int]]
    Y: np.ndarray

    def features(self, ds: Dataset) -> np.ndarray:
        return np.stack([ds.videos[v].rows[f] for v, f in self.refs]).astype(np.float32)

    def write(self, path: str) -> None:
        with open(path, "w") as f:
            for (v, fr), y in zip(self.refs, self.Y):
                f.write(json.dumps({"video_id": v, "frame": int(fr), "labels": np.flatnonzero(y).tolist()}) + "\n")

    @classmethod
    def read(cls, path: str, num_classes: int) -> "AffordanceTestSet":
        refs, rows = [], []
        with open(path) as f:
            for line in f:
                if not line.strip():
                    continue
                d = json.loads(line)
                y = np.zeros(num_classes)
                y[d["labels"]] = 1.0
                refs.append((d["video_id"], int(d["frame"])))
                rows.append(y)
        return cls(refs, np.stack(rows) if rows else np.zeros((0, num_classes)))


def zone_test_set(frame_zone: Mapping[str, np.ndarray], zone_affordance: Mapping[str, Mapping[int, Sequence[int]]],
                  videos: Sequence[str], num_classes: int, stride: int = 10) -> AffordanceTestSet:
    """Every `stride`-th frame of `videos`, labelled with the affordance set of
    its ground-truth zone. `zone_affordance[video][zone]` lists interaction ids."""
    refs, rows = [], []
    for vid in sorted(videos):
        fz = frame_zone[vid]
        for t in range(0, len(fz), stride):
            y = np.zeros(num_classes)
            y[list(zone_affordance[vid][int(fz[t])])] = 1.0
            refs.append((vid, t))
            rows.append(y)
    return AffordanceTestSet(refs, np.stack(rows))

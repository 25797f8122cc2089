"""Same-zone scorer over pairs of frame embeddings.

Two interchangeable scorers expose ``score_matrix(A, B)``:

* :class:`SimilarityModel` -- a trainable MLP head over the symmetric pair
  features ``[|a - b|, a * b, (a + b) / 2]``;
* :class:`CosineScorer` -- a closed-form sigmoid of cosine similarity, used
  for ablations and for tests that need a known scorer.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .core import Dataset
from .pairgen import PairSample

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "similarity"


@dataclass
class SimTrainConfig:
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0
    val_fraction: float = 0.1
    hidden: int = 256
    layers: int = 5
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (self.lr > 0 and self.epochs > 0 and self.batch_size > 0 and self.hidden > 0 and self.layers >= 1):
            raise ValueError("training configuration values must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


def pair_features(ea: np.ndarray, eb: np.ndarray) -> np.ndarray:
    """Symmetric pair encoding; rows of `ea` pair with rows of `eb`."""
    return np.concatenate([np.abs(ea - eb), ea * eb, (ea + eb) * 0.5], axis=-1)


def _cross_features(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    a = A[:, None, :]
    b = B[None, :, :]
    return np.concatenate([np.abs(a - b), a * b, (a + b) * 0.5], axis=-1).reshape(len(A) * len(B), -1)


class SimilarityModel:
    def __init__(self, params: nn.Params, dim: int, meta: Optional[dict] = None):
        self.params = params
        self.dim = dim
        self.meta = meta or {}
        self.history: Dict[str, List[float]] = {}

    @classmethod
    def init(cls, dim: int, hidden: int = 256, layers: int = 5, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        sizes = [3 * dim] + [hidden] * (layers - 1) + [1]
        params = nn.init_mlp(sizes, rng, dtype=dtype)
        params["feat_mean"] = np.zeros(3 * dim, dtype=dtype)
        params["feat_std"] = np.ones(3 * dim, dtype=dtype)
        return cls(params, dim, {"dim": dim, "hidden": hidden, "layers": layers, "seed": seed})

    def logits(self, feats: np.ndarray, params: Optional[nn.Params] = None):
        p = self.params if params is None else params
        x = (feats - p["feat_mean"]) / p["feat_std"]
        out, cache = nn.mlp_forward(p, x)
        return out[:, 0], cache

    def score_features(self, feats: np.ndarray) -> np.ndarray:
        z, _ = self.logits(feats.astype(self.params["W0"].dtype, copy=False))
        return nn.sigmoid(z)

    def score_pair(self, ea, eb) -> float:
        ea = np.asarray(ea, dtype=np.float64).ravel()
        eb = np.asarray(eb, dtype=np.float64).ravel()
        if len(ea) != self.dim or len(eb) != self.dim:
            raise ValueError(f"dimension mismatch: expected {self.dim}, got {len(ea)} and {len(eb)}")
        return float(self.score_features(pair_features(ea, eb)[None, :])[0])

    def score_pairs(self, A: np.ndarray, B: np.ndarray, chunk: int = 16384) -> np.ndarray:
        """Scores of row-aligned pairs (A[i], B[i])."""
        dtype = self.params["W0"].dtype
        out = np.empty(len(A), dtype=np.float64)
        for s in range(0, len(A), chunk):
            a = np.asarray(A[s : s + chunk], dtype=dtype)
            b = np.asarray(B[s : s + chunk], dtype=dtype)
            out[s : s + chunk] = self.score_features(pair_features(a, b))
        return out

    def score_matrix(self, A: np.ndarray, B: np.ndarray, chunk: int = 16384) -> np.ndarray:
        A = np.asarray(A)
        B = np.asarray(B)
        if A.shape[1] != self.dim or B.shape[1] != self.dim:
            raise ValueError("dimension mismatch")
        out = np.empty((len(A), len(B)), dtype=np.float64)
        if len(A) == 0 or len(B) == 0:
            return out
        dtype = self.params["W0"].dtype
        rows = max(1, chunk // len(B))
        for s in range(0, len(A), rows):
            feats = _cross_features(A[s : s + rows].astype(dtype), B.astype(dtype))
            out[s : s + rows] = self.score_features(feats).reshape(-1, len(B))
        return out

    def loss_and_grad(self, feats: np.ndarray, y: np.ndarray, params: Optional[nn.Params] = None):
        """Mean BCE and gradients for every trainable parameter."""
        p = self.params if params is None else params
        z, cache = self.logits(feats, p)
        loss, gz = nn.bce_with_logits(z, y)
        grads, _ = nn.mlp_backward(p, cache, gz[:, None])
        return loss, grads

    def save(self, path: str) -> None:
        nn.save_checkpoint(path, CHECKPOINT_KIND, self.params, {**self.meta, "dim": self.dim,
                                                               "history": self.history})

    @classmethod
    def load(cls, path: str) -> "SimilarityModel":
        params, meta = nn.load_checkpoint(path, CHECKPOINT_KIND)
        m = cls(params, int(meta["dim"]), meta)
        m.history = meta.get("history", {})
        return m


@dataclass
class CosineScorer:
    """sigmoid(gain * (cos(a, b) - center))."""

    gain: float = 20.0
    center: float = 0.6

    def score_pair(self, ea, eb) -> float:
        return float(self.score_matrix(np.asarray(ea)[None], np.asarray(eb)[None])[0, 0])

    def score_matrix(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        An = A / np.maximum(np.linalg.norm(A, axis=1, keepdims=True), 1e-12)
        Bn = B / np.maximum(np.linalg.norm(B, axis=1, keepdims=True), 1e-12)
        return nn.sigmoid(self.gain * (An @ Bn.T - self.center))

    def score_pairs(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        na = np.maximum(np.linalg.norm(A, axis=1), 1e-12)
        nb = np.maximum(np.linalg.norm(B, axis=1), 1e-12)
        return nn.sigmoid(self.gain * ((A * B).sum(axis=1) / (na * nb) - self.center))

    def calibrate(self, pairs: Sequence[PairSample], ds: Dataset) -> "CosineScorer":
        """Fit gain and center by 1-D logistic regression on labelled pairs."""
        from sklearn.linear_model import LogisticRegression

        cos = []
        for p in pairs:
            e = ds.videos[p.video_id].rows
            a, b = e[p.frame_a].astype(np.float64), e[p.frame_b].astype(np.float64)
            cos.append(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12))
        y = np.array([p.target for p in pairs])
        lr = LogisticRegression(C=1e4).fit(np.array(cos)[:, None], y)
        self.gain = float(lr.coef_[0, 0])
        self.center = float(-lr.intercept_[0] / lr.coef_[0, 0]) if self.gain != 0 else 0.0
        return self


def pairs_to_arrays(pairs: Sequence[PairSample], ds: Dataset, dtype=np.float32):
    ea = np.stack([ds.videos[p.video_id].rows[p.frame_a] for p in pairs]).astype(dtype)
    eb = np.stack([ds.videos[p.video_id].rows[p.frame_b] for p in pairs]).astype(dtype)
    y = np.array([p.target for p in pairs], dtype=dtype)
    return pair_features(ea, eb), y


def train_similarity(pairs: Sequence[PairSample], ds: Dataset, cfg: Optional[SimTrainConfig] = None,
                     dtype=np.float32) -> SimilarityModel:
    cfg = cfg or SimTrainConfig()
    if not pairs:
        raise ValueError("no training pairs")
    feats, y = pairs_to_arrays(pairs, ds, dtype)
    return train_on_features(feats, y, ds.dim, cfg, dtype)


def train_on_features(feats: np.ndarray, y: np.ndarray, dim: int, cfg: SimTrainConfig,
                      dtype=np.float32) -> SimilarityModel:
    if y.min() == y.max():
        raise ValueError("training pairs contain a single class; need similar and dissimilar examples")
    rng = np.random.default_rng(cfg.seed)
    n = len(y)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n)) if n >= 10 else 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]

    model = SimilarityModel.init(dim, cfg.hidden, cfg.layers, cfg.seed, dtype)
    model.meta["train_config"] = asdict(cfg)
    mean = feats[tr_idx].mean(axis=0)
    std = feats[tr_idx].std(axis=0)
    model.params["feat_mean"] = mean.astype(dtype)
    model.params["feat_std"] = np.where(std > 1e-6, std, 1.0).astype(dtype)

    trainable = {k: v for k, v in model.params.items() if not k.startswith("feat_")}
    opt = nn.Adam(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: Dict[str, List[float]] = {"train_loss": [], "val_acc": []}
    for epoch in range(cfg.epochs):
        order = tr_idx[rng.permutation(len(tr_idx))]
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s : s + cfg.batch_size]
            loss, grads = model.loss_and_grad(feats[b], y[b])
            opt.step(trainable, grads)
            total += loss * len(b)
        history["train_loss"].append(total / max(len(order), 1))
        if n_val:
            pred = model.score_features(feats[val_idx]) > 0.5
            history["val_acc"].append(float((pred == (y[val_idx] > 0.5)).mean()))
        logger.debug("epoch %d loss %.4f", epoch, history["train_loss"][-1])
    model.history = history
    return model


def pair_accuracy(scorer, pairs: Sequence[PairSample], ds: Dataset) -> float:
    hits = 0
    for p in pairs:
        e = ds.videos[p.video_id].rows
        hits += (scorer.score_pair(e[p.frame_a], e[p.frame_b]) > 0.5) == (p.label == "similar")
    return hits / max(len(pairs), 1)

"""Similar / dissimilar frame-pair sampling, with homography verification.

Two frames of a video are a positive pair when they are close in time, come
from the same annotated clip, or share enough keypoint matches consistent with
one planar homography. Negatives are temporally distant frames with low
feature similarity, or distant frames where no action takes place.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .core import ClipAnnotation, DataError, Dataset, frames_in_clips

logger = logging.getLogger(__name__)

SIMILAR_REASONS = ("temporal", "same_clip", "homography")
DISSIMILAR_REASONS = ("distant_dissimilar", "no_action")


class DegenerateConfiguration(ValueError):
    pass


class InsufficientMatches(ValueError):
    pass


@dataclass(frozen=True)
class Correspondences:
    video_id: str
    frame_a: int
    frame_b: int
    points_a: np.ndarray
    points_b: np.ndarray

    def __post_init__(self):
        pa = np.asarray(self.points_a, dtype=np.float64).reshape(-1, 2)
        pb = np.asarray(self.points_b, dtype=np.float64).reshape(-1, 2)
        if pa.shape != pb.shape:
            raise DataError("correspondence point lists differ in length")
        if not (np.isfinite(pa).all() and np.isfinite(pb).all()):
            raise DataError("non-finite keypoint coordinate")
        object.__setattr__(self, "points_a", pa)
        object.__setattr__(self, "points_b", pb)

    def swapped(self) -> "Correspondences":
        return Correspondences(self.video_id, self.frame_b, self.frame_a, self.points_b, self.points_a)

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "frame_a": self.frame_a,
            "frame_b": self.frame_b,
            "points_a": self.points_a.tolist(),
            "points_b": self.points_b.tolist(),
        }


@dataclass(frozen=True)
class PairSample:
    video_id: str
    frame_a: int
    frame_b: int
    label: str  # "similar" | "dissimilar"
    reason: str

    @property
    def target(self) -> float:
        return 1.0 if self.label == "similar" else 0.0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class PairGenConfig:
    temporal_window: int = 15
    min_inliers: int = 10
    ransac_iters: int = 1000
    inlier_px: float = 3.0
    dissim_min_gap: int = 200
    dissim_max_feature_sim: float = 0.5
    pairs_per_video: int = 400
    no_action_share: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("temporal_window", "min_inliers", "ransac_iters", "inlier_px", "dissim_min_gap",
                     "dissim_max_feature_sim", "pairs_per_video"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# --------------------------------------------------------------------------- #
# Homography estimation


def dlt_homography(pts_a, pts_b) -> np.ndarray:
    """Exact homography through four correspondences, normalised so h[2,2] = 1."""
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    if pts_a.shape != (4, 2) or pts_b.shape != (4, 2):
        raise ValueError("dlt_homography needs exactly four point pairs")
    H = _kernels.solve_four_point(pts_a, pts_b)
    if H is None:
        raise DegenerateConfiguration("degenerate configuration: collinear or duplicate points")
    return H


def fit_homography_lstsq(pts_a, pts_b) -> Optional[np.ndarray]:
    """Normalised DLT over any number (>= 4) of correspondences via SVD."""
    pa = np.asarray(pts_a, dtype=np.float64)
    pb = np.asarray(pts_b, dtype=np.float64)
    if len(pa) < 4:
        return None
    Ta, Tb = _normaliser(pa), _normaliser(pb)
    na = _apply(Ta, pa)
    nb = _apply(Tb, pb)
    n = len(pa)
    A = np.zeros((2 * n, 9))
    x, y, u, v = na[:, 0], na[:, 1], nb[:, 0], nb[:, 1]
    A[0::2, 0:3] = np.c_[x, y, np.ones(n)]
    A[0::2, 6:9] = -u[:, None] * np.c_[x, y, np.ones(n)]
    A[1::2, 3:6] = np.c_[x, y, np.ones(n)]
    A[1::2, 6:9] = -v[:, None] * np.c_[x, y, np.ones(n)]
    _, _, vt = np.linalg.svd(A)
    H = np.linalg.inv(Tb) @ vt[-1].reshape(3, 3) @ Ta
    if abs(H[2, 2]) < 1e-12 or abs(np.linalg.det(H)) < 1e-12 * abs(H[2, 2]) ** 3:
        return None
    return H / H[2, 2]


def _normaliser(p):
    c = p.mean(axis=0)
    d = np.sqrt(((p - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / max(d, 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _apply(T, p):
    q = np.c_[p, np.ones(len(p))] @ T.T
    return q[:, :2] / q[:, 2:3]


def apply_homography(H, pts) -> np.ndarray:
    return _apply(np.asarray(H, dtype=np.float64), np.asarray(pts, dtype=np.float64).reshape(-1, 2))


def reprojection_errors(H, pts_a, pts_b) -> np.ndarray:
    return _kernels.reprojection_errors(np.asarray(H, dtype=np.float64), np.asarray(pts_a, dtype=np.float64),
                                        np.asarray(pts_b, dtype=np.float64))


def ransac_samples(n: int, iters: int, seed) -> np.ndarray:
    """(iters, 4) distinct index quadruples drawn from a seeded stream."""
    rng = np.random.default_rng(seed)
    keys = rng.random((iters, n))
    return np.argpartition(keys, 3, axis=1)[:, :4].astype(np.int64)


REFINE_ITERS = 10


def ransac_homography(c: Correspondences, cfg: PairGenConfig, seed=None) -> Tuple[np.ndarray, np.ndarray, int]:
    """Maximum-consensus homography over `cfg.ransac_iters` four-point samples.

    The winning hypothesis is refined by least squares on its inliers,
    repeated until the inlier set stops changing. A minimal sample can catch
    an outlier that happens to fall inside the threshold; the refit drops it.
    """
    n = len(c.points_a)
    if n < 4:
        raise InsufficientMatches(f"insufficient matches: {n} < 4")
    samples = ransac_samples(n, cfg.ransac_iters, cfg.seed if seed is None else seed)
    H, mask, count = _kernels.ransac_hypotheses(c.points_a, c.points_b, samples, cfg.inlier_px)
    if H is None:
        return np.eye(3), np.zeros(n, dtype=bool), 0
    for _ in range(REFINE_ITERS):
        refit = fit_homography_lstsq(c.points_a[mask], c.points_b[mask])
        if refit is None:
            break
        rmask = reprojection_errors(refit, c.points_a, c.points_b) <= cfg.inlier_px
        if rmask.sum() < 4:
            break
        H = refit
        if np.array_equal(rmask, mask):
            break
        mask = rmask
    return H, mask, int(mask.sum())


def homography_inlier_count(c: Correspondences, cfg: PairGenConfig, seed=None) -> int:
    try:
        return ransac_homography(c, cfg, seed)[2]
    except InsufficientMatches:
        return 0


# --------------------------------------------------------------------------- #
# Pair sampling


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _same_clip(a: int, b: int, clips: Sequence[ClipAnnotation]) -> bool:
    return any(c.start_frame <= a <= c.stop_frame and c.start_frame <= b <= c.stop_frame for c in clips)


def _similar_reason(a, b, clips, homography_pairs, cfg) -> Optional[str]:
    if abs(a - b) < cfg.temporal_window:
        return "temporal"
    if _same_clip(a, b, clips):
        return "same_clip"
    if (min(a, b), max(a, b)) in homography_pairs:
        return "homography"
    return None


def sample_pairs(
    ds: Dataset,
    corrs: Iterable[Correspondences] = (),
    cfg: Optional[PairGenConfig] = None,
) -> List[PairSample]:
    """Labelled frame pairs for training the same-zone scorer.

    Each video draws from its own stream seeded by (seed, video index), so the
    output is reproducible and videos could be processed independently.
    """
    cfg = cfg or PairGenConfig()
    by_video: Dict[str, List[Correspondences]] = {}
    for c in corrs:
        by_video.setdefault(c.video_id, []).append(c)

    out: List[PairSample] = []
    for vi, vid in enumerate(sorted(ds.videos)):
        out.extend(_sample_video(ds, vid, vi, by_video.get(vid, []), cfg))
    logger.info("sampled %d pairs", len(out))
    return out


def _sample_video(ds, vid, vi, corrs, cfg) -> List[PairSample]:
    rng = np.random.default_rng([cfg.seed, vi])
    emb = ds.videos[vid].rows
    T = len(emb)
    clips = ds.clips(vid)
    in_clip = frames_in_clips(T, clips)
    budget = cfg.pairs_per_video

    homography_pairs = set()
    homography_list = []
    for ci, c in enumerate(corrs):
        count = homography_inlier_count(c, cfg, seed=[cfg.seed, vi, ci])
        if count >= cfg.min_inliers and 0 <= c.frame_a < T and 0 <= c.frame_b < T and c.frame_a != c.frame_b:
            key = (min(c.frame_a, c.frame_b), max(c.frame_a, c.frame_b))
            if key not in homography_pairs:
                homography_pairs.add(key)
                homography_list.append(key)

    similar: List[PairSample] = []
    seen = set()

    def add_similar(a, b):
        a, b = min(a, b), max(a, b)
        if a == b or (a, b) in seen:
            return
        reason = _similar_reason(a, b, clips, homography_pairs, cfg)
        if reason is None:
            return
        seen.add((a, b))
        similar.append(PairSample(vid, int(a), int(b), "similar", reason))

    if T >= 2:
        for _ in range(budget):
            a = int(rng.integers(0, T - 1))
            d = int(rng.integers(1, min(cfg.temporal_window - 1, T - 1 - a) + 1))
            add_similar(a, a + d)
    for _ in range(budget if clips else 0):
        c = clips[int(rng.integers(len(clips)))]
        a, b = rng.integers(c.start_frame, c.stop_frame + 1, size=2)
        add_similar(int(a), int(b))
    for a, b in homography_list:
        add_similar(a, b)

    dissimilar: List[PairSample] = []
    n_no_action = 0
    max_no_action = int(round(cfg.no_action_share * budget))
    if T > cfg.dissim_min_gap:
        for _ in range(20 * budget):
            if len(dissimilar) >= budget:
                break
            a = int(rng.integers(0, T - cfg.dissim_min_gap))
            b = int(rng.integers(a + cfg.dissim_min_gap, T))
            if (a, b) in seen or _similar_reason(a, b, clips, homography_pairs, cfg) is not None:
                continue
            if _cosine(emb[a], emb[b]) <= cfg.dissim_max_feature_sim:
                reason = "distant_dissimilar"
            elif not in_clip[a] and not in_clip[b] and n_no_action < max_no_action:
                reason = "no_action"
                n_no_action += 1
            else:
                continue
            seen.add((a, b))
            dissimilar.append(PairSample(vid, a, b, "dissimilar", reason))

    n = min(len(similar), len(dissimilar))
    if len(similar) > n:
        keep = np.sort(rng.choice(len(similar), n, replace=False))
        similar = [similar[i] for i in keep]
    if len(dissimilar) > n:
        keep = np.sort(rng.choice(len(dissimilar), n, replace=False))
        dissimilar = [dissimilar[i] for i in keep]
    return similar + dissimilar


# --------------------------------------------------------------------------- #
# I/O


def write_pairs(pairs: Iterable[PairSample], path: str) -> None:
    with open(path, "w") as f:
        for p in pairs:
            f.write(json.dumps(p.to_json()) + "\n")


def read_pairs(path: str) -> List[PairSample]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append(PairSample(d["video_id"], int(d["frame_a"]), int(d["frame_b"]), d["label"], d["reason"]))
    return out


def write_correspondences(corrs: Iterable[Correspondences], path: str) -> None:
    with open(path, "w") as f:
        for c in corrs:
            f.write(json.dumps(c.to_json()) + "\n")


def read_correspondences(path: str) -> List[Correspondences]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append(Correspondences(d["video_id"], int(d["frame_a"]), int(d["frame_b"]),
                                           d["points_a"], d["points_b"]))
    return out

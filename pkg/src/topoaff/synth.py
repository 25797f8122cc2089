"""Deterministic synthetic kitchens with ground truth for every pipeline stage.

A kitchen is a set of zones with well separated embedding centroids. Each
zone has a functional type shared across kitchens: types fix which
interactions (verb, noun) happen there. A video walks the zones with a
Markov chain, dwells a geometric number of frames in each, and emits action
clips inside dwells. Frame embeddings are the zone centroid plus Gaussian
noise, and a random 20% of frames get a large low-rank offset along the
direction of an active object.

Recipes (``n_recipes > 1``) give each video a route through the zones and a
recipe-specific verb block, so the future actions of a video depend on the
order in which zones are traversed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import ClipAnnotation, Dataset, EmbeddingMatrix, InteractionVocab, save_dataset

logger = logging.getLogger(__name__)


class InfeasibleSeparation(ValueError):
    pass


@dataclass
class SynthConfig:
    n_zones: int = 6
    dim: int = 64
    separation: float = 10.0
    noise_scale: float = 1.0
    dwell_mean: float = 80.0
    dwell_min: int = 20
    transition: Optional[List[List[float]]] = None
    route_noise: float = 0.3
    active_object_noise: float = 4.0
    active_object_frac: float = 0.2
    active_object_rank: int = 2
    n_videos: int = 5
    frames_per_video: int = 2000
    test_videos: int = 1
    fps: float = 6.0
    n_kitchens: int = 1
    n_recipes: int = 1
    verbs_per_recipe: int = 8
    nouns_per_zone: int = 3
    interactions_per_zone: int = 6
    interaction_zipf: float = 1.0
    clip_len: Tuple[int, int] = (6, 18)
    clip_gap_mean: float = 4.0
    seed: int = 0

    def __post_init__(self):
        self.clip_len = tuple(self.clip_len)
        if self.n_zones < 1 or self.dim < 1:
            raise ValueError("n_zones and dim must be >= 1")
        if not self.separation > 0 or not self.noise_scale >= 0:
            raise ValueError("separation must be positive and noise_scale non-negative")
        if not 1 <= self.dwell_min <= self.dwell_mean:
            raise ValueError("need 1 <= dwell_min <= dwell_mean")
        if self.transition is not None:
            P = np.asarray(self.transition, dtype=np.float64)
            if P.shape != (self.n_zones, self.n_zones) or (P < 0).any() or not np.allclose(P.sum(1), 1.0):
                raise ValueError("transition must be a row-stochastic n_zones x n_zones matrix")
        if self.interactions_per_zone > self.verbs_per_recipe * self.nouns_per_zone:
            raise ValueError("interactions_per_zone exceeds available verb/noun combinations")
        if not (1 <= self.clip_len[0] <= self.clip_len[1]):
            raise ValueError("clip_len must be (min, max) with 1 <= min <= max")

    @property
    def noise_std(self) -> float:
        """Per-coordinate std; noise vectors have RMS norm `noise_scale`."""
        return self.noise_scale / np.sqrt(self.dim)


@dataclass
class ZoneSpec:
    zone_id: int
    zone_type: int
    centroid: np.ndarray
    noise_scale: float
    affordance_set: Tuple[int, ...]
    action_dist: np.ndarray
    object_dist: np.ndarray
    recipe_interactions: Tuple[Tuple[int, ...], ...] = ()
    recipe_weights: Tuple[Tuple[float, ...], ...] = ()


@dataclass
class SynthOutput:
    dataset: Dataset
    frame_zone: Dict[str, np.ndarray]
    zones: Dict[str, List[ZoneSpec]]  # kitchen -> zones
    video_recipe: Dict[str, int]
    routes: Dict[str, List[List[int]]] = field(default_factory=dict)

    def zone_type_of(self, video_id: str) -> np.ndarray:
        """Functional type per frame."""
        zones = self.zones[self.dataset.kitchen_of[video_id]]
        types = np.array([z.zone_type for z in zones])
        return types[self.frame_zone[video_id]]

    def zone_affordances(self) -> Dict[str, List[int]]:
        return {f"{k}:{z.zone_id}": list(z.affordance_set) for k, zs in self.zones.items() for z in zs}

    def affordance_by_video(self) -> Dict[str, Dict[int, Tuple[int, ...]]]:
        """video -> zone id -> interaction ids afforded there."""
        return {v: {z.zone_id: z.affordance_set for z in self.zones[k]}
                for v, k in self.dataset.kitchen_of.items()}

    def ground_truth_json(self) -> dict:
        return {
            "frame_zone": {v: fz.tolist() for v, fz in sorted(self.frame_zone.items())},
            "zone_affordances": self.zone_affordances(),
            "zone_types": {f"{k}:{z.zone_id}": z.zone_type for k, zs in self.zones.items() for z in zs},
            "video_recipe": dict(sorted(self.video_recipe.items())),
        }

    def save(self, out_dir: str) -> str:
        manifest = save_dataset(self.dataset, out_dir, extra={"ground_truth": "ground_truth.json"})
        import os

        with open(os.path.join(out_dir, "ground_truth.json"), "w") as f:
            json.dump(self.ground_truth_json(), f)
        return manifest


def load_ground_truth(path: str) -> dict:
    with open(path) as f:
        gt = json.load(f)
    gt["frame_zone"] = {v: np.asarray(z, dtype=np.int64) for v, z in gt["frame_zone"].items()}
    return gt


# --------------------------------------------------------------------------- #
# Vocabulary and functional zone types


def build_vocab(cfg: SynthConfig):
    """Vocabulary plus, per zone type and recipe, interaction ids and weights."""
    rng = np.random.default_rng([cfg.seed, 0xF00D])
    n_verbs = cfg.n_recipes * cfg.verbs_per_recipe
    n_nouns = cfg.n_zones * cfg.nouns_per_zone
    pairs_by = {}
    for z in range(cfg.n_zones):
        for r in range(cfg.n_recipes):
            combos = [(r * cfg.verbs_per_recipe + v, z * cfg.nouns_per_zone + n)
                      for v in range(cfg.verbs_per_recipe) for n in range(cfg.nouns_per_zone)]
            pick = rng.choice(len(combos), cfg.interactions_per_zone, replace=False)
            pairs_by[z, r] = [combos[i] for i in pick]
    interactions = sorted({p for ps in pairs_by.values() for p in ps})
    vocab = InteractionVocab(
        [f"verb{i}" for i in range(n_verbs)],
        [f"noun{i}" for i in range(n_nouns)],
        interactions,
    )
    ranks = np.arange(1, cfg.interactions_per_zone + 1, dtype=np.float64)
    weights = ranks ** (-cfg.interaction_zipf)
    weights /= weights.sum()
    table = {}
    for (z, r), ps in pairs_by.items():
        ids = tuple(vocab.interaction_id(v, n) for v, n in ps)
        table[z, r] = (ids, tuple(weights.tolist()))
    return vocab, table


def generate_environment(cfg: SynthConfig, kitchen: int = 0, max_tries: int = 1000) -> List[ZoneSpec]:
    """Zones of one kitchen; centroids at pairwise distance >= separation * noise_scale."""
    vocab, table = build_vocab(cfg)
    rng = np.random.default_rng([cfg.seed, kitchen, 1])
    min_dist = cfg.separation * max(cfg.noise_scale, 1e-12)
    spread = 1.5 * min_dist / np.sqrt(2 * cfg.dim)
    centroids: List[np.ndarray] = []
    tries = 0
    while len(centroids) < cfg.n_zones:
        c = rng.standard_normal(cfg.dim) * spread
        tries += 1
        if all(np.linalg.norm(c - o) >= min_dist for o in centroids):
            centroids.append(c)
        elif tries > max_tries:
            raise InfeasibleSeparation(
                f"could not place {cfg.n_zones} zones at separation {cfg.separation} in dim {cfg.dim}"
            )
    zones = []
    for z in range(cfg.n_zones):
        rec_ids = tuple(table[z, r][0] for r in range(cfg.n_recipes))
        rec_w = tuple(table[z, r][1] for r in range(cfg.n_recipes))
        a = np.zeros(vocab.num_verbs)
        o = np.zeros(vocab.num_nouns)
        for ids, ws in zip(rec_ids, rec_w):
            for i, w in zip(ids, ws):
                v, n = vocab.interactions[i]
                a[v] += w / cfg.n_recipes
                o[n] += w / cfg.n_recipes
        aff = tuple(sorted({i for ids in rec_ids for i in ids}))
        zones.append(ZoneSpec(z, z, centroids[z], cfg.noise_scale, aff, a, o, rec_ids, rec_w))
    return zones


def object_directions(cfg: SynthConfig, n_nouns: int) -> np.ndarray:
    """(n_nouns, dim, rank) orthonormal bases of active-object appearance."""
    rng = np.random.default_rng([cfg.seed, 0x0B1])
    rank = min(cfg.active_object_rank, cfg.dim)
    out = np.empty((n_nouns, cfg.dim, rank))
    for n in range(n_nouns):
        q, _ = np.linalg.qr(rng.standard_normal((cfg.dim, rank)))
        out[n] = q
    return out


# --------------------------------------------------------------------------- #
# Markov routes


def route_transition(route: Sequence[int], n: int, noise: float) -> np.ndarray:
    """Cycle along `route` with probability 1 - noise; the rest spread over other zones."""
    P = np.zeros((n, n))
    if n == 1:
        return np.ones((1, 1))
    for i, z in enumerate(route):
        nxt = route[(i + 1) % len(route)]
        others = [k for k in range(n) if k != z and k != nxt]
        P[z, nxt] = 1.0 - (noise if others else 0.0)
        for k in others:
            P[z, k] = noise / len(others)
    return P


def recipe_routes(cfg: SynthConfig, kitchen: int) -> List[List[int]]:
    rng = np.random.default_rng([cfg.seed, kitchen, 2])
    routes, edge_sets = [], []
    for _ in range(cfg.n_recipes):
        for _attempt in range(200):
            route = [int(x) for x in rng.permutation(cfg.n_zones)]
            edges = frozenset(frozenset((route[i], route[(i + 1) % len(route)])) for i in range(len(route)))
            if edges not in edge_sets or cfg.n_zones < 4:
                break
        routes.append(route)
        edge_sets.append(edges)
    return routes


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(np.asarray(P).T)
    k = int(np.argmin(np.abs(w - 1.0)))
    pi = np.real(v[:, k])
    pi = np.abs(pi) / np.abs(pi).sum()
    return pi


# --------------------------------------------------------------------------- #
# Videos


def generate_video(zones: Sequence[ZoneSpec], cfg: SynthConfig, rng: np.random.Generator, video_id: str = "v0",
                   transition: Optional[np.ndarray] = None, start_zone: Optional[int] = None,
                   recipe: int = 0, num_frames: Optional[int] = None,
                   object_basis: Optional[np.ndarray] = None, vocab: Optional[InteractionVocab] = None):
    """Returns (EmbeddingMatrix, clips, frame -> zone id array)."""
    if not zones:
        raise ValueError("no zones")
    n = len(zones)
    T = num_frames or cfg.frames_per_video
    P = np.asarray(transition if transition is not None else
                   (cfg.transition if cfg.transition is not None else np.full((n, n), 1.0 / n)))
    if vocab is None:
        vocab, _ = build_vocab(cfg)
    if object_basis is None:
        object_basis = object_directions(cfg, vocab.num_nouns)

    frame_zone = np.empty(T, dtype=np.int64)
    clips: List[ClipAnnotation] = []
    clip_noun = np.full(T, -1, dtype=np.int64)
    z = int(rng.integers(n)) if start_zone is None else int(start_zone)
    t = 0
    # shifted geometric: support starts at dwell_min, mean is dwell_mean
    p_leave = 1.0 / (cfg.dwell_mean - cfg.dwell_min + 1)
    while t < T:
        dwell = cfg.dwell_min - 1 + int(rng.geometric(p_leave))
        end = min(T, t + dwell) - 1
        frame_zone[t : end + 1] = z
        spec = zones[z]
        ids, ws = spec.recipe_interactions[recipe], np.asarray(spec.recipe_weights[recipe])
        cursor = t + int(rng.geometric(1.0 / cfg.clip_gap_mean)) - 1
        while cursor + cfg.clip_len[0] - 1 <= end:
            length = int(rng.integers(cfg.clip_len[0], cfg.clip_len[1] + 1))
            stop = min(end, cursor + length - 1)
            k = ids[int(rng.choice(len(ids), p=ws / ws.sum()))]
            verb, noun = vocab.interactions[k]
            clips.append(ClipAnnotation(video_id, cursor, stop, verb, noun))
            clip_noun[cursor : stop + 1] = noun
            cursor = stop + 1 + int(rng.geometric(1.0 / cfg.clip_gap_mean)) - 1
        t = end + 1
        z = int(rng.choice(n, p=P[z]))

    centroids = np.stack([zn.centroid for zn in zones])
    emb = centroids[frame_zone] + rng.standard_normal((T, cfg.dim)) * cfg.noise_std
    if cfg.active_object_noise > 0 and cfg.active_object_frac > 0:
        chosen = np.flatnonzero(rng.random(T) < cfg.active_object_frac)
        for f in chosen:
            noun = clip_noun[f]
            if noun < 0:
                zt = zones[frame_zone[f]].zone_type
                noun = zt * cfg.nouns_per_zone + int(rng.integers(cfg.nouns_per_zone))
            c = rng.standard_normal(object_basis.shape[2])
            c /= max(np.linalg.norm(c), 1e-12)
            emb[f] += cfg.active_object_noise * cfg.noise_scale * (object_basis[noun] @ c)
    return EmbeddingMatrix(video_id, cfg.fps, emb.astype(np.float32)), clips, frame_zone


def generate_dataset(cfg: SynthConfig) -> SynthOutput:
    """All kitchens and videos; the last `test_videos` videos of each kitchen form the test split."""
    vocab, _ = build_vocab(cfg)
    basis = object_directions(cfg, vocab.num_nouns)
    videos, anns, kitchen_of, split_of = {}, [], {}, {}
    frame_zone, zones_by, video_recipe, routes_by = {}, {}, {}, {}
    for k in range(cfg.n_kitchens):
        kname = f"k{k}"
        zones = generate_environment(cfg, k)
        zones_by[kname] = zones
        routes = recipe_routes(cfg, k)
        routes_by[kname] = routes
        for j in range(cfg.n_videos):
            vid = f"{kname}_v{j:02d}"
            rng = np.random.default_rng([cfg.seed, k, 3, j])
            recipe = j % cfg.n_recipes
            if cfg.transition is not None:
                P, start = np.asarray(cfg.transition), None
            else:
                P, start = route_transition(routes[recipe], cfg.n_zones, cfg.route_noise), routes[recipe][0]
            emb, clips, fz = generate_video(zones, cfg, rng, vid, P, start, recipe,
                                            object_basis=basis, vocab=vocab)
            videos[vid] = emb
            anns.extend(clips)
            kitchen_of[vid] = kname
            split_of[vid] = "test" if j >= cfg.n_videos - cfg.test_videos else "train"
            frame_zone[vid] = fz
            video_recipe[vid] = recipe
    ds = Dataset(videos, anns, vocab, kitchen_of, split_of)
    return SynthOutput(ds, frame_zone, zones_by, video_recipe, routes_by)


def synth_correspondences(out: SynthOutput, n_pairs: int = 50, n_points: int = 40, outlier_frac: float = 0.3,
                          noise_px: float = 0.5, seed: int = 0):
    """Planted-homography keypoint matches for same-zone frame pairs, random
    matches for different-zone pairs. Half of the pairs are same-zone."""
    from .pairgen import Correspondences, apply_homography

    rng = np.random.default_rng([seed, 0xC0])
    out_corrs = []
    vids = out.dataset.video_ids()
    for i in range(n_pairs):
        vid = vids[int(rng.integers(len(vids)))]
        fz = out.frame_zone[vid]
        T = len(fz)
        a = int(rng.integers(T))
        same = i % 2 == 0
        cands = np.flatnonzero((fz == fz[a]) if same else (fz != fz[a]))
        if len(cands) == 0:
            continue
        b = int(cands[rng.integers(len(cands))])
        pts_a = rng.uniform(0, 640, size=(n_points, 2))
        if same:
            H = random_homography(rng)
            pts_b = apply_homography(H, pts_a) + rng.normal(0, noise_px, size=(n_points, 2))
            n_out = int(round(outlier_frac * n_points))
            pts_b[:n_out] = rng.uniform(0, 640, size=(n_out, 2))
        else:
            pts_b = rng.uniform(0, 640, size=(n_points, 2))
        out_corrs.append(Correspondences(vid, a, b, pts_a, pts_b))
    return out_corrs


def random_homography(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """A mild, well-conditioned perspective warp of a 640x640 image."""
    ang = rng.uniform(-0.3, 0.3) * scale
    s = 1.0 + rng.uniform(-0.2, 0.2) * scale
    R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]]) * s
    H = np.eye(3)
    H[:2, :2] = R + rng.uniform(-0.05, 0.05, size=(2, 2)) * scale
    H[:2, 2] = rng.uniform(-40, 40, size=2) * scale
    H[2, :2] = rng.uniform(-2e-4, 2e-4, size=2) * scale
    return H


def config_to_json(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["clip_len"] = list(cfg.clip_len)
    return d

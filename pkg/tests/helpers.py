"""Shared helpers for the test suite."""

import numpy as np

from topoaff.core import ClipAnnotation, Dataset, EmbeddingMatrix, InteractionVocab


def grad_check(loss_fn, params, grads, rng, n_coords=1, h=1e-6, floor=1e-6):
    """Largest relative error between analytic gradients and central differences.

    `n_coords` coordinates are drawn from every tensor in `grads`. The
    denominator is max(|analytic|, |numeric|, floor) so that vanishing
    gradients are compared in absolute terms.
    """
    worst = 0.0
    for name in sorted(grads):
        arr = params[name]
        for _ in range(n_coords):
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss_fn()
            arr[idx] = orig - h
            lm = loss_fn()
            arr[idx] = orig
            num = (lp - lm) / (2 * h)
            ana = float(grads[name][idx])
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
    return worst


def tiny_dataset(n_frames=60, dim=4, seed=0, clips=None):
    """One-video dataset with a 3-verb x 2-noun vocabulary."""
    rng = np.random.default_rng(seed)
    vocab = InteractionVocab(("a", "b", "c"), ("x", "y"), [(0, 0), (1, 0), (1, 1), (2, 1)])
    emb = EmbeddingMatrix("v0", 6.0, rng.standard_normal((n_frames, dim)))
    if clips is None:
        clips = [ClipAnnotation("v0", 5, 10, 0, 0), ClipAnnotation("v0", 30, 35, 1, 1)]
    return Dataset({"v0": emb}, clips, vocab, {"v0": "k0"}, {"v0": "train"})


def report(name, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))


# --------------------------------------------------------------------------- #
# Score schedules for the graph builder


class TableScorer:
    """Scores a (query, reference) frame pair by table lookup. Each embedding
    row holds its own frame index in column 0."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)

    def score_pairs(self, A, B):
        return self.table[np.asarray(A)[:, 0].astype(int), np.asarray(B)[:, 0].astype(int)]

    def score_matrix(self, A, B):
        return self.table[np.ix_(np.asarray(A)[:, 0].astype(int), np.asarray(B)[:, 0].astype(int))]


class ConstScorer:
    def __init__(self, value):
        self.value = value

    def score_pairs(self, A, B):
        return np.full(len(A), self.value)

    def score_matrix(self, A, B):
        return np.full((len(A), len(B)), self.value)


def index_video(T, video_id="v"):
    return EmbeddingMatrix(video_id, 6.0, np.arange(T, dtype=np.float32)[:, None])


def random_schedule(rng):
    """A frame-by-frame score table with zone-like block structure, plus builder settings."""
    T = int(rng.integers(12, 80))
    n_z = int(rng.integers(1, 6))
    runs = rng.integers(1, 12, size=T)
    zone = np.repeat(rng.integers(0, n_z, size=T), runs)[:T]
    logit = rng.normal(-2.0, 1.5, (n_z, n_z))
    logit[np.diag_indices(n_z)] = rng.normal(2.5, 1.0, n_z)
    noise = rng.uniform(0.0, 1.5)
    table = 1.0 / (1.0 + np.exp(-(logit[zone[:, None], zone[None, :]] + noise * rng.standard_normal((T, T)))))
    sigma = float(rng.uniform(0.5, 0.9))
    margin = float(rng.uniform(0.05, sigma - 0.05))
    window = int(rng.choice([1, 3, 9]))
    return table, sigma, margin, window


def interpret_alg1(table, sigma, margin, window):
    """Straight-line reading of the online builder, with every visit frame used as a sample.

    Returns (visits per node, sorted directed edge counts, ignored frames).
    """
    T = len(table)
    nodes = [[[0, 0]]]
    edges = {}
    ignored = []
    last = 0
    for t in range(1, T):
        W = [u for u in range(t - (window - 1) // 2, t + window // 2 + 1) if 0 <= u < T]
        best, s_star = -1, -np.inf
        for n, visits in enumerate(nodes):
            per_visit = []
            for a, b in visits:
                vals = [table[u, s] for u in W for s in range(a, b + 1)]
                per_visit.append(sum(vals) / len(vals))
            s_f = sum(per_visit) / len(per_visit)
            if s_f > s_star:
                best, s_star = n, s_f
        if s_star > sigma:
            cur = best
            if nodes[cur][-1][1] == t - 1:
                nodes[cur][-1][1] = t
            else:
                nodes[cur].append([t, t])
        elif s_star < sigma - margin:
            nodes.append([[t, t]])
            cur = len(nodes) - 1
        else:
            ignored.append(t)
            continue
        if cur != last:
            edges[(last, cur)] = edges.get((last, cur), 0) + 1
        last = cur
    return (tuple(tuple((a, b) for a, b in n) for n in nodes), tuple(sorted(edges.items())), tuple(ignored))


# --------------------------------------------------------------------------- #
# End-to-end CLI runs

SMALL_CONFIG = {
    "seed": 7,
    "synth": {"n_zones": 4, "n_kitchens": 2, "n_videos": 3, "test_videos": 1, "frames_per_video": 600, "dim": 32},
    "pairgen": {"pairs_per_video": 300},
    "simnet": {"epochs": 5, "hidden": 64},
    "affordance": {"epochs": 10, "anneal_epoch": 8, "hidden": 64},
    "anticipation": {"epochs": 10, "decay_epoch": 8, "hidden": 32},
}

PIPELINE = ["synth", "pairs", "train-sim", "build-graph", "link", "train-affordance", "eval-affordance",
            "train-anticipation", "eval-anticipation", "export"]


def run_pipeline(run_dir, config_path, steps=PIPELINE):
    """Run CLI stages in-process; returns the exit code of each stage."""
    from topoaff.cli import main

    return {step: main([step, "--run-dir", str(run_dir), "--config", str(config_path)]) for step in steps}

import numpy as np
import pytest

from topoaff.core import ClipAnnotation, Dataset, EmbeddingMatrix, InteractionVocab
from topoaff.pairgen import (SIMILAR_REASONS, Correspondences, DegenerateConfiguration, InsufficientMatches,
                             PairGenConfig, _similar_reason, apply_homography, dlt_homography,
                             homography_inlier_count, ransac_homography, read_correspondences, read_pairs,
                             reprojection_errors, sample_pairs, write_correspondences, write_pairs)
from topoaff.synth import random_homography

SQUARE = np.array([[0.0, 0.0], [100.0, 0.0], [100.0, 80.0], [0.0, 80.0]])


def planted(rng, n_in, n_out, H=None):
    H = random_homography(rng) if H is None else H
    pa = rng.uniform(0, 640, (n_in + n_out, 2))
    pb = apply_homography(H, pa)
    pb[n_in:] = rng.uniform(0, 640, (n_out, 2))
    return H, pa, pb


def test_dlt_identity():
    np.testing.assert_allclose(dlt_homography(SQUARE, SQUARE), np.eye(3), atol=1e-12)


def test_dlt_translation():
    H = dlt_homography(SQUARE, SQUARE + [5.0, -2.0])
    np.testing.assert_allclose(H, [[1, 0, 5], [0, 1, -2], [0, 0, 1]], atol=1e-10)


def test_dlt_recovers_planted_homography():
    rng = np.random.default_rng(1)
    for _ in range(20):
        H = random_homography(rng)
        pts = rng.uniform(0, 640, (4, 2))
        est = dlt_homography(pts, apply_homography(H, pts))
        assert np.max(np.abs(est - H / H[2, 2]) / np.maximum(np.abs(H / H[2, 2]), 1e-3)) < 1e-9
        assert reprojection_errors(est, pts, apply_homography(H, pts)).max() < 1e-6


@pytest.mark.parametrize("pts", [
    [[0, 0], [1, 1], [2, 2], [5, 0]],  # three collinear
    [[0, 0], [0, 0], [3, 1], [5, 7]],  # duplicate
])
def test_dlt_degenerate(pts):
    with pytest.raises(DegenerateConfiguration, match="degenerate"):
        dlt_homography(pts, SQUARE)


def test_ransac_all_inliers():
    rng = np.random.default_rng(2)
    _, pa, pb = planted(rng, 50, 0)
    _, mask, count = ransac_homography(Correspondences("v", 0, 1, pa, pb), PairGenConfig())
    assert count == 50 and mask.all()


def test_ransac_with_outliers():
    rng = np.random.default_rng(3)
    H, pa, pb = planted(rng, 70, 30)
    est, mask, count = ransac_homography(Correspondences("v", 0, 1, pa, pb), PairGenConfig())
    assert count >= 0.95 * 70
    assert reprojection_errors(est, pa[:70], pb[:70]).mean() < 1.0


def test_ransac_insufficient_matches():
    c = Correspondences("v", 0, 1, SQUARE[:3], SQUARE[:3])
    with pytest.raises(InsufficientMatches, match="insufficient matches"):
        ransac_homography(c, PairGenConfig())
    assert homography_inlier_count(c, PairGenConfig()) == 0


def test_ransac_deterministic_and_symmetric():
    rng = np.random.default_rng(4)
    _, pa, pb = planted(rng, 40, 15)
    c = Correspondences("v", 0, 1, pa, pb)
    cfg = PairGenConfig()
    a = ransac_homography(c, cfg)
    b = ransac_homography(c, cfg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert homography_inlier_count(c.swapped(), cfg) == a[2]


def test_correspondence_validation():
    from topoaff.core import DataError

    with pytest.raises(DataError):
        Correspondences("v", 0, 1, [[0, 0]], [[0, 0], [1, 1]])
    with pytest.raises(DataError):
        Correspondences("v", 0, 1, [[0, np.inf]], [[0, 0]])


def test_similar_reasons():
    cfg = PairGenConfig()
    clips = [ClipAnnotation("v", 200, 260, 0, 0)]
    assert _similar_reason(100, 110, clips, set(), cfg) == "temporal"
    assert _similar_reason(100, 115, clips, set(), cfg) is None
    assert _similar_reason(200, 250, clips, set(), cfg) == "same_clip"
    assert _similar_reason(0, 300, clips, {(0, 300)}, cfg) == "homography"


def test_homography_threshold_twelve_inliers():
    rng = np.random.default_rng(5)
    _, pa, pb = planted(rng, 12, 0)
    assert homography_inlier_count(Correspondences("v", 0, 300, pa, pb), PairGenConfig()) == 12


def _stream_dataset(T=1200, dim=16, seed=0):
    """Two alternating, nearly orthogonal appearance regimes with a few clips."""
    rng = np.random.default_rng(seed)
    base = np.eye(dim)[:2] * 5
    regime = (np.arange(T) // 300) % 2
    rows = base[regime] + 0.1 * rng.standard_normal((T, dim))
    clips = [ClipAnnotation("v", s, s + 20, 0, 0) for s in range(50, T, 300)]
    vocab = InteractionVocab(("a",), ("x",), [(0, 0)])
    return Dataset({"v": EmbeddingMatrix("v", 6.0, rows)}, clips, vocab, {"v": "k"})


def test_sample_pairs_properties():
    ds = _stream_dataset()
    rng = np.random.default_rng(6)
    corrs = []
    for a in range(0, 600, 37):
        _, pa, pb = planted(rng, 15, 5)
        corrs.append(Correspondences("v", a, a + 600, pa, pb))
    cfg = PairGenConfig(pairs_per_video=200)
    pairs = sample_pairs(ds, corrs, cfg)
    sim = [p for p in pairs if p.label == "similar"]
    dis = [p for p in pairs if p.label == "dissimilar"]
    assert len(sim) == len(dis) > 0
    assert {p.reason for p in sim} <= set(SIMILAR_REASONS)
    assert "homography" in {p.reason for p in sim}
    keys_sim = {(p.frame_a, p.frame_b) for p in sim}
    keys_dis = {(p.frame_a, p.frame_b) for p in dis}
    assert not keys_sim & keys_dis
    for p in dis:
        assert p.frame_b - p.frame_a >= cfg.dissim_min_gap
    assert sample_pairs(ds, corrs, cfg) == pairs


def test_pair_and_correspondence_io(tmp_path):
    ds = _stream_dataset()
    pairs = sample_pairs(ds, cfg=PairGenConfig(pairs_per_video=50))
    write_pairs(pairs, str(tmp_path / "p.jsonl"))
    assert read_pairs(str(tmp_path / "p.jsonl")) == pairs
    c = Correspondences("v", 1, 2, SQUARE, SQUARE + 1)
    write_correspondences([c], str(tmp_path / "c.jsonl"))
    back = read_correspondences(str(tmp_path / "c.jsonl"))[0]
    assert np.array_equal(back.points_b, c.points_b)


def test_config_validation():
    with pytest.raises(ValueError):
        PairGenConfig(inlier_px=0)

import numpy as np
import pytest

from topoaff import nn
from topoaff.anticipation import (AnticipationModel, AnticipationSample, AntTrainConfig, GraphBatch, MeanPoolModel,
                                  assign_clips, build_samples, evaluate_methods, future_target, gcn_forward,
                                  node_inputs, observed_count, predict_future, train_anticipation, train_dist,
                                  train_mean_pool)
from topoaff.core import ClipAnnotation, Dataset, EmbeddingMatrix, InteractionVocab
from topoaff.synth import SynthConfig, generate_dataset
from topoaff.topo import TopoGraph, Visit, ZoneNode
from helpers import ConstScorer, grad_check


def sample(F, edges, target, K=0.5, vid="v"):
    F = np.asarray(F, dtype=np.float64)
    return AnticipationSample(vid, 1, K, None, F, F, np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                              np.asarray(target, dtype=np.float64))


def random_graph_sample(rng, n, dim, D):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
    return sample(rng.standard_normal((n, dim)), pairs, (rng.random(D) < 0.5).astype(float))


def clip(s, e, verb):
    return ClipAnnotation("v", s, e, verb, 0)


def test_observed_count():
    assert observed_count(8, 0.25) == 2
    assert observed_count(8, 0.75) == 6
    assert observed_count(3, 0.1) == 1
    assert observed_count(3, 0.99) == 2
    with pytest.raises(ValueError):
        observed_count(1, 0.5)


def test_future_target_scans_remaining_clips():
    clips = [clip(i, i, v) for i, v in enumerate([0, 1, 2, 3, 4, 5, 6, 3])]
    y = future_target(clips, observed_count(8, 0.25), 8)
    assert np.flatnonzero(y).tolist() == [2, 3, 4, 5, 6]
    y = future_target(clips[:6] + [clip(6, 6, 5), clip(7, 7, 5)], observed_count(8, 0.75), 8)
    assert np.flatnonzero(y).tolist() == [5]


def test_samples_match_brute_force_scan():
    out = generate_dataset(SynthConfig(n_videos=2, frames_per_video=300, seed=0))
    ds = out.dataset
    samples = build_samples(ds, ds.video_ids(), ConstScorer(0.1), horizons=(0.25, 0.5, 0.75))
    assert len(samples) == 6
    for s in samples:
        clips = sorted(ds.clips(s.video_id), key=lambda c: (c.start_frame, c.stop_frame))
        k = int(np.floor(s.K_frac * len(clips)))
        expected = np.zeros(ds.vocab.num_verbs)
        for c in clips[k:]:
            expected[c.verb_id] = 1
        assert s.k == k
        assert np.array_equal(s.target, expected)
        assert s.graph.num_frames == clips[k - 1].stop_frame + 1


def test_assign_clips_majority_rule():
    g = TopoGraph("v", [ZoneNode(0, [Visit(0, 9)], [[0]]), ZoneNode(1, [Visit(10, 19)], [[10]])], {}, [], 20)
    clips = [clip(2, 5, 0), clip(8, 11, 0), clip(7, 12, 0), clip(9, 19, 0)]
    # [8, 11] splits 2/2 -> lower id; [7, 12] splits 3/3 -> lower id; [9, 19] is mostly node 1
    assert assign_clips(g, clips).tolist() == [0, 0, 0, 1]
    g.nodes[1].visits = [Visit(15, 19)]
    g.ignored_frames = list(range(10, 15))
    assert assign_clips(g, [clip(10, 16, 0)]).tolist() == [-1]


def test_node_inputs_mean_and_fallback():
    rows = np.arange(40, dtype=np.float64).reshape(20, 2)
    g = TopoGraph("v", [ZoneNode(0, [Visit(0, 9)], [[0]]), ZoneNode(1, [Visit(10, 19)], [[10]])], {}, [], 20)
    clips = [clip(0, 1, 0), clip(4, 5, 0)]
    x = node_inputs(g, rows, clips)
    np.testing.assert_allclose(x[0], (rows[0:2].mean(0) + rows[4:6].mean(0)) / 2)
    np.testing.assert_allclose(x[1], rows[10:20].mean(0))
    x1 = node_inputs(g, rows, clips[:1])
    np.testing.assert_allclose(x1[0], rows[0:2].mean(0))
    np.testing.assert_allclose(node_inputs(g, rows, clips[::-1]), x)


def test_gcn_isolated_node():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3))
    W, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
    G, _ = gcn_forward(GraphBatch.from_samples([sample(x, [], [0])]), x, W, b)
    np.testing.assert_allclose(G, np.maximum(x @ W + b, 0))


def test_gcn_sum_over_neighbours():
    u, v = np.array([1.0, 2.0]), np.array([0.5, 3.0])
    X = np.stack([u, v])
    G, _ = gcn_forward(GraphBatch.from_samples([sample(X, [(0, 1)], [0])]), X, np.eye(2), np.zeros(2))
    np.testing.assert_allclose(G, [u + v, u + v])
    with pytest.raises(ValueError, match="width mismatch"):
        gcn_forward(GraphBatch.from_samples([sample(X, [], [0])]), X, np.eye(3), np.zeros(3))


def test_zero_weights_predict_half():
    rng = np.random.default_rng(1)
    m = AnticipationModel.init(4, 3, hidden=6)
    for k in m.params:
        if not k.startswith("feat_"):
            m.params[k][...] = 0
    assert np.allclose(predict_future(random_graph_sample(rng, 5, 4, 3), m), 0.5)


def test_duplicated_graph_gives_same_prediction():
    rng = np.random.default_rng(2)
    s = random_graph_sample(rng, 5, 4, 3)
    dup = sample(np.vstack([s.node_inputs, s.node_inputs]), np.vstack([s.edges, s.edges + 5]), s.target)
    m = AnticipationModel.init(4, 3, hidden=8, seed=3)
    np.testing.assert_allclose(predict_future(dup, m), predict_future(s, m), atol=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    s = random_graph_sample(rng, 6, 4, 3)
    perm = rng.permutation(6)
    inv = np.argsort(perm)
    t = sample(s.node_inputs[perm], inv[s.edges], s.target)
    m = AnticipationModel.init(4, 3, hidden=8, gcn_layers=2, seed=5)
    b1, b2 = GraphBatch.from_samples([s]), GraphBatch.from_samples([t])
    g1 = m.forward(b1)[1][2]
    g2 = m.forward(b2)[1][2]
    np.testing.assert_allclose(g2, g1[perm], atol=1e-12)
    np.testing.assert_allclose(predict_future(t, m), predict_future(s, m), atol=1e-12)


@pytest.mark.parametrize("layers", [0, 1, 2])
def test_gradients_float64(layers):
    rng = np.random.default_rng(6 + layers)
    samples = [random_graph_sample(rng, int(rng.integers(1, 6)), 4, 3) for _ in range(4)]
    batch = GraphBatch.from_samples(samples)
    m = AnticipationModel.init(4, 3, hidden=7, gcn_layers=layers, seed=layers)
    _, grads = m.loss_and_grad(batch)
    assert grad_check(lambda: m.loss_and_grad(batch)[0], m.params, grads, rng, n_coords=4) <= 1e-4


def test_training_reduces_loss():
    rng = np.random.default_rng(7)
    samples = []
    for _ in range(40):
        s = random_graph_sample(rng, 4, 3, 2)
        s.target[:] = [float(s.node_inputs[:, 0].mean() > 0), float(s.num_nodes > 0)]
        samples.append(s)
    m = train_anticipation(samples, AntTrainConfig(epochs=30, decay_epoch=20, hidden=16, batch_size=16))
    assert m.history["train_loss"][-1] < m.history["train_loss"][0]


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    s = random_graph_sample(rng, 3, 4, 2)
    m = AnticipationModel.init(4, 2, hidden=5, gcn_layers=2)
    m.save(str(tmp_path / "a.ckpt"))
    back = AnticipationModel.load(str(tmp_path / "a.ckpt"))
    assert back.gcn_layers == 2
    assert np.array_equal(predict_future(s, back), predict_future(s, m))
    from topoaff.affordance import AffordanceModel

    AffordanceModel.init(4, 2, hidden=3).save(str(tmp_path / "aff.ckpt"))
    with pytest.raises(nn.CheckpointError):
        AnticipationModel.load(str(tmp_path / "aff.ckpt"))


def test_train_dist():
    vocab = InteractionVocab(("a", "b", "c"), ("x",), [(0, 0), (1, 0), (2, 0)])
    vids = {v: EmbeddingMatrix(v, 6.0, np.zeros((10, 2))) for v in ("p", "q")}
    clips = [ClipAnnotation("p", 0, 1, 0, 0), ClipAnnotation("p", 2, 3, 1, 0), ClipAnnotation("q", 0, 1, 0, 0)]
    ds = Dataset(vids, clips, vocab, {"p": "k", "q": "k"})
    assert train_dist(ds, ["p", "q"]).tolist() == [1.0, 0.5, 0.0]


def test_mean_pool_identical_clips():
    u = np.array([0.3, -1.2, 2.0])
    s = AnticipationSample("v", 3, 0.5, None, np.tile(u, (3, 1)), u[None], np.zeros((0, 2), np.int64), np.zeros(2))
    m = MeanPoolModel.init(3, 2, seed=1)
    head = nn.sigmoid(u @ m.params["W0"] + m.params["b0"])
    np.testing.assert_allclose(m.predict([s])[0], head)


def test_mean_pool_trains():
    rng = np.random.default_rng(9)
    samples = [random_graph_sample(rng, 3, 3, 2) for _ in range(30)]
    m = train_mean_pool(samples, AntTrainConfig(epochs=20, decay_epoch=15))
    assert m.history["train_loss"][-1] < m.history["train_loss"][0]


def test_evaluate_methods_report():
    rng = np.random.default_rng(10)
    samples = [random_graph_sample(rng, 3, 3, 4) for _ in range(6)]
    for i, s in enumerate(samples):
        s.K_frac = (0.25, 0.5, 0.75)[i % 3]
        s.target[0] = 1
    rep = evaluate_methods({"oracle": lambda g: np.stack([s.target for s in g])}, samples)
    assert rep["oracle"]["mean"]["all"] == pytest.approx(1.0)
    assert sorted(rep["oracle"]["per_K"]) == ["0.25", "0.50", "0.75"]


def test_empty_graph_rejected():
    s = AnticipationSample("v", 1, 0.5, None, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2), np.int64),
                           np.zeros(2))
    with pytest.raises(ValueError):
        GraphBatch.from_samples([s])

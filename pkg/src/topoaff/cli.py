"""Command-line driver: synth | pairs | train-sim | build-graph | link |
train-affordance | eval-affordance | train-anticipation | eval-anticipation | export.

Every stage reads and writes inside one run directory. Configuration comes
from built-in defaults, then an optional JSON file (``--config``), then
per-key flags such as ``--builder.sigma 0.65``. The merged configuration is
written to ``config/<command>.json`` and ``run_manifest.json`` lists every
file in the run directory with its sha256.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import affordance as aff
from . import anticipation as ant
from . import linker, nn, pairgen, simnet, synth, topo
from .core import DataError, Dataset, load_dataset

logger = logging.getLogger("topoaff")

CONFIG_SCHEMA_VERSION = 1
RUN_MANIFEST = "run_manifest.json"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- #
# Configuration

SECTIONS = {
    "synth": (synth.SynthConfig, {}),
    "pairgen": (pairgen.PairGenConfig, {}),
    "simnet": (simnet.SimTrainConfig, {"scorer": "mlp"}),
    "builder": (topo.BuilderConfig, {}),
    "link": (linker.LinkConfig, {}),
    "affordance": (aff.AffTrainConfig, {"variants": list(aff.VARIANTS), "test_stride": 10}),
    "anticipation": (ant.AntTrainConfig, {"horizons": list(ant.HORIZONS), "mode": "verb"}),
}

HELP = {
    "synth.n_zones": "zones per kitchen",
    "synth.dim": "embedding dimension",
    "synth.separation": "minimum centroid distance in units of noise_scale",
    "synth.noise_scale": "RMS norm of per-frame Gaussian noise",
    "synth.dwell_mean": "mean frames spent in a zone per stay",
    "synth.dwell_min": "minimum frames spent in a zone per stay",
    "synth.transition": "row-stochastic zone transition matrix (JSON); null uses recipe routes",
    "synth.route_noise": "probability of leaving a recipe route at each zone change",
    "synth.active_object_noise": "size of the active-object offset, in units of noise_scale",
    "synth.active_object_frac": "fraction of frames carrying an active-object offset",
    "synth.active_object_rank": "dimension of each object's appearance subspace",
    "synth.n_videos": "videos per kitchen",
    "synth.frames_per_video": "frames per video",
    "synth.test_videos": "last videos of each kitchen held out as the test split",
    "synth.fps": "frame rate recorded in the embedding headers",
    "synth.n_kitchens": "kitchens sharing the same functional zone types",
    "synth.n_recipes": "recipes, each with its own zone route and verb block",
    "synth.verbs_per_recipe": "verbs in each recipe's block",
    "synth.nouns_per_zone": "nouns belonging to each zone type",
    "synth.interactions_per_zone": "interactions afforded by each zone type per recipe",
    "synth.interaction_zipf": "Zipf exponent of interaction frequencies within a zone",
    "synth.clip_len": "[min, max] clip length in frames (JSON)",
    "synth.clip_gap_mean": "mean gap in frames between consecutive clips",
    "pairgen.temporal_window": "frames apart below which two frames count as the same zone",
    "pairgen.min_inliers": "homography inliers needed to call a pair the same zone",
    "pairgen.ransac_iters": "RANSAC hypotheses per correspondence set",
    "pairgen.inlier_px": "reprojection error in pixels below which a match is an inlier",
    "pairgen.dissim_min_gap": "minimum frame gap for a dissimilar pair",
    "pairgen.dissim_max_feature_sim": "maximum cosine similarity for a dissimilar pair",
    "pairgen.pairs_per_video": "pairs drawn per video before class balancing",
    "pairgen.no_action_share": "cap on the share of dissimilar pairs drawn from action-free frames",
    "simnet.lr": "Adam learning rate of the same-zone scorer",
    "simnet.epochs": "training epochs of the same-zone scorer",
    "simnet.batch_size": "mini-batch size",
    "simnet.val_fraction": "share of pairs held out for validation accuracy",
    "simnet.hidden": "hidden width of the scorer MLP",
    "simnet.layers": "dense layers in the scorer MLP",
    "simnet.weight_decay": "L2 weight decay",
    "simnet.scorer": "'mlp' (trained head) or 'cosine' (calibrated cosine similarity)",
    "builder.sigma": "frame-to-node score above which a frame joins the best node",
    "builder.margin": "hysteresis margin: scores below sigma - margin open a new node",
    "builder.score_window": "frames in the query window around each frame",
    "builder.frames_per_visit": "sampled frames kept per visit for scoring",
    "builder.visit_repr": "'samples' (sampled frames per visit) or 'center' (center frame only)",
    "link.threshold_fraction": "merging stops below this fraction of the mean pairwise node similarity",
    "link.linkage": "cluster linkage: average, single or complete",
    "link.epsilon": "additive smoothing of action and object histograms",
    "link.directed": "score node pairs with the one-sided KL form",
    "affordance.lr": "Adam learning rate",
    "affordance.weight_decay": "L2 weight decay",
    "affordance.batch_size": "mini-batch size",
    "affordance.epochs": "training epochs",
    "affordance.anneal_epoch": "epoch from which anneal_lr is used",
    "affordance.anneal_lr": "learning rate after annealing",
    "affordance.hidden": "hidden width of the two-layer MLP",
    "affordance.variants": "training-set variants to train and evaluate (JSON list)",
    "affordance.test_stride": "frame stride of the synthetic affordance test set",
    "anticipation.lr": "Adam learning rate",
    "anticipation.epochs": "training epochs",
    "anticipation.decay_epoch": "epoch from which the learning rate is multiplied by decay_factor",
    "anticipation.decay_factor": "learning-rate decay factor",
    "anticipation.weight_decay": "L2 weight decay",
    "anticipation.batch_size": "mini-batch size",
    "anticipation.hidden": "width of node features and graph convolution",
    "anticipation.gcn_layers": "graph convolution layers",
    "anticipation.use_gcn": "false trains the variant without graph convolution",
    "anticipation.horizons": "observed fractions of each video (JSON list)",
    "anticipation.mode": "'verb' targets actions, 'interaction' targets (verb, noun) pairs",
}

COMMAND_SECTIONS = {
    "synth": ["synth"],
    "pairs": ["pairgen"],
    "train-sim": ["simnet"],
    "build-graph": ["simnet", "builder"],
    "link": ["link"],
    "train-affordance": ["link", "affordance"],
    "eval-affordance": ["link", "affordance"],
    "train-anticipation": ["simnet", "builder", "anticipation"],
    "eval-anticipation": ["simnet", "builder", "anticipation"],
    "export": [],
}


def _section_defaults(name: str) -> Dict[str, Any]:
    cls, extras = SECTIONS[name]
    d = {}
    for f in dataclasses.fields(cls):
        if f.name == "seed":
            continue
        v = getattr(cls(), f.name)
        d[f.name] = list(v) if isinstance(v, tuple) else v
    d.update(copy.deepcopy(extras))
    return d


def default_config() -> Dict[str, Any]:
    cfg: Dict[str, Any] = {"schema_version": CONFIG_SCHEMA_VERSION, "seed": 0}
    for name in SECTIONS:
        cfg[name] = _section_defaults(name)
    return cfg


def merge_config(base: Dict[str, Any], update: Dict[str, Any], where: str = "config") -> Dict[str, Any]:
    """Overlay `update` on `base`, rejecting keys that `base` does not have."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in out:
            raise ConfigError(f"{where}: unknown key {k!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k}: expected an object")
            out[k] = merge_config(out[k], v, f"{where}.{k}")
        else:
            out[k] = v
    if out.get("schema_version") not in (None, CONFIG_SCHEMA_VERSION):
        raise ConfigError(f"config schema version {out['schema_version']} != {CONFIG_SCHEMA_VERSION}")
    return out


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    cfg = default_config()
    if path:
        if not os.path.exists(path):
            raise DataError(f"missing file: {path}")
        try:
            with open(path) as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        cfg = merge_config(cfg, user)
    return cfg


def section(cfg: Dict[str, Any], name: str):
    """(dataclass instance, extras dict) for one config section."""
    cls, extras = SECTIONS[name]
    values = cfg[name]
    kwargs = {k: v for k, v in values.items() if k not in extras}
    if any(f.name == "seed" for f in dataclasses.fields(cls)):
        kwargs["seed"] = int(cfg["seed"])
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None
    return obj, {k: values[k] for k in extras}


def _parse_value(text: str, default: Any):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        return text
    return json.loads(text)  # lists, matrices, null


# --------------------------------------------------------------------------- #
# Run directory helpers


class Run:
    def __init__(self, run_dir: str, cfg: Dict[str, Any], data: Optional[str] = None):
        self.dir = run_dir
        self.cfg = cfg
        self.data_manifest = data or self.path("data", "manifest.json")
        self._ds: Optional[Dataset] = None

    def path(self, *parts: str) -> str:
        return os.path.join(self.dir, *parts)

    def out(self, *parts: str) -> str:
        p = self.path(*parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    @property
    def ds(self) -> Dataset:
        if self._ds is None:
            self._ds = load_dataset(self.data_manifest)
        return self._ds

    def require(self, path: str, hint: str) -> str:
        if not os.path.exists(path):
            raise DataError(f"missing file: {path} (run `topoaff {hint}` first)")
        return path

    def write_json(self, obj: Any, *parts: str) -> str:
        p = self.out(*parts)
        with open(p, "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
        return p


def write_run_manifest(run_dir: str) -> None:
    files = {}
    for root, _, names in os.walk(run_dir):
        for n in sorted(names):
            p = os.path.join(root, n)
            rel = os.path.relpath(p, run_dir)
            if rel == RUN_MANIFEST:
                continue
            h = hashlib.sha256()
            with open(p, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    h.update(chunk)
            files[rel.replace(os.sep, "/")] = h.hexdigest()
    with open(os.path.join(run_dir, RUN_MANIFEST), "w") as f:
        json.dump({"schema_version": CONFIG_SCHEMA_VERSION, "files": dict(sorted(files.items()))}, f, indent=1)
        f.write("\n")


def save_scorer(scorer, path: str) -> None:
    if isinstance(scorer, simnet.CosineScorer):
        nn.save_checkpoint(path, "cosine_scorer", {}, {"gain": scorer.gain, "center": scorer.center})
    else:
        scorer.save(path)


def load_scorer(path: str):
    kind = nn.checkpoint_kind(path)
    if kind == "cosine_scorer":
        _, meta = nn.load_checkpoint(path, kind)
        return simnet.CosineScorer(meta["gain"], meta["center"])
    if kind == simnet.CHECKPOINT_KIND:
        return simnet.SimilarityModel.load(path)
    raise nn.CheckpointError(f"{path}: {kind} checkpoint is not a same-zone scorer")


def load_graphs(run: Run, videos: Optional[Sequence[str]] = None) -> Dict[str, topo.TopoGraph]:
    videos = videos if videos is not None else run.ds.video_ids()
    out = {}
    for vid in videos:
        p = run.require(run.path("graphs", f"{vid}.json"), "build-graph")
        g = topo.load_graph(p)
        try:
            g.check_invariants()
        except AssertionError as e:
            raise DataError(f"{p}: {e}") from None
        out[vid] = g
    return out


# --------------------------------------------------------------------------- #
# Commands


def cmd_synth(run: Run, args) -> None:
    cfg, _ = section(run.cfg, "synth")
    out = synth.generate_dataset(cfg)
    data_dir = os.path.dirname(run.data_manifest) if args.data else run.path("data")
    out.save(data_dir)
    pairgen.write_correspondences(synth.synth_correspondences(out, seed=cfg.seed),
                                  os.path.join(data_dir, "correspondences.jsonl"))
    with open(os.path.join(data_dir, "synth_config.json"), "w") as f:
        json.dump(synth.config_to_json(cfg), f, indent=2, sort_keys=True)
    print(os.path.join(data_dir, "manifest.json"))


def cmd_pairs(run: Run, args) -> None:
    cfg, _ = section(run.cfg, "pairgen")
    corr_path = args.correspondences or os.path.join(os.path.dirname(run.data_manifest), "correspondences.jsonl")
    corrs = pairgen.read_correspondences(corr_path) if os.path.exists(corr_path) else []
    train = set(run.ds.video_ids("train"))
    pairs = [p for p in pairgen.sample_pairs(run.ds, corrs, cfg) if p.video_id in train]
    pairgen.write_pairs(pairs, run.out("pairs.jsonl"))
    print(run.path("pairs.jsonl"))


def cmd_train_sim(run: Run, args) -> None:
    cfg, extra = section(run.cfg, "simnet")
    pairs = pairgen.read_pairs(run.require(run.path("pairs.jsonl"), "pairs"))
    if extra["scorer"] == "cosine":
        scorer = simnet.CosineScorer().calibrate(pairs, run.ds)
    elif extra["scorer"] == "mlp":
        scorer = simnet.train_similarity(pairs, run.ds, cfg)
    else:
        raise ConfigError(f"simnet.scorer must be 'mlp' or 'cosine', got {extra['scorer']!r}")
    save_scorer(scorer, run.out("checkpoints", "similarity.ckpt"))
    acc = simnet.pair_accuracy(scorer, pairs, run.ds)
    run.write_json({"schema_version": aff.METRICS_SCHEMA_VERSION, "train_pair_accuracy": acc,
                    "history": getattr(scorer, "history", {})}, "metrics", "similarity.json")
    print(run.path("checkpoints", "similarity.ckpt"))


def _scorer(run: Run):
    return load_scorer(run.require(run.path("checkpoints", "similarity.ckpt"), "train-sim"))


def cmd_build_graph(run: Run, args) -> None:
    cfg, _ = section(run.cfg, "builder")
    scorer = _scorer(run)
    for vid in run.ds.video_ids(args.split):
        trace: list = []
        g = topo.build_graph(run.ds.videos[vid], scorer, cfg, trace=trace)
        topo.check_hysteresis(g, trace, cfg)
        topo.save_graph(g, run.out("graphs", f"{vid}.json"))
    print(run.path("graphs"))


def link_all(run: Run, videos: Sequence[str]):
    """(per-kitchen combined maps, cross-kitchen consolidated map) over `videos`."""
    cfg, _ = section(run.cfg, "link")
    ds = run.ds
    graphs = load_graphs(run, videos)
    by_kitchen: Dict[str, List[topo.TopoGraph]] = {}
    for vid in sorted(graphs):
        by_kitchen.setdefault(ds.kitchen_of[vid], []).append(graphs[vid])
    V, N = ds.vocab.num_verbs, ds.vocab.num_nouns
    combined = {k: linker.link_nodes(gs, ds.annotations, V, N, cfg) for k, gs in sorted(by_kitchen.items())}
    consolidated = linker.link_nodes(list(graphs.values()), ds.annotations, V, N, cfg)
    for cg in list(combined.values()) + [consolidated]:
        cg.check_invariants()
    return graphs, combined, consolidated


def cmd_link(run: Run, args) -> None:
    _, combined, consolidated = link_all(run, run.ds.video_ids(args.split))
    for k, cg in combined.items():
        linker.save_consolidated(cg, run.out("linked", f"kitchen_{k}.json"))
    linker.save_consolidated(consolidated, run.out("linked", "consolidated.json"))
    print(run.path("linked"))


def _affordance_training_sets(run: Run, variants: Sequence[str]) -> Dict[str, aff.AffordanceSamples]:
    train = run.ds.video_ids("train")
    graphs, combined, consolidated = link_all(run, train)
    out = {}
    for v in variants:
        out[v] = aff.build_affordance_training_set(
            v, run.ds, train, graphs=list(graphs.values()),
            linked=list(combined.values()) if v == "M" else [consolidated],
            kmeans_k=len(consolidated.clusters), seed=int(run.cfg["seed"]))
    return out


def _train_affordance_variants(run: Run, variants: Sequence[str]) -> Dict[str, aff.AffordanceModel]:
    cfg, _ = section(run.cfg, "affordance")
    sets = _affordance_training_sets(run, variants)
    models = {}
    for v, samples in sets.items():
        logger.info("affordance variant %s: %d samples", v, len(samples))
        m = aff.train_affordance(samples, cfg)
        m.meta["variant"] = v
        m.save(run.out("checkpoints", f"affordance_{v}.ckpt"))
        models[v] = m
    return models


def _variants(run: Run, args) -> List[str]:
    _, extra = section(run.cfg, "affordance")
    variants = args.variant or extra["variants"]
    bad = [v for v in variants if v not in aff.VARIANTS]
    if bad:
        raise ConfigError(f"unknown affordance variants {bad}; expected {list(aff.VARIANTS)}")
    return list(variants)


def cmd_train_affordance(run: Run, args) -> None:
    _train_affordance_variants(run, _variants(run, args))
    print(run.path("checkpoints"))


def affordance_test_set(run: Run, path: Optional[str], stride: int) -> aff.AffordanceTestSet:
    A = run.ds.vocab.num_interactions
    if path:
        return aff.AffordanceTestSet.read(run.require(path, "synth"), A)
    gt_path = os.path.join(os.path.dirname(run.data_manifest), "ground_truth.json")
    if not os.path.exists(gt_path):
        raise DataError("no --test-set given and no ground_truth.json next to the data manifest")
    gt = synth.load_ground_truth(gt_path)
    test = run.ds.video_ids("test")
    if not test:
        raise DataError("dataset has no test-split videos")
    zaff = {v: {int(key.split(":")[1]): ids for key, ids in gt["zone_affordances"].items()
                if key.split(":")[0] == run.ds.kitchen_of[v]} for v in test}
    return aff.zone_test_set(gt["frame_zone"], zaff, test, A, stride)


def cmd_eval_affordance(run: Run, args) -> None:
    _, extra = section(run.cfg, "affordance")
    variants = _variants(run, args)
    models = {}
    missing = []
    for v in variants:
        p = run.path("checkpoints", f"affordance_{v}.ckpt")
        if os.path.exists(p) and not args.retrain:
            models[v] = aff.AffordanceModel.load(p)
        else:
            missing.append(v)
    if missing:
        models.update(_train_affordance_variants(run, missing))
    ts = affordance_test_set(run, args.test_set, int(extra["test_stride"]))
    train_anns = [a for a in run.ds.annotations if run.ds.split_of.get(a.video_id, "train") == "train"]
    split = aff.EvalSplit.from_counts(aff.interaction_counts(train_anns, run.ds.vocab))
    X = ts.features(run.ds)
    report = {"num_test_samples": len(ts.refs), "num_freq_classes": int(len(split.freq_classes)),
              "num_rare_classes": int(len(split.rare_classes)), "variants": {}}
    ids = [f"{v}:{f}" for v, f in ts.refs]
    for v in variants:
        scores = models[v].predict(X)
        report["variants"][v] = aff.eval_map(scores, ts.Y, split)
        aff.write_predictions(run.out("predictions", f"affordance_{v}.jsonl"), scores, ids)
    aff.write_metrics(run.out("metrics", "affordance.json"), report)
    for v in variants:
        r = report["variants"][v]
        print(f"{v:>10s}  all {_pct(r['all'])}  freq {_pct(r['freq'])}  rare {_pct(r['rare'])}")


def _pct(x):
    return "  n/a" if x is None else f"{100 * x:5.1f}"


def _anticipation_samples(run: Run, split: str):
    builder, _ = section(run.cfg, "builder")
    _, extra = section(run.cfg, "anticipation")
    if extra["mode"] not in ("verb", "interaction"):
        raise ConfigError("anticipation.mode must be 'verb' or 'interaction'")
    vids = run.ds.video_ids(split)
    if not vids:
        raise DataError(f"dataset has no {split}-split videos")
    return ant.build_samples(run.ds, vids, _scorer(run), extra["horizons"], builder, extra["mode"])


def cmd_train_anticipation(run: Run, args) -> None:
    cfg, extra = section(run.cfg, "anticipation")
    samples = _anticipation_samples(run, "train")
    ours = ant.train_anticipation(samples, cfg)
    ours.save(run.out("checkpoints", "anticipation.ckpt"))
    wo = ant.train_anticipation(samples, dataclasses.replace(cfg, use_gcn=False))
    wo.save(run.out("checkpoints", "anticipation_wo_gcn.ckpt"))
    mp = ant.train_mean_pool(samples, cfg)
    nn.save_checkpoint(run.out("checkpoints", "anticipation_mean_pool.ckpt"), "mean_pool", mp.params,
                       {"max_clips": mp.max_clips, "history": mp.history})
    dist = ant.train_dist(run.ds, run.ds.video_ids("train"), mode=extra["mode"])
    run.write_json({"schema_version": aff.METRICS_SCHEMA_VERSION, "scores": dist.tolist()},
                   "checkpoints", "anticipation_train_dist.json")
    print(run.path("checkpoints", "anticipation.ckpt"))


def cmd_eval_anticipation(run: Run, args) -> None:
    _, extra = section(run.cfg, "anticipation")
    need = ["anticipation.ckpt", "anticipation_wo_gcn.ckpt", "anticipation_mean_pool.ckpt",
            "anticipation_train_dist.json"]
    for n in need:
        run.require(run.path("checkpoints", n), "train-anticipation")
    ours = ant.AnticipationModel.load(run.path("checkpoints", "anticipation.ckpt"))
    wo = ant.AnticipationModel.load(run.path("checkpoints", "anticipation_wo_gcn.ckpt"))
    params, meta = nn.load_checkpoint(run.path("checkpoints", "anticipation_mean_pool.ckpt"), "mean_pool")
    mp = ant.MeanPoolModel(params, int(meta["max_clips"]))
    with open(run.path("checkpoints", "anticipation_train_dist.json")) as f:
        dist = np.asarray(json.load(f)["scores"])
    samples = _anticipation_samples(run, "test")
    train_anns = [a for a in run.ds.annotations if run.ds.split_of.get(a.video_id, "train") == "train"]
    if extra["mode"] == "verb":
        counts = np.bincount([a.verb_id for a in train_anns], minlength=run.ds.vocab.num_verbs)
    else:
        counts = aff.interaction_counts(train_anns, run.ds.vocab)
    split = aff.EvalSplit.from_counts(counts)
    report = ant.evaluate_methods({
        "ours": ours.predict,
        "ours_wo_gcn": wo.predict,
        "mean_pool": mp.predict,
        "train_dist": lambda group: np.tile(dist, (len(group), 1)),
    }, samples, split)
    aff.write_metrics(run.out("metrics", "anticipation.json"), {"num_test_samples": len(samples), "methods": report})
    for name, r in report.items():
        print(f"{name:>12s}  all {_pct(r['mean']['all'])}")


def consolidated_dot(d: dict) -> str:
    lines = ["graph consolidated {"]
    for c in d["clusters"]:
        lines.append(f'  c{c["id"]} [label="cluster {c["id"]}\\n{len(c["members"])} nodes"];')
    und: Dict[tuple, int] = {}
    for e in d["edges"]:
        key = (min(e["src"], e["dst"]), max(e["src"], e["dst"]))
        und[key] = und.get(key, 0) + e["count"]
    for (a, b), n in sorted(und.items()):
        lines.append(f'  c{a} -- c{b} [penwidth={1 + np.log1p(n):.3f}, label="{n}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_one(path: str, fmt: str, directed: bool) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path) as f:
        d = json.load(f)
    if "clusters" in d:
        if d.get("schema_version") != linker.LINK_SCHEMA_VERSION:
            raise DataError(f"{path}: unsupported schema version {d.get('schema_version')}")
        return consolidated_dot(d) if fmt == "dot" else json.dumps(d, indent=1, sort_keys=True) + "\n"
    try:
        g = topo.TopoGraph.from_json(d)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    return g.to_dot(directed) if fmt == "dot" else json.dumps(g.to_json(), indent=1, sort_keys=True) + "\n"


def cmd_export(run: Run, args) -> None:
    if args.graph:
        text = export_one(args.graph, args.format, args.directed)
        if args.out:
            with open(args.out, "w") as f:
                f.write(text)
        else:
            sys.stdout.write(text)
        return
    sources = []
    for sub in ("graphs", "linked"):
        d = run.path(sub)
        if os.path.isdir(d):
            sources += [os.path.join(d, n) for n in sorted(os.listdir(d)) if n.endswith(".json")]
    if not sources:
        raise DataError(f"nothing to export under {run.dir}")
    for src in sources:
        name = os.path.splitext(os.path.basename(src))[0]
        sub = os.path.basename(os.path.dirname(src))
        with open(run.out("export", sub, f"{name}.{args.format}"), "w") as f:
            f.write(export_one(src, args.format, args.directed))
    print(run.path("export"))


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset with ground truth"),
    "pairs": (cmd_pairs, "sample labelled frame pairs from training videos"),
    "train-sim": (cmd_train_sim, "train the same-zone scorer"),
    "build-graph": (cmd_build_graph, "build one zone graph per video"),
    "link": (cmd_link, "link nodes within each kitchen and across kitchens"),
    "train-affordance": (cmd_train_affordance, "train zone affordance classifiers"),
    "eval-affordance": (cmd_eval_affordance, "evaluate affordance classifiers (training missing ones)"),
    "train-anticipation": (cmd_train_anticipation, "train the anticipation model and baselines"),
    "eval-anticipation": (cmd_eval_anticipation, "evaluate anticipation over all horizons"),
    "export": (cmd_export, "export graphs as DOT or JSON"),
}


# --------------------------------------------------------------------------- #
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON configuration file; unknown keys are rejected")
    common.add_argument("--run-dir", default="run", help="directory holding all artifacts (default: run)")
    common.add_argument("--data", help="dataset manifest (default: <run-dir>/data/manifest.json)")
    common.add_argument("--seed", type=int, help="global seed used by every stage (default 0)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    common.add_argument("--threads", type=int, help="cap on worker threads of numerical libraries")

    parser = _Parser(prog="topoaff", description=__doc__.split("\n\n")[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    defaults = default_config()
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=helptext, description=helptext)
        for sec in COMMAND_SECTIONS[name]:
            group = p.add_argument_group(f"{sec} settings")
            for key, default in defaults[sec].items():
                dotted = f"{sec}.{key}"
                shown = json.dumps(default)
                group.add_argument(f"--{dotted}", dest=f"set__{sec}__{key}", metavar="VALUE",
                                   help=f"{HELP.get(dotted, key)} (default {shown})")
        if name in ("build-graph", "link"):
            p.add_argument("--split", choices=["train", "test"], help="restrict to one split (default: all)")
        if name == "pairs":
            p.add_argument("--correspondences", help="keypoint matches (JSON lines)")
        if name in ("train-affordance", "eval-affordance"):
            p.add_argument("--variant", action="append", choices=aff.VARIANTS,
                           help="variant to process; repeatable (default: affordance.variants)")
        if name == "eval-affordance":
            p.add_argument("--test-set", help="test frames with labels (JSON lines); default derives it "
                                              "from ground_truth.json for the test split")
            p.add_argument("--retrain", action="store_true", help="retrain even if checkpoints exist")
        if name == "export":
            p.add_argument("--graph", help="graph or linked-graph JSON; default exports the whole run")
            p.add_argument("--format", choices=["dot", "json"], default="dot")
            p.add_argument("--directed", action="store_true", help="keep edge directions in DOT output")
            p.add_argument("--out", help="output file (default stdout) when --graph is given")
    return parser


def effective_config(args) -> Dict[str, Any]:
    cfg = load_config_file(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for key, raw in vars(args).items():
        if not key.startswith("set__") or raw is None:
            continue
        _, sec, name = key.split("__", 2)
        try:
            cfg[sec][name] = _parse_value(raw, cfg[sec][name])
        except (ValueError, json.JSONDecodeError) as e:
            raise ConfigError(f"--{sec}.{name}: {e}") from None
    for sec in SECTIONS:
        section(cfg, sec)  # validate every block up front
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = effective_config(args)
        run = Run(args.run_dir, cfg, args.data)
        os.makedirs(run.dir, exist_ok=True)
        run.write_json(cfg, "config", f"{args.command}.json")
        fn = COMMANDS[args.command][0]
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                fn(run, args)
        else:
            fn(run, args)
        write_run_manifest(run.dir)
        return EXIT_OK
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, nn.CheckpointError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Domain types, dataset ingestion and frame-rate subsampling."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    video_id: str
    fps: float
    rows: np.ndarray

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise DataError(f"{self.video_id}: embedding must be a non-empty 2-D matrix")
        if not np.isfinite(rows).all():
            raise DataError(f"{self.video_id}: non-finite embedding entry")
        if not self.fps > 0:
            raise DataError(f"{self.video_id}: fps must be positive")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def num_frames(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class ClipAnnotation:
    video_id: str
    start_frame: int
    stop_frame: int
    verb_id: int
    noun_id: int

    def overlaps(self, start: int, stop: int) -> bool:
        return self.start_frame <= stop and start <= self.stop_frame

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "start_frame": self.start_frame,
            "stop_frame": self.stop_frame,
            "verb_id": self.verb_id,
            "noun_id": self.noun_id,
        }


@dataclass(frozen=True)
class InteractionVocab:
    verbs: Tuple[str, ...]
    nouns: Tuple[str, ...]
    interactions: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "verbs", tuple(self.verbs))
        object.__setattr__(self, "nouns", tuple(self.nouns))
        object.__setattr__(self, "interactions", tuple(tuple(p) for p in self.interactions))
        for name, seq in (("verb", self.verbs), ("noun", self.nouns), ("interaction", self.interactions)):
            if len(set(seq)) != len(seq):
                raise DataError(f"duplicate {name} in vocabulary")
        for v, n in self.interactions:
            if not (0 <= v < len(self.verbs) and 0 <= n < len(self.nouns)):
                raise DataError(f"interaction ({v}, {n}) outside vocabulary")
        object.__setattr__(self, "_index", {p: i for i, p in enumerate(self.interactions)})

    @property
    def num_verbs(self) -> int:
        return len(self.verbs)

    @property
    def num_nouns(self) -> int:
        return len(self.nouns)

    @property
    def num_interactions(self) -> int:
        return len(self.interactions)

    def interaction_id(self, verb_id: int, noun_id: int) -> int:
        try:
            return self._index[(verb_id, noun_id)]
        except KeyError:
            raise DataError(f"interaction ({verb_id}, {noun_id}) not in vocabulary") from None

    def to_json(self) -> dict:
        return {
            "verbs": list(self.verbs),
            "nouns": list(self.nouns),
            "interactions": [list(p) for p in self.interactions],
        }

    @classmethod
    def from_json(cls, d: dict) -> "InteractionVocab":
        return cls(d["verbs"], d["nouns"], [tuple(p) for p in d["interactions"]])


@dataclass(frozen=True)
class Dataset:
    videos: Dict[str, EmbeddingMatrix]
    annotations: Tuple[ClipAnnotation, ...]
    vocab: InteractionVocab
    kitchen_of: Dict[str, str]
    split_of: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        validate_dataset(self)

    @property
    def dim(self) -> int:
        return next(iter(self.videos.values())).dim

    def video_ids(self, split: Optional[str] = None) -> List[str]:
        ids = sorted(self.videos)
        if split is None:
            return ids
        return [v for v in ids if self.split_of.get(v, "train") == split]

    def clips(self, video_id: str) -> List[ClipAnnotation]:
        """Clips of one video, ordered by start frame."""
        out = [a for a in self.annotations if a.video_id == video_id]
        out.sort(key=lambda a: (a.start_frame, a.stop_frame))
        return out


def validate_dataset(ds: Dataset) -> None:
    if not ds.videos:
        raise DataError("dataset has no videos")
    dims = {m.dim for m in ds.videos.values()}
    if len(dims) != 1:
        raise DataError(f"dim mismatch across videos: {sorted(dims)}")
    for vid, m in ds.videos.items():
        if m.video_id != vid:
            raise DataError(f"video key {vid} does not match embedding id {m.video_id}")
        if vid not in ds.kitchen_of:
            raise DataError(f"no kitchen id for video {vid}")
    for a in ds.annotations:
        m = ds.videos.get(a.video_id)
        if m is None:
            raise DataError(f"annotation references unknown video {a.video_id}")
        if not (0 <= a.start_frame <= a.stop_frame < m.num_frames):
            raise DataError(
                f"annotation out of range: [{a.start_frame}, {a.stop_frame}] "
                f"for {a.video_id} with {m.num_frames} frames"
            )
        if not (0 <= a.verb_id < ds.vocab.num_verbs and 0 <= a.noun_id < ds.vocab.num_nouns):
            raise DataError(f"annotation label ({a.verb_id}, {a.noun_id}) outside vocabulary")
        ds.vocab.interaction_id(a.verb_id, a.noun_id)


# --------------------------------------------------------------------------- #
# Frame-rate subsampling


def subsample_stride(fps: float, target_fps: float) -> int:
    if target_fps <= 0:
        raise DataError("target_fps must be positive")
    if target_fps > fps:
        raise DataError(f"target_fps {target_fps} exceeds source fps {fps}")
    return max(1, int(round(fps / target_fps)))


def remap_frame(frame: int, stride: int, num_kept: int) -> int:
    """Index of the kept frame nearest to `frame`; ties go to the earlier one."""
    lo = frame // stride
    hi = lo + 1
    if hi >= num_kept or (frame - lo * stride) <= (hi * stride - frame):
        return min(lo, num_kept - 1)
    return hi


def subsample_fps(
    m: EmbeddingMatrix,
    target_fps: float,
    annotations: Iterable[ClipAnnotation] = (),
) -> Tuple[EmbeddingMatrix, List[ClipAnnotation]]:
    """Keep every stride-th frame from frame 0 and remap annotation indices."""
    stride = subsample_stride(m.fps, target_fps)
    rows = m.rows[::stride]
    out = EmbeddingMatrix(m.video_id, m.fps / stride, rows)
    n = rows.shape[0]
    remapped = []
    for a in annotations:
        if a.video_id != m.video_id:
            continue
        s = remap_frame(a.start_frame, stride, n)
        e = remap_frame(a.stop_frame, stride, n)
        remapped.append(replace(a, start_frame=s, stop_frame=max(s, e)))
    return out, remapped


def subsample_dataset(ds: Dataset, target_fps: float) -> Dataset:
    videos, anns = {}, []
    for vid, m in ds.videos.items():
        sub, a = subsample_fps(m, target_fps, [x for x in ds.annotations if x.video_id == vid])
        videos[vid] = sub
        anns.extend(a)
    return Dataset(videos, anns, ds.vocab, dict(ds.kitchen_of), dict(ds.split_of))


# --------------------------------------------------------------------------- #
# File formats


def write_embedding(m: EmbeddingMatrix, bin_path: str, header_path: Optional[str] = None) -> str:
    header_path = header_path or os.path.splitext(bin_path)[0] + ".json"
    m.rows.astype("<f4").tofile(bin_path)
    header = {"video_id": m.video_id, "num_frames": m.num_frames, "dim": m.dim, "fps": m.fps}
    with open(header_path, "w") as f:
        json.dump(header, f)
    return header_path


def read_embedding(bin_path: str, header_path: Optional[str] = None) -> EmbeddingMatrix:
    header_path = header_path or os.path.splitext(bin_path)[0] + ".json"
    for p in (bin_path, header_path):
        if not os.path.exists(p):
            raise DataError(f"missing file: {p}")
    with open(header_path) as f:
        h = json.load(f)
    raw = np.fromfile(bin_path, dtype="<f4")
    n, d = int(h["num_frames"]), int(h["dim"])
    if raw.size != n * d:
        raise DataError(f"{bin_path}: expected {n}x{d} floats, found {raw.size}")
    return EmbeddingMatrix(h["video_id"], float(h["fps"]), raw.reshape(n, d))


def write_annotations(anns: Iterable[ClipAnnotation], path: str) -> None:
    with open(path, "w") as f:
        for a in anns:
            f.write(json.dumps(a.to_json()) + "\n")


def read_annotations(path: str) -> List[ClipAnnotation]:
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(
                    ClipAnnotation(
                        str(d["video_id"]),
                        int(d["start_frame"]),
                        int(d["stop_frame"]),
                        int(d["verb_id"]),
                        int(d["noun_id"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad annotation ({e})") from None
    return out


def save_dataset(ds: Dataset, out_dir: str, extra: Optional[dict] = None) -> str:
    """Write embeddings, annotations and a manifest; returns the manifest path."""
    os.makedirs(os.path.join(out_dir, "embeddings"), exist_ok=True)
    videos = []
    for vid in sorted(ds.videos):
        rel = os.path.join("embeddings", f"{vid}.bin")
        write_embedding(ds.videos[vid], os.path.join(out_dir, rel))
        entry = {
            "video_id": vid,
            "embedding": rel,
            "header": os.path.splitext(rel)[0] + ".json",
            "kitchen": ds.kitchen_of[vid],
        }
        if vid in ds.split_of:
            entry["split"] = ds.split_of[vid]
        videos.append(entry)
    write_annotations(ds.annotations, os.path.join(out_dir, "annotations.jsonl"))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "videos": videos,
        "annotations": ["annotations.jsonl"],
        "vocab": ds.vocab.to_json(),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return path


def read_manifest(manifest_path: str) -> dict:
    if not os.path.exists(manifest_path):
        raise DataError(f"missing file: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    version = manifest.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise DataError(f"manifest schema version {version} != {SCHEMA_VERSION}")
    return manifest


def load_dataset(manifest_path: str, target_fps: Optional[float] = None) -> Dataset:
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    videos, kitchen_of, split_of = {}, {}, {}
    for entry in manifest["videos"]:
        header = entry.get("header")
        m = read_embedding(resolve(entry["embedding"]), resolve(header) if header else None)
        vid = entry.get("video_id", m.video_id)
        if vid in videos:
            raise DataError(f"duplicate video id {vid}")
        videos[vid] = m
        kitchen_of[vid] = str(entry["kitchen"])
        if "split" in entry:
            split_of[vid] = entry["split"]
    anns: List[ClipAnnotation] = []
    for p in manifest.get("annotations", []):
        anns.extend(read_annotations(resolve(p)))
    ds = Dataset(videos, anns, InteractionVocab.from_json(manifest["vocab"]), kitchen_of, split_of)
    logger.info("loaded %d videos, %d annotations from %s", len(videos), len(anns), manifest_path)
    if target_fps is not None:
        ds = subsample_dataset(ds, target_fps)
    return ds


def frames_in_clips(num_frames: int, clips: Sequence[ClipAnnotation]) -> np.ndarray:
    """Boolean mask of frames covered by at least one clip."""
    mask = np.zeros(num_frames, dtype=bool)
    for a in clips:
        mask[a.start_frame : a.stop_frame + 1] = True
    return mask


def ceil_div(a: int, b: int) -> int:
    return int(math.ceil(a / b))

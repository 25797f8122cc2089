"""Small numpy neural-network toolkit: MLPs with manual backprop, Adam,
masked binary cross entropy and the binary checkpoint format."""

from __future__ import annotations

import json
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

Params = Dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"TOPOAFF\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def relu(x):
    return np.maximum(x, 0)


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, prefix: str = "", dtype=np.float64) -> Params:
    """He-initialised dense layers ``{prefix}W{i}``, ``{prefix}b{i}``."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}W{i}"] = (rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[f"{prefix}b{i}"] = np.zeros(fan_out, dtype=dtype)
    return params


def mlp_depth(params: Params, prefix: str = "") -> int:
    n = 0
    while f"{prefix}W{n}" in params:
        n += 1
    return n


def mlp_forward(params: Params, x: np.ndarray, prefix: str = "", final_relu: bool = False):
    """Dense stack with ReLU between layers. Returns (output, cache)."""
    depth = mlp_depth(params, prefix)
    cache = [x]
    h = x
    for i in range(depth):
        h = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        if i < depth - 1 or final_relu:
            h = relu(h)
        cache.append(h)
    return h, cache


def mlp_backward(params: Params, cache: List[np.ndarray], grad_out: np.ndarray, prefix: str = "",
                 final_relu: bool = False, grads: Optional[Params] = None):
    """Backprop through `mlp_forward`. Accumulates into `grads`; returns (grads, grad_input)."""
    grads = {} if grads is None else grads
    depth = mlp_depth(params, prefix)
    g = grad_out
    for i in reversed(range(depth)):
        if i < depth - 1 or final_relu:
            g = g * (cache[i + 1] > 0)
        wk, bk = f"{prefix}W{i}", f"{prefix}b{i}"
        gw = cache[i].T @ g
        gb = g.sum(axis=0)
        grads[wk] = grads[wk] + gw if wk in grads else gw
        grads[bk] = grads[bk] + gb if bk in grads else gb
        g = g @ params[wk].T
    return grads, g


def bce_with_logits(z: np.ndarray, y: np.ndarray, mask: Optional[np.ndarray] = None):
    """Mean BCE over supervised entries, and its gradient w.r.t. the logits.

    Entries with mask 0 contribute nothing to loss or gradient. Returns 0 loss
    when nothing is supervised.
    """
    if mask is None:
        mask = np.ones_like(z)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    denom = mask.sum()
    if denom == 0:
        return 0.0, np.zeros_like(z)
    loss = float((per * mask).sum() / denom)
    grad = (sigmoid(z) - y) * mask / denom
    return loss, grad


class Adam:
    """Adam with L2 weight decay added to the gradient."""

    def __init__(self, params: Params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


def step_lr(base_lr: float, epoch: int, decay_epoch: Optional[int], factor: float) -> float:
    if decay_epoch is not None and epoch >= decay_epoch:
        return base_lr * factor
    return base_lr


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype) for k, v in params.items()}


# --------------------------------------------------------------------------- #
# Checkpoints: magic, uint32 header length, JSON header, raw little-endian arrays


def save_checkpoint(path: str, kind: str, params: Params, meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": CHECKPOINT_VERSION, "kind": kind, "meta": meta, "arrays": entries}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for raw in blobs:
            f.write(raw)


def checkpoint_kind(path: str) -> str:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(hlen)).get("kind", "")


def load_checkpoint(path: str, kind: Optional[str] = None) -> Tuple[Params, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('format_version')} != {CHECKPOINT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')}")
    params = {}
    for e in header["arrays"]:
        start = pos + e["offset"]
        arr = np.frombuffer(data[start : start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return params, header["meta"]

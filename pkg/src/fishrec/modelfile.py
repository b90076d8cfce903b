"""Versioned binary container for a trained pipeline.

Layout::

    magic (8 bytes) | version (u32 LE) | header length (u64 LE) | JSON header
    | raw little-endian array data | sha256 of everything before it (32 bytes)

The header is JSON with sorted keys; floats are written with ``repr`` so
they round-trip exactly, which makes save -> load -> save byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .classifier import HierarchyNode, SvmNode
from .config import PipelineConfig
from .descriptor import PcaModel
from .imaging import Rect
from .partmodel import ObjectiveBreakdown, PartModel
from .pipeline import TrainedPipeline

MAGIC = b"FSHRMDL\x00"
VERSION = 1


class ModelFormatError(ValueError):
    pass


class _Arrays:
    def __init__(self):
        self.items: list[tuple[str, np.ndarray]] = []

    def add(self, name: str, arr) -> str:
        self.items.append((name, np.ascontiguousarray(arr, dtype="<f8")))
        return name


def _tree_to_json(node: HierarchyNode, arrays: _Arrays, counter: list[int]) -> dict:
    if node.is_leaf:
        return {"species": list(node.species)}
    nid = counter[0]
    counter[0] += 1
    s = node.svm
    return {
        "species": list(node.species),
        "svm": {
            "sv": arrays.add(f"node{nid}.sv", s.sv),
            "coef": arrays.add(f"node{nid}.coef", s.coef),
            "margins": arrays.add(f"node{nid}.margins", s.train_margins),
            "rho": float(s.rho), "gamma": float(s.gamma),
            "c_pos": float(s.c_pos), "c_neg": float(s.c_neg),
            "threshold": float(s.threshold), "iterations": int(s.iterations),
            "gap": float(s.gap),
        },
        "pos": _tree_to_json(node.pos, arrays, counter),
        "neg": _tree_to_json(node.neg, arrays, counter),
    }


def _tree_from_json(d: dict, arrays: dict) -> HierarchyNode:
    if "svm" not in d:
        return HierarchyNode(list(d["species"]))
    s = d["svm"]
    svm = SvmNode(arrays[s["sv"]], arrays[s["coef"]], s["rho"], s["gamma"], s["c_pos"],
                  s["c_neg"], s["threshold"], arrays[s["margins"]], s["iterations"], s["gap"])
    return HierarchyNode(list(d["species"]), svm, _tree_from_json(d["pos"], arrays),
                         _tree_from_json(d["neg"], arrays))


def to_bytes(trained: TrainedPipeline) -> bytes:
    arrays = _Arrays()
    m = trained.model
    part = {
        "k": m.k,
        "names": list(m.names),
        "color": bool(m.color),
        "iterations": int(m.iterations),
        "converged": bool(m.converged),
        "history": [{k: float(v) for k, v in h.as_dict().items()} for h in m.history],
        "P": arrays.add("P", m.P),
        "reference": arrays.add("reference", m.reference),
        "rects": arrays.add("rects", np.array([[r.as_array() for r in rs] for rs in m.rects])
                            .reshape(len(m.rects), m.k, 4)),
        "pca_mean": arrays.add("pca.mean", m.pca.mean),
        "pca_basis": arrays.add("pca.basis", m.pca.basis),
    }
    tree = _tree_to_json(trained.tree, arrays, [0])
    offset = 0
    index = []
    for name, arr in arrays.items:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "format": "fishrec-model",
        "config": trained.config.as_dict(),
        "c": float(trained.c),
        "cv_scores": {repr(float(k)): float(v) for k, v in trained.cv_scores.items()},
        "part_model": part,
        "tree": tree,
        "arrays": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join([MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes]
                    + [arr.tobytes() for _, arr in arrays.items])
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes) -> TrainedPipeline:
    if len(data) < len(MAGIC) + 12 + 32 or data[:len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic bytes)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise ModelFormatError(f"unsupported model format version {version}, this build reads {VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("checksum mismatch, model file is corrupted")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen])
    base = start + hlen
    arrays = {}
    for a in header["arrays"]:
        raw = body[base + a["offset"]: base + a["offset"] + a["nbytes"]]
        arrays[a["name"]] = np.frombuffer(raw, dtype="<f8").reshape(a["shape"]).astype(np.float64)
    cfg = PipelineConfig.from_dict(header["config"])
    p = header["part_model"]
    rects = [[Rect(*row) for row in img] for img in arrays[p["rects"]].tolist()]
    model = PartModel(
        k=p["k"], P=arrays[p["P"]], rects=rects, names=list(p["names"]),
        pca=PcaModel(arrays[p["pca_mean"]], arrays[p["pca_basis"]]),
        config=cfg.learn_config(), reference=arrays[p["reference"]], color=p["color"],
        history=[ObjectiveBreakdown(**h) for h in p["history"]],
        iterations=p["iterations"], converged=p["converged"])
    tree = _tree_from_json(header["tree"], arrays)
    scores = {float(k): v for k, v in header["cv_scores"].items()}
    return TrainedPipeline(model, tree, header["c"], scores, cfg)


def save_model(trained: TrainedPipeline, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(trained))


def load_model(path: str | Path) -> TrainedPipeline:
    return from_bytes(Path(path).read_bytes())

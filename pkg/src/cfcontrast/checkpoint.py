"""Deterministic binary checkpoints.

Layout::

    b"CFCK" | u16 version | u32 header length | JSON header | raw tensor bytes

The header is canonical JSON (sorted keys) holding the format tag, world
hash, domain list, config hash, free-form metadata and a tensor table
(name, dtype, shape, offset).  Tensors are stored little-endian in sorted
name order, so identical weights and metadata give identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()


def save_checkpoint(path, tag: str, state: dict, *, world_hash: str = "", domains=(),
                    config_hash: str = "", metadata: dict | None = None) -> str:
    """Write a checkpoint and return the sha256 of its bytes."""
    table, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy() if torch.is_tensor(state[name]) else np.asarray(state[name])
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": tag,
        "version": VERSION,
        "world_hash": world_hash,
        "domains": [int(d) for d in domains],
        "config_hash": config_hash,
        "metadata": metadata or {},
        "tensors": table,
    }
    hb = _canonical(header)
    data = MAGIC + struct.pack("<HI", VERSION, len(hb)) + hb + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10 or head[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<HI", head[4:])
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version} unsupported (expected {VERSION})")
        return json.loads(fh.read(n))


def load_checkpoint(path, expect_tag: str | None = None) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} unsupported (expected {VERSION})")
    header = json.loads(data[10:10 + n])
    if expect_tag is not None and header["format"] != expect_tag:
        raise CheckpointError(f"{path}: holds {header['format']!r}, expected {expect_tag!r}")
    base = 10 + n
    state = {}
    for t in header["tensors"]:
        raw = data[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        state[t["name"]] = torch.from_numpy(arr)
    return header, state


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# typed wrappers


def save_mechanism(path, mechanism, spec, config_hash: str = "") -> str:
    from .hvae import HVAE

    assert isinstance(mechanism.model, HVAE)
    meta = {
        "hvae_config": asdict(mechanism.model.config),
        "cardinalities": mechanism.model.cardinalities,
        "graph": mechanism.graph.to_dict(),
        "meta": mechanism.meta,
    }
    return save_checkpoint(path, "hvae", mechanism.model.state_dict(), world_hash=spec.world_hash(),
                           domains=range(spec.num_domains), config_hash=config_hash, metadata=meta)


def load_mechanism(path, spec=None):
    from .hvae import HVAE, HvaeConfig, HvaeMechanism
    from .scm import CausalGraph

    header, state = load_checkpoint(path, "hvae")
    if spec is not None and header["world_hash"] != spec.world_hash():
        raise CheckpointError(f"{path}: trained on world {header['world_hash']}, not {spec.world_hash()}")
    m = header["metadata"]
    model = HVAE(HvaeConfig(**m["hvae_config"]), m["cardinalities"])
    model.load_state_dict(state)
    model.eval()
    return HvaeMechanism(model, CausalGraph.from_dict(m["graph"]), m.get("meta", {}))


def save_encoder(path, checkpoint, spec) -> str:
    meta = dict(checkpoint.metadata)
    meta["history"] = checkpoint.history
    return save_checkpoint(path, "encoder", checkpoint.model.state_dict(), world_hash=spec.world_hash(),
                           domains=range(spec.num_domains), config_hash=meta.get("config_hash", ""),
                           metadata=meta)


def load_encoder(path):
    from .models import EncoderConfig, EncoderModel
    from .pretrain import EncoderCheckpoint

    header, state = load_checkpoint(path, "encoder")
    meta = dict(header["metadata"])
    history = meta.pop("history", [])
    model = EncoderModel(EncoderConfig(**meta["config"]["encoder"]), meta["objective"])
    model.load_state_dict(state)
    model.eval()
    return EncoderCheckpoint(model, meta, history)


def save_classifier(path, classifier, spec) -> str:
    meta = {"cardinalities": classifier.cardinalities, "width": classifier.heads[next(iter(classifier.heads))].in_features // 4}
    return save_checkpoint(path, "classifier", classifier.state_dict(), world_hash=spec.world_hash(),
                           domains=range(spec.num_domains), metadata=meta)


def load_classifier(path):
    from .models import ParentClassifier

    header, state = load_checkpoint(path, "classifier")
    m = header["metadata"]
    clf = ParentClassifier(m["cardinalities"], m["width"])
    clf.load_state_dict(state)
    clf.eval()
    return clf

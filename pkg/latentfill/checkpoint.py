"""Checkpoint container shared by score networks, the VAE, the classifier and raw arrays."""

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import BadMagic, Truncated

logger = logging.getLogger(__name__)

MAGIC = b"LFCK"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sII")  # magic, format version, JSON length


@dataclass
class ModelCheckpoint:
    """
    Named float32 arrays plus a JSON metadata block.

    `kind` is one of "score", "vae", "classifier" or "arrays". Metadata holds
    configs, seed, loss trace and anything a loader needs to rebuild the model.
    """

    kind: str
    metadata: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_module(cls, kind: str, module: torch.nn.Module, metadata: dict | None = None) -> "ModelCheckpoint":
        tensors = {
            name: value.detach().cpu().to(torch.float32).numpy().copy()
            for name, value in module.state_dict().items()
        }
        return cls(kind, dict(metadata or {}), tensors)

    def load_into(self, module: torch.nn.Module) -> torch.nn.Module:
        """Copy the stored parameters into a freshly built module of the same layout."""
        state = module.state_dict()
        restored = {}
        for name, reference in state.items():
            restored[name] = torch.from_numpy(self.tensors[name]).to(dtype=reference.dtype)
        module.load_state_dict(restored)
        return module


def save_checkpoint(ckpt: ModelCheckpoint, path: str):
    """
    Write a checkpoint atomically.

    Layout: magic "LFCK", u32 version, u32 JSON length, JSON header (kind,
    metadata, tensor directory of name/shape/offset), then every tensor as
    little-endian float32.

    Args:
        ckpt: Checkpoint to write
        path: Destination file
    """
    directory = []
    offset = 0
    payloads = []
    for name, array in ckpt.tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        directory.append({"name": name, "shape": list(data.shape), "offset": offset})
        payloads.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "kind": ckpt.kind, "metadata": ckpt.metadata, "tensors": directory},
        sort_keys=True,
    ).encode("utf-8")

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for payload in payloads:
            f.write(payload)
    os.replace(tmp_path, path)
    logger.info(f"Saved {ckpt.kind} checkpoint with {len(directory)} tensors to {path}")


def load_checkpoint(path: str) -> ModelCheckpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        BadMagic: Not a checkpoint file, or an unknown format version
        Truncated: Header or tensor data shorter than declared
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < PREAMBLE.size:
        raise Truncated(f"{path}: {len(blob)} bytes, checkpoint preamble needs {PREAMBLE.size}")
    magic, version, header_len = PREAMBLE.unpack(blob[:PREAMBLE.size])
    if magic != MAGIC:
        raise BadMagic(f"{path}: magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise BadMagic(f"{path}: format version {version} at offset 4, expected {FORMAT_VERSION}")
    data_start = PREAMBLE.size + header_len
    if len(blob) < data_start:
        raise Truncated(f"{path}: JSON header runs past end of file (offset {PREAMBLE.size})")
    header = json.loads(blob[PREAMBLE.size:data_start].decode("utf-8"))

    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = data_start + entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise Truncated(f"{path}: tensor '{entry['name']}' needs bytes {start}..{end}, file has {len(blob)}")
        tensors[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    return ModelCheckpoint(header["kind"], header["metadata"], tensors)


def save_arrays(path: str, metadata: dict | None = None, **arrays: np.ndarray):
    """Store raw arrays (samples, imputations) in the checkpoint container."""
    save_checkpoint(ModelCheckpoint("arrays", dict(metadata or {}), {k: np.asarray(v) for k, v in arrays.items()}), path)

"""
Checkpoint files.

Layout::

    b"MARSCKPT" | u64 little-endian header length | JSON header | tensor data

The header carries the format version, the model config, a table of named
tensors (shape, byte offset, byte length into the data section), optional
training state and a sha256 digest over the header (digest field removed)
plus the data section. Tensor data is little-endian float32.
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .detector import ModelConfig, build_model
from .errors import CheckpointError

MAGIC = b"MARSCKPT"
FORMAT_VERSION = 1
OPTIM_PREFIX = "optimizer."


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    train_state: Optional[dict] = None
    format_version: int = FORMAT_VERSION

    def parameter_names(self):
        return sorted(k for k in self.tensors if not k.startswith(OPTIM_PREFIX))


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def model_tensors(model):
    return {k: v for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")}


def to_bytes(ckpt: Checkpoint):
    table, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    header = {
        "format_version": ckpt.format_version,
        "model_config": ckpt.config.to_dict(),
        "tensors": table,
        "train_state": ckpt.train_state,
    }
    header["digest"] = "sha256:" + hashlib.sha256(_canonical(header) + data).hexdigest()
    hbytes = _canonical(header)
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + data


def from_bytes(blob, source="<bytes>"):
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic)")
    try:
        (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(blob[start:start + hlen])
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{source}: unreadable header ({e})") from e
    data = blob[start + hlen:]
    digest = header.pop("digest", None)
    actual = "sha256:" + hashlib.sha256(_canonical(header) + data).hexdigest()
    if digest != actual:
        raise CheckpointError(f"{source}: digest mismatch (file says {digest}, content hashes to {actual})")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {header.get('format_version')}")
    tensors = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"]:entry["offset"] + entry["length"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    cfg = ModelConfig.from_dict(header["model_config"])
    return Checkpoint(cfg, tensors, header.get("train_state"), header["format_version"])


def write_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(to_bytes(ckpt))


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(blob, str(path))


def make_checkpoint(model, optimizer=None, epoch=None) -> Checkpoint:
    tensors = {k: v.detach().cpu().numpy() for k, v in model_tensors(model).items()}
    train_state = None
    if optimizer is not None or epoch is not None:
        train_state = {"epoch": epoch, "steps": {}}
        if optimizer is not None:
            names = {id(p): n for n, p in model.named_parameters()}
            for group in optimizer.param_groups:
                for p in group["params"]:
                    st = optimizer.state.get(p)
                    if not st:
                        continue
                    n = names[id(p)]
                    train_state["steps"][n] = float(st["step"])
                    tensors[f"{OPTIM_PREFIX}exp_avg.{n}"] = st["exp_avg"].detach().cpu().numpy()
                    tensors[f"{OPTIM_PREFIX}exp_avg_sq.{n}"] = st["exp_avg_sq"].detach().cpu().numpy()
    return Checkpoint(model.cfg, tensors, train_state)


def save_checkpoint(path, model, optimizer=None, epoch=None):
    write_checkpoint(path, make_checkpoint(model, optimizer, epoch))


def load_model(path_or_ckpt, seed=0):
    """Rebuild the model a checkpoint describes; returns (model, checkpoint)."""
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else read_checkpoint(path_or_ckpt)
    model = build_model(ckpt.config, seed)
    expected = model_tensors(model)
    stored = set(ckpt.parameter_names())
    missing, extra = sorted(set(expected) - stored), sorted(stored - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter table does not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    state = {}
    for name, ref in expected.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{name}: stored shape {arr.shape} vs expected {tuple(ref.shape)}")
        state[name] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(state, strict=False)
    model.eval()
    return model, ckpt


def restore_optimizer(optimizer, model, ckpt: Checkpoint):
    if not ckpt.train_state:
        return optimizer
    for n, p in model.named_parameters():
        key = f"{OPTIM_PREFIX}exp_avg.{n}"
        if key not in ckpt.tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(ckpt.train_state["steps"][n]),
            "exp_avg": torch.from_numpy(ckpt.tensors[key]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"{OPTIM_PREFIX}exp_avg_sq.{n}"]).to(p.dtype),
        }
    return optimizer

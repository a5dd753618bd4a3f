"""Single-file model checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"EIANETCK"
    u32       format version
    u64       header length H
    H bytes   header JSON (UTF-8, sorted keys)
    blocks    for each entry of header["blocks"], in order:
                  u64 byte length L, then L bytes of f64le data (C order)

Block order is fixed: encoder parameters in ``EncoderModel.parameters()``
order (convolutions, attention, projection), then ``classifier.matrix``,
then one ``momentum.<name>`` block per optimiser buffer in parameter order.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .config import RunConfig
from .encoder import EncoderModel, Head, LinearClassifier, head_matrix, init_encoder
from .errors import FormatError
from .etf import EtfClassifier
from .tensor import Tensor

MAGIC = b"EIANETCK"
CHECKPOINT_VERSION = 1
CLASSIFIER_BLOCK = "classifier.matrix"
MOMENTUM_PREFIX = "momentum."


@dataclass
class Checkpoint:
    config: RunConfig
    model: EncoderModel
    head: Head
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    phase: str = "source"

    def to_bytes(self) -> bytes:
        return encode(self)

    def equals(self, other: "Checkpoint") -> bool:
        return self.to_bytes() == other.to_bytes()


def _blocks(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    params = ckpt.model.parameters()
    out = [(name, t.data) for name, t in params.items()]
    out.append((CLASSIFIER_BLOCK, head_matrix(ckpt.head).data))
    order = list(params) + ["classifier.weight"]
    unknown = set(ckpt.momentum) - set(order)
    if unknown:
        raise FormatError(f"momentum buffers for unknown parameters: {sorted(unknown)}")
    out.extend((MOMENTUM_PREFIX + n, ckpt.momentum[n]) for n in order if n in ckpt.momentum)
    return out


def encode(ckpt: Checkpoint) -> bytes:
    blocks = _blocks(ckpt)
    head = ckpt.head
    classifier = (
        {"kind": "etf", "seed": int(head.seed), "logit_scale": float(head.logit_scale)}
        if isinstance(head, EtfClassifier)
        else {"kind": "linear", "logit_scale": float(head.logit_scale)}
    )
    header = {
        "format": "eianet-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": int(ckpt.epoch),
        "phase": ckpt.phase,
        "classifier": classifier,
        "blocks": [{"name": n, "shape": [int(s) for s in a.shape]} for n, a in blocks],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(raw)))
    buf.write(raw)
    for _, a in blocks:
        data = np.ascontiguousarray(a, dtype="<f8").tobytes()
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    return buf.getvalue()


def decode(payload: bytes) -> Checkpoint:
    """Inverse of :func:`encode`.

    Raises:
        FormatError: bad magic, unsupported version, truncated or inconsistent blocks.
    """
    view = memoryview(payload)
    if bytes(view[:8]) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(view) < 20:
        raise FormatError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<IQ", view, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 20 + hlen
    if pos > len(view):
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(bytes(view[20:pos]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc

    arrays: Dict[str, np.ndarray] = {}
    for spec in header["blocks"]:
        if pos + 8 > len(view):
            raise FormatError(f"truncated before block {spec['name']!r}")
        (length,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        shape = tuple(spec["shape"])
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if length != expected or pos + length > len(view):
            raise FormatError(
                f"block {spec['name']!r}: expected {expected} bytes, header says {length}, "
                f"{len(view) - pos} available"
            )
        arrays[spec["name"]] = np.frombuffer(view[pos : pos + length], dtype="<f8").astype(np.float64).reshape(shape)
        pos += length
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last block")

    cfg = RunConfig.from_dict(header["config"])
    model = init_encoder(cfg, cfg.seed)
    for name, t in model.parameters().items():
        if name not in arrays:
            raise FormatError(f"missing block {name!r}")
        if arrays[name].shape != t.data.shape:
            raise FormatError(f"block {name!r} has shape {arrays[name].shape}, model expects {t.data.shape}")
        t.data = arrays[name].copy()

    matrix = arrays[CLASSIFIER_BLOCK]
    info = header["classifier"]
    if info["kind"] == "etf":
        E = Tensor(matrix.copy())
        E.data.setflags(write=False)
        head: Head = EtfClassifier(E=E, K=matrix.shape[1], d=matrix.shape[0], seed=info["seed"], logit_scale=info["logit_scale"])
    else:
        W = Tensor(matrix.copy(), requires_grad=True)
        head = LinearClassifier(W=W, K=matrix.shape[1], d=matrix.shape[0], logit_scale=info.get("logit_scale", cfg.logit_scale))

    momentum = {n[len(MOMENTUM_PREFIX):]: a.copy() for n, a in arrays.items() if n.startswith(MOMENTUM_PREFIX)}
    return Checkpoint(cfg, model, head, momentum, int(header["epoch"]), header.get("phase", "source"))


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(ckpt))
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return decode(Path(path).read_bytes())


def read_header(path: Union[str, Path]) -> dict:
    """Header JSON only; cheap inspection without materialising blocks."""
    with open(path, "rb") as fh:
        head = fh.read(20)
        if head[:8] != MAGIC or len(head) < 20:
            raise FormatError("not a checkpoint file (bad magic)")
        _, hlen = struct.unpack_from("<IQ", head, 8)
        return json.loads(fh.read(hlen).decode("utf-8"))


__all__ = ["Checkpoint", "encode", "decode", "save_checkpoint", "load_checkpoint", "read_header", "MAGIC", "CHECKPOINT_VERSION"]

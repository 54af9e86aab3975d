"""SEPNORM1 checkpoint files.

Layout (little-endian)::

    b"SEPNORM1"
    u32 header_len, header_len bytes of UTF-8 JSON (sorted keys):
        {"version": 1, "encoder": {...}, "objective": {...}, "step": int, "rng": {...}}
    u32 record_count
    per record: u32 name_len, name (UTF-8), u32 ndim, ndim * u32 extents,
                prod(extents) float64 values

Records hold every encoder tensor and BN buffer, then the decoder's tensors
under a ``decoder.`` prefix, all in model order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import Encoder, EncoderConfig
from .objectives import Decoder, ObjectiveConfig

MAGIC = b"SEPNORM1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    encoder_config: dict
    objective_config: dict
    step: int
    rng_state: dict | None
    tensors: dict[str, np.ndarray]


def model_tensors(encoder: Encoder, decoder: Decoder | None = None) -> dict[str, np.ndarray]:
    out = {k: t.data for k, t in encoder.named_parameters().items()}
    out.update({k: getattr(p, attr) for k, (p, attr) in encoder.buffers().items()})
    if decoder is not None:
        out.update({f"decoder.{k}": t.data for k, t in decoder.named_parameters().items()})
    return out


def encode_checkpoint(ck: Checkpoint) -> bytes:
    header = json.dumps({"version": VERSION, "encoder": ck.encoder_config, "objective": ck.objective_config,
                         "step": ck.step, "rng": ck.rng_state}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(ck.tensors))]
    for name, arr in ck.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        bname = name.encode()
        parts.append(struct.pack("<I", len(bname)) + bname)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a SEPNORM1 checkpoint")
    pos = 8
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after the last record")
    return Checkpoint(header["encoder"], header["objective"], header["step"], header["rng"], tensors)


def save(path: str | Path, encoder: Encoder, decoder: Decoder | None, objective: ObjectiveConfig,
         step: int, rng_state: dict | None) -> None:
    ck = Checkpoint(encoder.cfg.to_dict(), objective.to_dict(), step, rng_state, model_tensors(encoder, decoder))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    tmp.replace(path)


def read(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def restore(ck: Checkpoint, expect: EncoderConfig | None = None) -> tuple[Encoder, Decoder]:
    """Rebuild the encoder/decoder pair; reject a checkpoint written for a different config."""
    cfg = EncoderConfig.from_dict(ck.encoder_config)
    if expect is not None and cfg.to_dict() != expect.to_dict():
        raise CheckpointError(f"checkpoint encoder config {ck.encoder_config} does not match {expect.to_dict()}")
    obj = ObjectiveConfig(**ck.objective_config)
    encoder = Encoder(cfg, allow_zero_depth=True)
    decoder = Decoder(cfg, obj, seed=cfg.seed)
    load_into(ck.tensors, encoder, decoder)
    return encoder, decoder


def load_into(tensors: dict[str, np.ndarray], encoder: Encoder, decoder: Decoder | None = None) -> None:
    expected = model_tensors(encoder, decoder)
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"tensor names differ from the model: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, arr in expected.items():
        if arr.shape != tensors[k].shape:
            raise CheckpointError(f"{k}: shape {tensors[k].shape} != model {arr.shape}")
    params = encoder.named_parameters()
    dec_params = decoder.named_parameters() if decoder is not None else {}
    for k, (p, attr) in encoder.buffers().items():
        setattr(p, attr, tensors[k].copy())
    for k, v in tensors.items():
        if k in params:
            params[k].data = v.copy()
        elif k.startswith("decoder."):
            dec_params[k[len("decoder."):]].data = v.copy()

"""Binary checkpoint format.

Layout (little-endian)::

    "PCKP" | version u16 | descriptor: u32 length + UTF-8 JSON
    | parameter table | optimizer-state table | CRC-32 of all preceding bytes (u32)

A table is ``u32 count`` followed by entries of
``u16 name length | name | u8 ndim | u32 dims... | f32 payload``.
The whole file is verified before anything is decoded.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, IntegrityError
from .lstm import BiLstmConfig, BiLstmRegressor
from .resnet import ResNetEmbed, ResNetEmbedConfig

MAGIC = b"PCKP"
VERSION = 1


@dataclass
class ModelCheckpoint:
    descriptor: dict
    params: dict
    optimizer_state: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def epoch(self) -> int:
        return int(self.descriptor.get("epoch", 0))

    @property
    def seed(self) -> int:
        return int(self.descriptor.get("seed", 0))


def _pack_table(tensors: dict) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise IntegrityError("checkpoint ends mid-record")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def table(self) -> dict:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    desc = json.dumps(ckpt.descriptor, sort_keys=True).encode("utf-8")
    body = b"".join([
        MAGIC, struct.pack("<H", ckpt.version),
        struct.pack("<I", len(desc)), desc,
        _pack_table(ckpt.params), _pack_table(ckpt.optimizer_state),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> ModelCheckpoint:
    if blob[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(blob) < 10:
        raise IntegrityError("checkpoint truncated inside its header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint checksum mismatch (truncated or corrupted file)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    r = _Reader(body)
    r.take(6)
    (dlen,) = r.unpack("<I")
    try:
        descriptor = json.loads(r.take(dlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable architecture descriptor: {exc}") from None
    params = r.table()
    opt_state = r.table()
    if r.pos != len(body):
        raise IntegrityError("trailing bytes after optimizer table")
    return ModelCheckpoint(descriptor, params, opt_state, version)


def make_checkpoint(model, optimizer=None, epoch=0, seed=0, extra=None, extra_tensors=None) -> ModelCheckpoint:
    descriptor = dict(model.descriptor())
    descriptor.update(epoch=int(epoch), seed=int(seed))
    if optimizer is not None:
        descriptor["optimizer"] = {"kind": type(optimizer).__name__, "t": optimizer.t, "lr": optimizer.lr}
    if extra:
        descriptor["extra"] = extra
    params = model.state_dict()
    for name, arr in (extra_tensors or {}).items():
        params[f"extra/{name}"] = np.asarray(arr)
    opt_state = optimizer.state_dict() if optimizer is not None else {}
    return ModelCheckpoint(descriptor, params, opt_state)


def save_checkpoint(path, model=None, optimizer=None, epoch=0, seed=0, extra=None,
                    extra_tensors=None, checkpoint: ModelCheckpoint | None = None) -> ModelCheckpoint:
    ckpt = checkpoint or make_checkpoint(model, optimizer, epoch, seed, extra, extra_tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    return ckpt


def load_checkpoint(path) -> ModelCheckpoint:
    return decode_checkpoint(Path(path).read_bytes())


def build_model(ckpt: ModelCheckpoint, dtype=np.float32):
    """Instantiate the architecture in the descriptor and load its tensors."""
    desc = ckpt.descriptor
    kind = desc.get("kind")
    if kind == "resnet_embed":
        model = ResNetEmbed(ResNetEmbedConfig(**desc["config"]), desc["n_bins"], dtype=dtype)
    elif kind == "bilstm":
        model = BiLstmRegressor(BiLstmConfig(**desc["config"]), desc["input_dim"], dtype=dtype)
    else:
        raise IntegrityError(f"unknown model kind {kind!r} in checkpoint")
    model.load_state_dict({k: v for k, v in ckpt.params.items() if not k.startswith("extra/")})
    return model.eval()


def extra_tensors(ckpt: ModelCheckpoint) -> dict:
    return {k[len("extra/"):]: v for k, v in ckpt.params.items() if k.startswith("extra/")}

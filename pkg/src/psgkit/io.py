"""Binary containers: ``.psgc`` corpora and model checkpoints.

Corpus layout (all integers little-endian)::

    b"PSGC" | u32 version | u32 manifest_len | manifest JSON | u32 crc(manifest)
    then one record per scene:
    u32 record_len | record bytes | u32 crc(record_len + record bytes)

    record = u16 id_len | scene_id utf-8 | u32 H | u32 W | u32 C | u32 n
             | f64[H*W*C] features (row-major)
             | n x (u32 run_count | u32[run_count] runs)
             | u16[n] labels
             | u32 t | t x (u16 s, u16 o, u16 p)      annotated triplets
             | u32 h | h x (u16 s, u16 o, u16 p)      hidden (ambiguity record)

Checkpoint layout::

    b"PSGK" | u32 version | u32 header_len | header JSON | u32 crc(header)
    | u32 count | count x (u32 record_len | record | u32 crc)

    record = u16 name_len | name | u8 ndim | u32[ndim] shape | f64[...] data
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .rle import RleMask, decode_rle, encode_rle
from .scene import Scene, SceneGraph

CORPUS_MAGIC = b"PSGC"
CKPT_MAGIC = b"PSGK"
VERSION = 1


class FormatError(ValueError):
    """Raised for any malformed, corrupted or incompatible file."""


def _crc(b: bytes) -> int:
    return zlib.crc32(b) & 0xFFFFFFFF


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf = buf
        self.pos = 0
        self.where = where

    def take(self, k: int) -> bytes:
        if k < 0 or self.pos + k > len(self.buf):
            raise FormatError(f"{self.where}: truncated data at byte {self.pos}")
        out = self.buf[self.pos:self.pos + k]
        self.pos += k
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _write_header(out: io.BytesIO, magic: bytes, meta: dict) -> None:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out.write(magic)
    out.write(struct.pack("<II", VERSION, len(blob)))
    out.write(blob)
    out.write(struct.pack("<I", _crc(blob)))


def _read_header(r: _Reader, magic: bytes) -> dict:
    if r.take(4) != magic:
        raise FormatError(f"{r.where}: bad magic, not a {magic.decode()} file")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{r.where}: unsupported version {version} (expected {VERSION})")
    blob = r.take(r.u32())
    if r.u32() != _crc(blob):
        raise FormatError(f"{r.where}: header checksum mismatch")
    try:
        return json.loads(blob)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{r.where}: header is not valid JSON") from e


def _pack_triplets(ts) -> bytes:
    return struct.pack("<I", len(ts)) + b"".join(struct.pack("<HHH", *t) for t in ts)


def _unpack_triplets(r: _Reader) -> tuple:
    k = r.u32()
    return tuple(tuple(int(v) for v in r.unpack("HHH")) for _ in range(k))


def encode_scene(scene: Scene) -> bytes:
    H, W, C = scene.features.shape
    sid = scene.scene_id.encode()
    parts = [struct.pack("<H", len(sid)), sid, struct.pack("<IIII", H, W, C, scene.n),
             np.ascontiguousarray(scene.features, dtype="<f8").tobytes()]
    for m in scene.masks:
        runs = encode_rle(m).runs
        parts.append(struct.pack("<I", len(runs)))
        parts.append(np.asarray(runs, dtype="<u4").tobytes())
    parts.append(np.asarray(scene.labels, dtype="<u2").tobytes())
    parts.append(_pack_triplets(scene.triplets))
    parts.append(_pack_triplets(scene.hidden))
    return b"".join(parts)


def decode_scene(buf: bytes, where: str = "record") -> Scene:
    r = _Reader(buf, where)
    sid = r.take(r.unpack("H")[0]).decode("utf-8", errors="strict")
    H, W, C, n = r.unpack("IIII")
    feats = np.frombuffer(r.take(8 * H * W * C), dtype="<f8").astype(np.float64).reshape(H, W, C)
    masks = np.zeros((n, H, W), dtype=bool)
    for k in range(n):
        cnt = r.u32()
        runs = np.frombuffer(r.take(4 * cnt), dtype="<u4")
        masks[k] = decode_rle(RleMask(H, W, tuple(int(x) for x in runs)))
    labels = np.frombuffer(r.take(2 * n), dtype="<u2").astype(np.int64)
    triplets = _unpack_triplets(r)
    hidden = _unpack_triplets(r)
    if not r.done():
        raise FormatError(f"{where}: trailing bytes in scene record")
    return Scene(sid, feats, masks, labels, SceneGraph(triplets), hidden)


def dump_corpus(scenes, config: dict | None = None) -> bytes:
    records = [encode_scene(s) for s in scenes]
    index, offset = [], 0
    for s, rec in zip(scenes, records):
        index.append({"scene_id": s.scene_id, "offset": offset, "length": len(rec)})
        offset += len(rec) + 8
    out = io.BytesIO()
    _write_header(out, CORPUS_MAGIC, {"config": config, "scenes": index})
    for rec in records:
        head = struct.pack("<I", len(rec))
        out.write(head)
        out.write(rec)
        out.write(struct.pack("<I", _crc(head + rec)))
    return out.getvalue()


def parse_corpus(buf: bytes, where: str = "corpus") -> tuple[list[Scene], dict]:
    r = _Reader(buf, where)
    manifest = _read_header(r, CORPUS_MAGIC)
    try:
        index = manifest["scenes"]
        ids = [e["scene_id"] for e in index]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{where}: manifest lacks a scene index") from e
    scenes = []
    for k, sid in enumerate(ids):
        ctx = f"{where}: scene {sid!r}"
        head = r.take(4)
        (length,) = struct.unpack("<I", head)
        rec = r.take(length)
        if r.u32() != _crc(head + rec):
            raise FormatError(f"{ctx}: checksum mismatch")
        try:
            scene = decode_scene(rec, ctx)
        except (struct.error, UnicodeDecodeError, ValueError) as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"{ctx}: {e}") from e
        if scene.scene_id != sid:
            raise FormatError(f"{ctx}: record id {scene.scene_id!r} disagrees with manifest")
        scenes.append(scene)
    if not r.done():
        raise FormatError(f"{where}: trailing bytes after {len(ids)} scenes")
    return scenes, manifest.get("config") or {}


def save_corpus(scenes, path, config: dict | None = None) -> None:
    Path(path).write_bytes(dump_corpus(list(scenes), config))


def load_corpus(path) -> tuple[list[Scene], dict]:
    """Scenes and the generator config stored with them."""
    p = Path(path)
    return parse_corpus(p.read_bytes(), where=str(p))


# checkpoints


def dump_checkpoint(params: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    out = io.BytesIO()
    _write_header(out, CKPT_MAGIC, meta or {})
    out.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        a = np.asarray(arr, dtype="<f8")  # tobytes() is C-order; keeps 0-d shapes
        nb = name.encode()
        rec = (struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim)
               + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes())
        head = struct.pack("<I", len(rec))
        out.write(head)
        out.write(rec)
        out.write(struct.pack("<I", _crc(head + rec)))
    return out.getvalue()


def parse_checkpoint(buf: bytes, where: str = "checkpoint") -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf, where)
    meta = _read_header(r, CKPT_MAGIC)
    count = r.u32()
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        head = r.take(4)
        (length,) = struct.unpack("<I", head)
        rec = r.take(length)
        if r.u32() != _crc(head + rec):
            raise FormatError(f"{where}: parameter record checksum mismatch")
        rr = _Reader(rec, where)
        try:
            name = rr.take(rr.unpack("H")[0]).decode()
        except UnicodeDecodeError as e:
            raise FormatError(f"{where}: bad parameter name") from e
        ndim = rr.unpack("B")[0]
        shape = rr.unpack(f"{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(rr.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if not rr.done():
            raise FormatError(f"{where}: trailing bytes in parameter {name!r}")
    if not r.done():
        raise FormatError(f"{where}: trailing bytes after {count} parameters")
    return params, meta


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dump_checkpoint(params, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    return parse_checkpoint(p.read_bytes(), where=str(p))

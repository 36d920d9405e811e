"""On-disk formats.

* query dump   ``DVPSQ1\\0`` + u32 T,N,D,Dm,K + f32 arrays, per frame:
  embeddings, class logits (K+1 columns), mask embeddings
* clip         ``DVPSC1\\0`` + u32 T,H,W,Dm,M + f32 codebook[M,Dm] + u16 index maps[T,H,W]
* annotation   ``<video>.json`` manifest + one 16-bit binary PGM id map per frame
* checkpoint   ``DVPSW1\\0`` + u32 count + named f64 tensors
* frames       24-bit binary PPM

All integers and floats are little-endian except PGM/PPM payloads, which
follow the netpbm convention (big-endian 16-bit samples).
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import VOID, FrameQueries, PanopticVideo, Track, VideoClip
from .errors import FormatError, IntegrityError

QUERY_MAGIC = b"DVPSQ1\0"
CLIP_MAGIC = b"DVPSC1\0"
CKPT_MAGIC = b"DVPSW1\0"

# refuse headers that would describe more than this many values
MAX_ELEMENTS = 1 << 31


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated payload at byte offset {len(self.buf)}: needed {n} bytes from offset {self.pos}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32s(self, k: int) -> tuple:
        return struct.unpack(f"<{k}I", self.take(4 * k))

    def array(self, dtype: str, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count > MAX_ELEMENTS:
            raise FormatError(f"extent overflow: header describes {count} values")
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)

    def expect_end(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes after payload at offset {self.pos}")


def _magic(r: _Reader, magic: bytes, path) -> None:
    head = r.buf[: len(magic)]
    if head != magic:
        raise FormatError(f"unrecognized format in {path}: bad magic {head!r}")
    r.pos = len(magic)


def _write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# query dump

def save_queries(path, frames: Sequence[FrameQueries]) -> None:
    if not frames:
        raise IntegrityError("query dump needs at least one frame")
    n, d = frames[0].embeddings.shape
    k1 = frames[0].class_logits.shape[1]
    dm = frames[0].mask_embeddings.shape[1]
    parts = [QUERY_MAGIC, struct.pack("<5I", len(frames), n, d, dm, k1 - 1)]
    for fq in frames:
        for arr, shape in ((fq.embeddings, (n, d)), (fq.class_logits, (n, k1)), (fq.mask_embeddings, (n, dm))):
            if arr.shape != shape:
                raise IntegrityError(f"frame array of shape {arr.shape}, expected {shape}")
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    _write_atomic(path, b"".join(parts))


def load_queries(path) -> list[FrameQueries]:
    r = _Reader(Path(path).read_bytes())
    _magic(r, QUERY_MAGIC, path)
    t, n, d, dm, k = r.u32s(5)
    if t * n * (d + k + 1 + dm) > MAX_ELEMENTS:
        raise FormatError(f"extent overflow: T={t} N={n} D={d} Dm={dm} K={k}")
    frames = []
    for _ in range(t):
        emb = r.array("<f4", (n, d)).astype(np.float64)
        cls = r.array("<f4", (n, k + 1)).astype(np.float64)
        msk = r.array("<f4", (n, dm)).astype(np.float64)
        frames.append(FrameQueries(emb, cls, msk))
    r.expect_end()
    return frames


# clip pixel features

def save_clip(path, clip: VideoClip) -> None:
    m, dm = clip.codebook.shape
    if m > 65536:
        raise IntegrityError("codebook too large for 16-bit index maps")
    head = struct.pack("<5I", clip.T, clip.H, clip.W, dm, m)
    body = np.ascontiguousarray(clip.codebook, dtype="<f4").tobytes()
    idx = np.ascontiguousarray(clip.index_maps, dtype="<u2").tobytes()
    _write_atomic(path, CLIP_MAGIC + head + body + idx)


def load_clip(path) -> VideoClip:
    r = _Reader(Path(path).read_bytes())
    _magic(r, CLIP_MAGIC, path)
    t, h, w, dm, m = r.u32s(5)
    codebook = r.array("<f4", (m, dm)).astype(np.float64)
    idx = r.array("<u2", (t, h, w)).astype(np.int64)
    r.expect_end()
    return VideoClip(codebook, idx)


# panoptic annotation

def _pgm16(id_map: np.ndarray) -> bytes:
    h, w = id_map.shape
    if id_map.size and (id_map.min() < 0 or id_map.max() > 65535):
        raise IntegrityError("segment ids must fit in 16 bits")
    return f"P5\n{w} {h}\n65535\n".encode() + np.ascontiguousarray(id_map, dtype=">u2").tobytes()


def _read_pgm16(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated PGM header in {path} at byte offset {pos}")
        fields.append(buf[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise FormatError(f"unrecognized format in {path}: expected binary PGM")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError(f"malformed PGM header in {path}") from exc
    dt = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dt).itemsize
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload at byte offset {len(buf)} in {path}")
    return np.frombuffer(buf[pos:pos + need], dtype=dt).reshape(h, w).astype(np.int64)


def _track_entry(sid: int, tr: Track) -> dict:
    e = {"id": int(sid), "class": int(tr.class_id), "is_thing": bool(tr.is_thing)}
    if tr.slot is not None:
        e["slot"] = int(tr.slot)
    return e


def save_annotation(directory, name: str, video: PanopticVideo) -> Path:
    """Write ``<name>.json`` and ``<name>_NNNN.pgm`` frames into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t, h, w = video.shape
    frames = [f"{name}_{i:04d}.pgm" for i in range(t)]
    for fname, m in zip(frames, video.id_maps):
        _write_atomic(directory / fname, _pgm16(m))
    manifest = {
        "T": t,
        "H": h,
        "W": w,
        "frames": frames,
        "tracks": [_track_entry(sid, tr) for sid, tr in sorted(video.tracks.items())],
    }
    path = directory / f"{name}.json"
    _write_atomic(path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return path


def load_annotation(path) -> PanopticVideo:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        t, h, w = int(manifest["T"]), int(manifest["H"]), int(manifest["W"])
        frames = list(manifest["frames"])
        tracks = {
            int(e["id"]): Track(int(e["class"]), bool(e["is_thing"]), None if e.get("slot") is None else int(e["slot"]))
            for e in manifest["tracks"]
        }
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed annotation manifest {path}: {exc}") from exc
    if t < 1 or len(frames) != t:
        raise IntegrityError(f"{path}: T={t} with {len(frames)} frame files; empty videos are rejected")
    maps = np.stack([_read_pgm16(path.parent / f) for f in frames])
    if maps.shape != (t, h, w):
        raise IntegrityError(f"{path}: frames have shape {maps.shape[1:]}, manifest says {(h, w)}")
    return PanopticVideo(maps, tracks)


# checkpoints

def save_checkpoint(path, tensors: dict) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(getattr(tensors[name], "data", tensors[name]), dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    _write_atomic(path, b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    _magic(r, CKPT_MAGIC, path)
    (count,) = r.u32s(1)
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2))
        name = r.take(nlen).decode()
        (ndim,) = struct.unpack("<B", r.take(1))
        shape = r.u32s(ndim)
        out[name] = r.array("<f8", tuple(shape)).copy()
    r.expect_end()
    return out


# visualization

def id_color(sid: int) -> tuple[int, int, int]:
    if sid == VOID:
        return (0, 0, 0)
    # multiplication by an odd constant is a bijection mod 2**24
    v = (int(sid) * 0x9E3779B1) & 0xFFFFFF
    if v == 0:
        v = 0x808080
    return (v >> 16) & 255, (v >> 8) & 255, v & 255


def render_frame(id_map: np.ndarray) -> np.ndarray:
    ids = np.unique(id_map)
    lut = {int(i): id_color(int(i)) for i in ids}
    rgb = np.zeros(id_map.shape + (3,), dtype=np.uint8)
    for i, c in lut.items():
        rgb[id_map == i] = c
    return rgb


def save_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    _write_atomic(path, f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    header = buf.split(b"\n", 3)
    if header[0] != b"P6":
        raise FormatError(f"unrecognized format in {path}: expected binary PPM")
    w, h = (int(v) for v in header[1].split())
    return np.frombuffer(header[3], dtype=np.uint8).reshape(h, w, 3)

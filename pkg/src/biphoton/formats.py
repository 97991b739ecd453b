"""On-disk formats: frame streams (BPFR), amplitude grids (BPAG), CSV maps,
PGM heatmaps and JSON documents.

All binary integers and floats are little-endian.  Both binary formats end
with a CRC32 of their payload.

BPFR layout::

    header   <4sHIIQQ   magic, version, n_k, n_lambda, n_frames, seed
    records  <QHH + (n_s + n_i) * <I
    trailer  <I         CRC32 of all record bytes

Every record is a multiple of four bytes long, which lets the reader scan
record boundaries on a ``uint32`` view.
"""

from __future__ import annotations

import heapq
import json
import math
import os
import struct
import zlib
from pathlib import Path
from typing import Iterator

import numba
import numpy as np

from .errors import FormatError
from .frames import FrameBatch
from .params import CrystalPumpParams, GridSpec

FRAME_MAGIC = b"BPFR"
FRAME_VERSION = 1
FRAME_HEADER = struct.Struct("<4sHIIQQ")
GRID_MAGIC = b"BPAG"
GRID_VERSION = 1
GRID_HEADER = struct.Struct("<4sHH")
GRID_AXIS = struct.Struct("<8sIdd")
GRID_AXES = ("k_s", "lambda_s", "k_i", "lambda_i")
CRC = struct.Struct("<I")
MAX_EVENTS = 0xFFFF


# ---------------------------------------------------------------- frames


def encode_batch(batch: FrameBatch) -> bytes:
    """Record bytes for every frame of ``batch`` in its stored order."""
    ns = batch.signal_counts
    ni = batch.idler_counts
    if len(batch) and (ns.max(initial=0) > MAX_EVENTS or ni.max(initial=0) > MAX_EVENTS):
        raise ValueError(f"a frame holds more than {MAX_EVENTS} events in one arm")
    words_per = 3 + ns + ni
    start = np.zeros(len(batch) + 1, dtype=np.int64)
    np.cumsum(words_per, out=start[1:])
    out = np.empty(int(start[-1]), dtype="<u4")
    fi = batch.frame_index
    out[start[:-1]] = (fi & 0xFFFFFFFF).astype(np.uint32)
    out[start[:-1] + 1] = (fi >> np.uint64(32)).astype(np.uint32)
    out[start[:-1] + 2] = (ns | (ni << 16)).astype(np.uint32)
    s_pos = np.repeat(start[:-1] + 3 - batch.signal_offsets[:-1], ns) + np.arange(len(batch.signal_bins))
    out[s_pos] = batch.signal_bins
    i_pos = np.repeat(start[:-1] + 3 + ns - batch.idler_offsets[:-1], ni) + np.arange(len(batch.idler_bins))
    out[i_pos] = batch.idler_bins
    return out.tobytes()


class FrameWriter:
    """Streaming BPFR writer.

    Batches may arrive out of order; they are held back until every
    earlier frame has been written and flushed in ``frame_index`` order on
    :meth:`close` at the latest.
    """

    def __init__(self, path, n_k: int, n_lambda: int, seed: int = 0):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self._fh.write(FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, n_k, n_lambda, 0, seed))
        self.n_k, self.n_lambda, self.seed = n_k, n_lambda, seed
        self.n_frames = 0
        self._crc = 0
        self._next = 0
        self._pending: list = []
        self._tick = 0

    @classmethod
    def for_grid(cls, path, grid: GridSpec, seed: int = 0) -> "FrameWriter":
        return cls(path, grid.n_k, grid.n_lambda, seed)

    def _emit(self, batch: FrameBatch):
        data = encode_batch(batch)
        self._fh.write(data)
        self._crc = zlib.crc32(data, self._crc)
        self.n_frames += len(batch)
        self._next = int(batch.frame_index[-1]) + 1

    def write_batch(self, batch: FrameBatch):
        if self._fh is None:
            raise ValueError("writer is closed")
        if not len(batch):
            return
        fi = batch.frame_index
        if np.any(fi[1:] < fi[:-1]):
            order = np.argsort(fi, kind="stable")
            batch = FrameBatch.from_frames(batch.frame(int(j)) for j in order)
        self._tick += 1
        heapq.heappush(self._pending, (int(batch.frame_index[0]), self._tick, batch))
        while self._pending and self._pending[0][0] <= self._next:
            self._emit(heapq.heappop(self._pending)[2])

    consume = write_batch

    def write_frames(self, frames) -> None:
        self.write_batch(FrameBatch.from_frames(frames))

    def close(self) -> int:
        if self._fh is None:
            return self.n_frames
        while self._pending:
            self._emit(heapq.heappop(self._pending)[2])
        self._fh.write(CRC.pack(self._crc & 0xFFFFFFFF))
        self._fh.seek(0)
        self._fh.write(FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, self.n_k, self.n_lambda, self.n_frames, self.seed))
        self._fh.close()
        self._fh = None
        return self.n_frames

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def write_frames(path, stream, n_k: int, n_lambda: int, seed: int = 0) -> int:
    """Write batches or frames from ``stream``; returns the frame count."""
    with FrameWriter(path, n_k, n_lambda, seed) as w:
        pending = []
        for item in stream:
            if isinstance(item, FrameBatch):
                if pending:
                    w.write_frames(pending)
                    pending = []
                w.write_batch(item)
            else:
                pending.append(item)
        if pending:
            w.write_frames(pending)
    return w.n_frames


@numba.njit(cache=True)
def _scan(words):
    """Start word of every complete record, and the word just past the last one."""
    n = words.size
    starts = np.empty(n // 3 + 1, dtype=np.int64)
    count = 0
    pos = 0
    while pos + 3 <= n:
        w = words[pos + 2]
        length = 3 + (w & 0xFFFF) + (w >> 16)
        if pos + length > n:
            break
        starts[count] = pos
        count += 1
        pos += length
    return starts[:count], pos


def _decode(words: np.ndarray, starts: np.ndarray) -> FrameBatch:
    lo = words[starts].astype(np.uint64)
    hi = words[starts + 1].astype(np.uint64)
    w = words[starts + 2]
    ns = (w & 0xFFFF).astype(np.int64)
    ni = (w >> 16).astype(np.int64)
    s_off = np.zeros(len(starts) + 1, dtype=np.int64)
    np.cumsum(ns, out=s_off[1:])
    i_off = np.zeros(len(starts) + 1, dtype=np.int64)
    np.cumsum(ni, out=i_off[1:])
    s_pos = np.repeat(starts + 3 - s_off[:-1], ns) + np.arange(s_off[-1])
    i_pos = np.repeat(starts + 3 + ns - i_off[:-1], ni) + np.arange(i_off[-1])
    return FrameBatch(lo | (hi << np.uint64(32)), s_off, words[s_pos], i_off, words[i_pos])


def read_frame_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(FRAME_HEADER.size)
    return _parse_frame_header(raw, path)


def _parse_frame_header(raw: bytes, path) -> dict:
    if len(raw) < FRAME_HEADER.size:
        raise FormatError(f"{path}: file shorter than the {FRAME_HEADER.size}-byte frame header")
    magic, version, n_k, n_l, n_frames, seed = FRAME_HEADER.unpack(raw)
    if magic != FRAME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FRAME_MAGIC!r}")
    if version != FRAME_VERSION:
        raise FormatError(f"{path}: unsupported frame file version {version} (reader handles {FRAME_VERSION})")
    return {"n_k": n_k, "n_lambda": n_l, "n_frames": n_frames, "seed": seed}


def read_frames(path, chunk_bytes: int = 1 << 22) -> Iterator[FrameBatch]:
    """Stream batches from a BPFR file with memory bounded by ``chunk_bytes``.

    Raises :class:`FormatError` on truncation (naming the frame ordinal and
    byte offset), bad bin indices or a checksum mismatch.
    """
    chunk_bytes = max(4096, chunk_bytes - chunk_bytes % 4)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        hdr = _parse_frame_header(fh.read(FRAME_HEADER.size), path)
        n_bins = hdr["n_k"] * hdr["n_lambda"]
        payload = size - FRAME_HEADER.size - CRC.size
        if payload < 0:
            raise FormatError(f"{path}: truncated before the checksum trailer (byte offset {size})")
        remaining = payload
        crc = 0
        carry = b""
        ordinal = 0
        consumed = 0  # payload bytes belonging to complete records
        while remaining > 0 or carry:
            data = fh.read(min(chunk_bytes, remaining)) if remaining > 0 else b""
            remaining -= len(data)
            crc = zlib.crc32(data, crc)
            buf = carry + data
            usable = len(buf) - len(buf) % 4
            words = np.frombuffer(buf[:usable], dtype="<u4")
            starts, end = _scan(words)
            if len(starts):
                batch = _decode(words, starts)
                for bins in (batch.signal_bins, batch.idler_bins):
                    if bins.size and int(bins.max()) >= n_bins:
                        raise FormatError(
                            f"{path}: bin index {int(bins.max())} >= {n_bins} near frame #{ordinal}"
                        )
                yield batch
                ordinal += len(starts)
            consumed += 4 * int(end)
            carry = buf[4 * int(end):]
            if remaining == 0 and carry:
                # the partial record still names its frame if its index survived
                which = f"frame {struct.unpack_from('<Q', carry)[0]}" if len(carry) >= 8 else "a frame"
                raise FormatError(
                    f"{path}: truncated record for {which} (record #{ordinal}) at byte offset "
                    f"{FRAME_HEADER.size + consumed}"
                )
        stored = fh.read(CRC.size)
    if CRC.unpack(stored)[0] != (crc & 0xFFFFFFFF):
        raise FormatError(f"{path}: CRC32 mismatch over the frame records")
    if ordinal != hdr["n_frames"]:
        raise FormatError(
            f"{path}: header announces {hdr['n_frames']} frames but {ordinal} were read "
            f"(byte offset {FRAME_HEADER.size + consumed})"
        )


def read_all_frames(path) -> FrameBatch:
    return FrameBatch.concatenate(read_frames(path))


# ---------------------------------------------------------------- grids


def write_grid(path, ag) -> None:
    """Write an :class:`~biphoton.spdc.AmplitudeGrid` as BPAG."""
    g = ag.grid
    values = np.ascontiguousarray(ag.values, dtype="<c16")
    flags = (1 if ag.norm_applied else 0) | 2
    axes = (
        (g.n_k, g.k_axis("signal")[0], g.k_step),
        (g.n_lambda, g.lambda_axis("signal")[0], g.lambda_step),
        (g.n_k, g.k_axis("idler")[0], g.k_step),
        (g.n_lambda, g.lambda_axis("idler")[0], g.lambda_step),
    )
    meta = json.dumps({"params": ag.params.to_dict(), "grid": g.to_dict()}, sort_keys=True).encode()
    data = values.tobytes()
    with open(path, "wb") as fh:
        fh.write(GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, flags))
        for name, (n, first, step) in zip(GRID_AXES, axes):
            fh.write(GRID_AXIS.pack(name.encode(), n, float(first), float(step)))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(data)
        fh.write(CRC.pack(zlib.crc32(data, zlib.crc32(meta)) & 0xFFFFFFFF))


def read_grid(path):
    from .spdc import AmplitudeGrid

    raw = Path(path).read_bytes()
    pos = GRID_HEADER.size
    if len(raw) < pos:
        raise FormatError(f"{path}: file shorter than the grid header")
    magic, version, flags = GRID_HEADER.unpack_from(raw, 0)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {GRID_MAGIC!r}")
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported grid file version {version} (reader handles {GRID_VERSION})")
    axes = []
    for _ in GRID_AXES:
        if len(raw) < pos + GRID_AXIS.size:
            raise FormatError(f"{path}: truncated axis descriptors at byte offset {pos}")
        name, n, first, step = GRID_AXIS.unpack_from(raw, pos)
        axes.append((name.rstrip(b"\0").decode(), n, first, step))
        pos += GRID_AXIS.size
    if tuple(a[0] for a in axes) != GRID_AXES:
        raise FormatError(f"{path}: unexpected axis names {[a[0] for a in axes]}")
    (meta_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = raw[pos : pos + meta_len]
    pos += meta_len
    shape = tuple(a[1] for a in axes)
    itemsize = 16 if flags & 2 else 8
    n_data = math.prod(shape) * itemsize
    if len(raw) != pos + n_data + CRC.size:
        raise FormatError(
            f"{path}: data section holds {len(raw) - pos - CRC.size} bytes, header dimensions "
            f"{shape} need {n_data}"
        )
    data = raw[pos : pos + n_data]
    (crc,) = CRC.unpack_from(raw, pos + n_data)
    if crc != zlib.crc32(data, zlib.crc32(meta)) & 0xFFFFFFFF:
        raise FormatError(f"{path}: CRC32 mismatch over the grid payload")
    try:
        doc = json.loads(meta)
        params = CrystalPumpParams.from_dict(doc["params"])
        grid = GridSpec.from_dict(doc["grid"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable metadata: {exc}") from exc
    if grid.shape != shape:
        raise FormatError(f"{path}: metadata grid {grid.shape} disagrees with axis descriptors {shape}")
    dtype = "<c16" if flags & 2 else "<f8"
    values = np.frombuffer(data, dtype=dtype).astype(np.complex128).reshape(shape)
    return AmplitudeGrid(params, grid, values, norm_applied=bool(flags & 1))


# ---------------------------------------------------------------- maps


def _fmt(v) -> str:
    return repr(float(v))


def write_map_csv(path, matrix, row_coords, col_coords, row_label: str = "row", col_label: str = "col") -> None:
    """2-D map with physical coordinates in the header row and first column.

    Values use the shortest round-trip decimal form; masked or non-finite
    cells are left empty.
    """
    m = np.ma.asarray(matrix)
    if m.ndim != 2 or m.shape != (len(row_coords), len(col_coords)):
        raise ValueError("matrix shape does not match the coordinate vectors")
    mask = np.ma.getmaskarray(m) | ~np.isfinite(m.filled(0.0))
    data = m.filled(0.0)
    lines = [",".join([f"{row_label}\\{col_label}"] + [_fmt(c) for c in col_coords])]
    for r, rc in enumerate(row_coords):
        cells = ["" if mask[r, c] else _fmt(data[r, c]) for c in range(data.shape[1])]
        lines.append(",".join([_fmt(rc)] + cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_map_csv(path):
    """Inverse of :func:`write_map_csv`: (masked matrix, row coords, col coords)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty CSV")
    cols = np.array([float(v) for v in lines[0].split(",")[1:]])
    rows, vals, mask = [], [], []
    for ln, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(cols) + 1:
            raise FormatError(f"{path}: line {ln} has {len(cells) - 1} values, expected {len(cols)}")
        rows.append(float(cells[0]))
        vals.append([float(c) if c else 0.0 for c in cells[1:]])
        mask.append([not c for c in cells[1:]])
    data = np.array(vals, dtype=float).reshape(len(rows), len(cols))
    return np.ma.MaskedArray(data, mask=np.array(mask, dtype=bool).reshape(data.shape)), np.array(rows), cols


def write_pgm(path, matrix) -> dict:
    """8-bit binary PGM with linear min-max scaling; masked cells map to 0.

    The scaling is recorded in ``<path>.txt``; returns the same values.
    """
    m = np.ma.asarray(matrix, dtype=float)
    mask = np.ma.getmaskarray(m) | ~np.isfinite(m.filled(0.0))
    valid = m.filled(0.0)[~mask]
    lo = float(valid.min()) if valid.size else 0.0
    hi = float(valid.max()) if valid.size else 0.0
    span = hi - lo
    img = np.zeros(m.shape, dtype=np.uint8)
    if span > 0:
        scaled = np.rint((m.filled(lo) - lo) / span * 255.0)
        img = np.clip(scaled, 0, 255).astype(np.uint8)
    img[mask] = 0
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    info = {"min": lo, "max": hi, "masked": int(mask.sum())}
    Path(str(path) + ".txt").write_text(
        f"min {_fmt(lo)}\nmax {_fmt(hi)}\nmasked {info['masked']}\nscale linear 0..255\n"
    )
    return info


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    data = raw[len(raw) - w * h :]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------- JSON


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if obj is np.ma.masked:
        return None
    return obj


def write_json(path, doc) -> None:
    """Strict JSON (non-finite numbers become null)."""
    Path(path).write_text(json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())

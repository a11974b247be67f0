"""Bitstream container (.stec): header, GOP/unit records, checksums.

All multi-byte integers are little-endian. Every payload carries its own
CRC32 and the whole stream ends with a global CRC32, so any single-bit
corruption is detected. Model parameters are referenced by a 64-bit
content hash (optionally embedded with --embed-model).
"""

import struct
import zlib
from dataclasses import dataclass, field

from stec.errors import ContainerFormatError
from stec.transforms import config_bytes, parse_config_bytes
from stec.video_coder import (
    INTERP_AVERAGE,
    INTERP_MOTION,
    UNIT_IFRAME,
    UNIT_RESIDUAL,
    CodedUnit,
    GopRecord,
    InterpolatorConfig,
    SchedulerConfig,
)

CONTAINER_MAGIC = b"STEC"
CONTAINER_VERSION = 1

MODE_IMAGE = 0
MODE_VIDEO = 1

_UNIT_CODES = {UNIT_IFRAME: 0, UNIT_RESIDUAL: 1}
_UNIT_NAMES = {v: k for k, v in _UNIT_CODES.items()}
_INTERP_CODES = {INTERP_AVERAGE: 0, INTERP_MOTION: 1}
_INTERP_NAMES = {v: k for k, v in _INTERP_CODES.items()}

_FIXED_ONE = 1 << 16


def _to_fixed(v):
    return max(0, min(0xFFFFFFFF, int(round(v * _FIXED_ONE))))


def _from_fixed(u):
    return u / _FIXED_ONE


@dataclass
class ContainerHeader:
    mode: int
    width: int
    height: int
    channels: int
    cfg: object
    model_hash: int
    frame_count: int = 1
    frame_rate: float = 30.0
    scheduler: SchedulerConfig = None
    interpolator: InterpolatorConfig = None
    embedded_model: bytes = None


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise ContainerFormatError("container truncated")
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return vals

    def take(self, size):
        if self.pos + size > len(self.blob):
            raise ContainerFormatError("container truncated")
        out = self.blob[self.pos : self.pos + size]
        self.pos += size
        return out


def write_container(header, records):
    """Serialize header + GOP records; appends the global CRC32."""
    out = bytearray()
    out += struct.pack(
        "<4sBBIIBII",
        CONTAINER_MAGIC,
        CONTAINER_VERSION,
        header.mode,
        header.width,
        header.height,
        header.channels,
        header.frame_count,
        int(round(header.frame_rate * 1000)),
    )
    cfg_blob = config_bytes(header.cfg)
    out += struct.pack("<H", len(cfg_blob)) + cfg_blob
    out += struct.pack("<Q", header.model_hash)
    flags = 1 if header.embedded_model else 0
    out += struct.pack("<B", flags)
    if header.embedded_model:
        out += struct.pack("<I", len(header.embedded_model)) + header.embedded_model
    if header.mode == MODE_VIDEO:
        s = header.scheduler or SchedulerConfig()
        i = header.interpolator or InterpolatorConfig()
        out += struct.pack("<HII", s.tau, _to_fixed(s.lower), _to_fixed(s.upper))
        out += struct.pack("<B", len(s.allowed))
        out += struct.pack(f"<{len(s.allowed)}H", *s.allowed)
        out += struct.pack("<BHH", _INTERP_CODES[i.kind], i.block_size, i.search_range)
    out += struct.pack("<I", len(records))
    for rec in records:
        out += struct.pack("<IHIH", rec.start, rec.T, _to_fixed(rec.h_t), len(rec.units))
        for unit in rec.units:
            out += struct.pack("<BII", _UNIT_CODES[unit.kind], unit.index, len(unit.payload))
            out += unit.payload
            out += struct.pack("<I", zlib.crc32(unit.payload) & 0xFFFFFFFF)
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def read_container(blob):
    """Parse and verify a container; returns (ContainerHeader, records)."""
    if len(blob) < 8:
        raise ContainerFormatError("container truncated")
    body, tail = blob[:-4], blob[-4:]
    (global_crc,) = struct.unpack("<I", tail)
    if zlib.crc32(body) & 0xFFFFFFFF != global_crc:
        raise ContainerFormatError("global checksum mismatch (corrupted container)")
    r = _Reader(body)
    magic, version, mode, width, height, channels, frame_count, rate_milli = r.unpack("<4sBBIIBII")
    if magic != CONTAINER_MAGIC:
        raise ContainerFormatError(f"bad container magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    if mode not in (MODE_IMAGE, MODE_VIDEO):
        raise ContainerFormatError(f"unknown mode {mode}")
    (cfg_len,) = r.unpack("<H")
    cfg_blob = r.take(cfg_len)
    try:
        cfg, used = parse_config_bytes(cfg_blob, 0)
    except Exception as exc:
        raise ContainerFormatError(f"bad architecture snapshot: {exc}") from exc
    if used != cfg_len:
        raise ContainerFormatError("trailing bytes in architecture snapshot")
    (model_hash,) = r.unpack("<Q")
    (flags,) = r.unpack("<B")
    embedded = None
    if flags & 1:
        (mlen,) = r.unpack("<I")
        embedded = r.take(mlen)
    scheduler = None
    interpolator = None
    if mode == MODE_VIDEO:
        tau, lo, hi = r.unpack("<HII")
        (n_allowed,) = r.unpack("<B")
        allowed = r.unpack(f"<{n_allowed}H")
        kind_c, block, search = r.unpack("<BHH")
        if kind_c not in _INTERP_NAMES:
            raise ContainerFormatError(f"unknown interpolator code {kind_c}")
        scheduler = SchedulerConfig(
            tau=tau, lower=_from_fixed(lo), upper=_from_fixed(hi), allowed=tuple(allowed)
        )
        interpolator = InterpolatorConfig(
            kind=_INTERP_NAMES[kind_c], block_size=block, search_range=search
        )
    (n_records,) = r.unpack("<I")
    records = []
    for _ in range(n_records):
        start, t_size, h_t_fixed, n_units = r.unpack("<IHIH")
        units = []
        for _ in range(n_units):
            kind_c, index, length = r.unpack("<BII")
            payload = r.take(length)
            (crc,) = r.unpack("<I")
            if zlib.crc32(payload) & 0xFFFFFFFF != crc:
                raise ContainerFormatError(f"payload checksum mismatch for unit {index}")
            if kind_c not in _UNIT_NAMES:
                raise ContainerFormatError(f"unknown unit type {kind_c}")
            units.append(CodedUnit(_UNIT_NAMES[kind_c], index, payload))
        records.append(GopRecord(start, t_size, _from_fixed(h_t_fixed), units))
    if r.pos != len(body):
        raise ContainerFormatError("trailing bytes after last record")
    header = ContainerHeader(
        mode=mode,
        width=width,
        height=height,
        channels=channels,
        cfg=cfg,
        model_hash=model_hash,
        frame_count=frame_count,
        frame_rate=rate_milli / 1000.0,
        scheduler=scheduler,
        interpolator=interpolator,
        embedded_model=embedded,
    )
    return header, records

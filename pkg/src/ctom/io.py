"""File formats: PNG images, binary matte files, JSON-lines manifests and
weight checkpoints. All binary data is little-endian.

Matte file layout::

    b"CTOM" | version u8 | W u32 | H u32 | float32 planes

with planes mask, filter R/G/B, flow x/y, each ``H*W`` row-major.

Checkpoint layout::

    b"CTCK" | version u8 | header_len u32 | JSON header | float32 tensors

The header lists every tensor by name and shape in payload order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, FormatError
from .matte import Matte

MATTE_MAGIC = b"CTOM"
MATTE_VERSION = 1
MATTE_HEADER = struct.Struct("<4sBHH")  # 9 bytes; sizes are u16

CKPT_MAGIC = b"CTCK"
CKPT_VERSION = 1
CKPT_PREFIX = struct.Struct("<4sBI")


# -- images ----------------------------------------------------------------


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError("image file not found", path=str(path))
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
                raise FormatError("unsupported image mode", path=str(path), mode=im.mode)
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError("cannot decode image", path=str(path), reason=str(exc)) from None
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Values an 8-bit PNG round trip would return."""
    return to_uint8(img).astype(np.float64) / 255.0


def write_image(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


# -- mattes ----------------------------------------------------------------------


def matte_file_size(width: int, height: int) -> int:
    return MATTE_HEADER.size + 4 * 6 * width * height


def encode_matte(matte: Matte) -> bytes:
    h, w = matte.height, matte.width
    if max(h, w) > 0xFFFF:
        raise FormatError("matte too large for the file format", width=w, height=h)
    planes = np.concatenate(
        [matte.mask[None], matte.filter.transpose(2, 0, 1), matte.flow.transpose(2, 0, 1)], axis=0
    )
    return MATTE_HEADER.pack(MATTE_MAGIC, MATTE_VERSION, w, h) + planes.astype("<f4").tobytes()


def decode_matte(buf: bytes) -> Matte:
    if len(buf) < MATTE_HEADER.size:
        raise FormatError("matte file shorter than its header", length=len(buf))
    magic, version, w, h = MATTE_HEADER.unpack_from(buf)
    if magic != MATTE_MAGIC:
        raise FormatError("bad matte magic", magic=magic.hex())
    if version != MATTE_VERSION:
        raise FormatError("unsupported matte version", version=version)
    if w == 0 or h == 0:
        raise FormatError("matte has zero size", width=w, height=h)
    expected = matte_file_size(w, h)
    if len(buf) != expected:
        raise FormatError("matte file length mismatch", length=len(buf), expected=expected)
    planes = np.frombuffer(buf, dtype="<f4", offset=MATTE_HEADER.size).reshape(6, h, w).astype(np.float32)
    matte = Matte(planes[0].copy(), planes[1:4].transpose(1, 2, 0).copy(), planes[4:6].transpose(1, 2, 0).copy())
    try:
        return matte.validate()
    except DataError as exc:
        raise FormatError("matte values out of range", reason=exc.message) from None


def write_matte(path, matte: Matte) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_matte(matte))


def read_matte(path) -> Matte:
    path = Path(path)
    if not path.exists():
        raise DataError("matte file not found", path=str(path))
    return decode_matte(path.read_bytes())


# -- manifests -------------------------------------------------------------------


def write_manifest(path, records: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError("manifest not found", path=str(path))
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                raise FormatError("manifest line is not JSON", line=lineno) from None
            if rec.get("id") in seen:
                raise FormatError("duplicate sample id in manifest", id=rec.get("id"))
            seen.add(rec.get("id"))
            records.append(rec)
    return records


def iter_manifest_paths(manifest_path, record: dict) -> Iterator[Path]:
    base = Path(manifest_path).parent
    for key in ("input_path", "background_path", "matte_path"):
        yield base / record[key]


# -- checkpoints -----------------------------------------------------------------


def encode_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    meta = dict(header)
    meta["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values())
    return CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)) + blob + payload


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < CKPT_PREFIX.size:
        raise FormatError("checkpoint shorter than its prefix", length=len(buf))
    magic, version, hlen = CKPT_PREFIX.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", magic=magic.hex())
    if version != CKPT_VERSION:
        raise FormatError("unsupported checkpoint version", version=version)
    start = CKPT_PREFIX.size
    if len(buf) < start + hlen:
        raise FormatError("checkpoint header truncated", length=len(buf), header_length=hlen)
    try:
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
        specs = [(t["name"], tuple(int(d) for d in t["shape"])) for t in header["tensors"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError):
        raise FormatError("checkpoint header is not valid JSON metadata") from None
    offset = start + hlen
    expected = offset + 4 * sum(int(np.prod(s)) for _, s in specs)
    if len(buf) != expected:
        raise FormatError("checkpoint length mismatch", length=len(buf), expected=expected)
    tensors = {}
    for name, shape in specs:
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * n
    del header["tensors"]
    return header, tensors


def write_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(header, tensors))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError("checkpoint not found", path=str(path))
    return decode_checkpoint(path.read_bytes())

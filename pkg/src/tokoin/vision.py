"""Frame differencing against a registered background pattern.

Grayscale frames are 2-D uint8 arrays. The background captured at
initialization is the standard pattern; each live frame is thresholded
against it, small speckle components are cleared, and the surviving motion
bits are OR-accumulated into the monitoring pattern whose excursion outside
the permitted region mask is what flags an over-privileged access.

File formats: binary PGM (P5) for frames, binary PBM (P4) for region masks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

DEFAULT_TAU = 25
DENOISE_MIN_PIXELS = 4
DEFAULT_FRAME_SHAPE = (48, 64)  # rows, cols


class FrameError(ValueError):
    pass


def _require_frame(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise FrameError("frame must be a 2-D grayscale array")
    return a


# ---------------------------------------------------------------------------
# PGM / PBM


def pgm_bytes(frame: np.ndarray) -> bytes:
    frame = _require_frame(frame).astype(np.uint8)
    h, w = frame.shape
    return b"P5\n%d %d\n255\n" % (w, h) + frame.tobytes()


def write_pgm(path, frame: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(frame))


def _parse_netpbm_header(data: bytes, magic: bytes, n_fields: int) -> tuple[list[int], int]:
    if not data.startswith(magic):
        raise FrameError(f"not a {magic.decode()} file")
    fields: list[int] = []
    i = 2
    while len(fields) < n_fields:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FrameError("truncated header")
        fields.append(int(data[start:i]))
    return fields, i + 1  # single whitespace after the last header field


def read_pgm(path_or_bytes) -> np.ndarray:
    data = path_or_bytes if isinstance(path_or_bytes, bytes) else open(path_or_bytes, "rb").read()
    (w, h, maxval), offset = _parse_netpbm_header(data, b"P5", 3)
    if maxval != 255:
        raise FrameError("only 8-bit PGM supported")
    raw = data[offset : offset + w * h]
    if len(raw) != w * h:
        raise FrameError("truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def pbm_bytes(mask: np.ndarray) -> bytes:
    mask = _require_frame(mask).astype(bool)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    return b"P4\n%d %d\n" % (w, h) + packed.tobytes()


def write_pbm(path, mask: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(pbm_bytes(mask))


def read_pbm(path_or_bytes) -> np.ndarray:
    data = path_or_bytes if isinstance(path_or_bytes, bytes) else open(path_or_bytes, "rb").read()
    (w, h), offset = _parse_netpbm_header(data, b"P4", 2)
    row_bytes = (w + 7) // 8
    raw = data[offset : offset + row_bytes * h]
    if len(raw) != row_bytes * h:
        raise FrameError("truncated mask data")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(h, row_bytes)
    return np.unpackbits(rows, axis=1)[:, :w].astype(bool)


def frame_digest(frame: np.ndarray) -> bytes:
    return hashlib.sha256(pgm_bytes(frame)).digest()


def mask_ref(mask: np.ndarray) -> str:
    """Stable policy reference for a region mask: digest of its PBM form."""
    return "sha256:" + hashlib.sha256(pbm_bytes(mask)).hexdigest()


@dataclass(frozen=True)
class StandardPattern:
    """Background frame captured at initialization; its digest is what gets
    registered on-chain so later evidence can be tied back to it."""

    frame: np.ndarray

    @property
    def digest(self) -> bytes:
        return frame_digest(self.frame)


# ---------------------------------------------------------------------------
# differencing


def _clear_small_components(mask: np.ndarray, min_pixels: int) -> np.ndarray:
    """Zero out 4-connected components smaller than ``min_pixels``."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    out = mask.copy()
    for y0, x0 in zip(*np.nonzero(mask)):
        if seen[y0, x0]:
            continue
        stack = [(int(y0), int(x0))]
        seen[y0, x0] = True
        component = []
        while stack:
            y, x = stack.pop()
            component.append((y, x))
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
        if len(component) < min_pixels:
            for y, x in component:
                out[y, x] = False
    return out


def frame_diff(
    standard: np.ndarray,
    frame: np.ndarray,
    tau: int = DEFAULT_TAU,
    min_component: int = DENOISE_MIN_PIXELS,
) -> np.ndarray:
    """Boolean motion bitmap: |frame - standard| > tau, despeckled."""
    standard = _require_frame(standard)
    frame = _require_frame(frame)
    if standard.shape != frame.shape:
        raise FrameError(f"dimension mismatch {standard.shape} vs {frame.shape}")
    raw = np.abs(frame.astype(np.int16) - standard.astype(np.int16)) > tau
    return _clear_small_components(raw, min_component)


def accumulate(pattern: np.ndarray | None, diff: np.ndarray) -> np.ndarray:
    """OR-accumulate: bits only ever turn on."""
    if pattern is None:
        return diff.copy()
    return pattern | diff


# ---------------------------------------------------------------------------
# bitmap wire form (for verdict violation patterns)


def bitmap_to_doc(mask: np.ndarray) -> dict:
    mask = _require_frame(mask).astype(bool)
    h, w = mask.shape
    return {"w": w, "h": h, "rows": np.packbits(mask, axis=1).tobytes()}


def bitmap_from_doc(doc: dict) -> np.ndarray:
    w, h = int(doc["w"]), int(doc["h"])
    raw = doc["rows"]
    if isinstance(raw, str):
        raw = bytes.fromhex(raw)
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(h, (w + 7) // 8)
    return np.unpackbits(rows, axis=1)[:, :w].astype(bool)

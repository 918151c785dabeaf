"""Portable graymap reader and writer (P2 ASCII, P5 binary, 8 or 16 bit)."""

from pathlib import Path
from typing import List, Tuple, Union
import numpy as np

from flowmc.errors import FormatError


def _header(data: bytes) -> Tuple[bytes, List[int], int]:
    """Magic, [width, height, maxval] and the offset of the first raster byte"""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    try:
        numbers = [int(t) for t in tokens[1:]]
    except ValueError:
        raise FormatError(f"non-numeric PGM header field in {tokens[1:]!r}")
    # exactly one whitespace byte separates the header from binary data
    return tokens[0], numbers, pos + 1


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Intensities in [0, 1] with row 0 at the bottom of the image"""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read PGM file {path}: {e}")
    magic, (width, height, maxval), offset = _header(data)
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"{path}: unsupported magic {magic!r}, expected P2 or P5")
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PGM dimensions {width}x{height} or maxval {maxval}")
    count = width * height
    if magic == b"P2":
        try:
            values = np.array(data[offset:].split()[:count], dtype=np.int64)
        except ValueError:
            raise FormatError(f"{path}: non-numeric P2 raster")
    else:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raster = data[offset:offset + count * dtype.itemsize]
        if len(raster) < count * dtype.itemsize:
            raise FormatError(f"{path}: truncated P5 raster")
        values = np.frombuffer(raster, dtype=dtype).astype(np.int64)
    if values.size != count:
        raise FormatError(f"{path}: expected {count} samples, found {values.size}")
    if np.any(values > maxval):
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    image = values.reshape(height, width).astype(np.float64) / maxval
    return image[::-1].copy()


def write_pgm(path: Union[str, Path], grid: np.ndarray, maxval: int = 65535) -> None:
    """Binary PGM of a grid scaled so its maximum maps to maxval; row 0 is written last"""
    grid = np.asarray(grid, dtype=np.float64)
    peak = float(np.max(grid))
    scaled = np.zeros_like(grid) if peak <= 0.0 else grid / peak
    values = np.rint(np.clip(scaled, 0.0, 1.0) * maxval)[::-1]
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    height, width = grid.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + values.astype(dtype).tobytes())

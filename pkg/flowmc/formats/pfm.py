"""Grayscale portable float maps: little-endian float32, bottom row first."""

from pathlib import Path
from typing import Union
import numpy as np

from flowmc.errors import FormatError


def write_pfm(path: Union[str, Path], grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise FormatError(f"PFM grids must be 2D, got shape {grid.shape}")
    height, width = grid.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + grid.tobytes())


def read_pfm(path: Union[str, Path]) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read PFM file {path}: {e}")
    lines = data.split(b"\n", 3)
    if len(lines) < 4 or lines[0].strip() != b"Pf":
        raise FormatError(f"{path}: not a grayscale PFM file")
    try:
        width, height = (int(v) for v in lines[1].split())
        scale = float(lines[2])
    except ValueError:
        raise FormatError(f"{path}: malformed PFM header")
    dtype = "<f4" if scale < 0 else ">f4"
    raster = lines[3]
    if len(raster) != width * height * 4:
        raise FormatError(f"{path}: expected {width * height} floats, found {len(raster) // 4}")
    return np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(np.float64)

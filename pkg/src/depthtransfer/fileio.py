"""Readers and writers for images, depth maps, masks and binary caches."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import DepthMap, as_float_image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

FEATURE_MAGIC = b"DTFC"
FEATURE_VERSION = 1
WARP_MAGIC = b"DTWF"
WARP_VERSION = 1


class DataError(Exception):
    """Raised for unreadable or inconsistent input data; carries the offending path."""

    def __init__(self, message: str, path=None):
        super().__init__(f"{path}: {message}" if path is not None else message)
        self.path = path


def read_image(path) -> np.ndarray:
    """Load an 8-bit image as float RGB in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image ({exc})", path) from exc
    return as_float_image(arr)


def write_image(path, img: np.ndarray):
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header = fh.readline().strip()
            if header not in (b"Pf", b"PF"):
                raise DataError("not a PFM file", path)
            dims = fh.readline().split()
            while not dims:
                dims = fh.readline().split()
            w, h = int(dims[0]), int(dims[1])
            scale = float(fh.readline().strip())
            dtype = "<f4" if scale < 0 else ">f4"
            channels = 3 if header == b"PF" else 1
            data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"corrupt PFM ({exc})", path) from exc
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape[:2]
    header = b"PF" if data.ndim == 3 else b"Pf"
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(data)).tobytes())


def read_depth(path) -> DepthMap:
    """Read a depth map: 16-bit PNG in millimeters (0 = hole) or PFM in meters."""
    path = Path(path)
    if not path.exists():
        raise DataError("depth file not found", path)
    if path.suffix.lower() == ".pfm":
        return DepthMap.from_array(read_pfm(path))
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read depth ({exc})", path) from exc
    if arr.ndim != 2:
        raise DataError(f"depth PNG must be single channel, got shape {arr.shape}", path)
    return DepthMap.from_array(arr.astype(np.float64) / 1000.0)


def write_depth(stem, d: DepthMap | np.ndarray) -> tuple[Path, Path]:
    """Write ``<stem>.pfm`` (meters, holes as 0) and ``<stem>_mm.png`` (16-bit mm).

    The PNG saturates at 65.535 m; the PFM is the lossless copy.
    """
    if not isinstance(d, DepthMap):
        d = DepthMap.from_array(d)
    stem = Path(stem)
    meters = np.where(d.valid, d.depth, 0.0)
    pfm = stem.with_name(stem.name + ".pfm")
    png = stem.with_name(stem.name + "_mm.png")
    write_pfm(pfm, meters)
    mm = np.clip(np.round(meters * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(png)
    return pfm, png


def depth_visualization(depth: np.ndarray, near: float = 1.0, far: float = 80.0) -> np.ndarray:
    """Log-scaled gray rendering: ``near`` maps to black, ``far`` to white."""
    d = np.clip(np.asarray(depth, dtype=np.float64), near, far)
    return (np.log(d) - np.log(near)) / (np.log(far) - np.log(near))


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def content_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha1()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_feature_cache(path, vectors: dict[str, np.ndarray]):
    """Binary record: magic, version, count, then per vector (name, length, float64s)."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", FEATURE_VERSION, len(vectors)))
        for name, vec in vectors.items():
            vec = np.asarray(vec, dtype="<f8").ravel()
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", vec.size))
            fh.write(vec.tobytes())


def read_feature_cache(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURE_MAGIC:
            raise DataError("bad feature cache magic", path)
        version, count = struct.unpack("<II", fh.read(8))
        if version != FEATURE_VERSION:
            raise DataError(f"unsupported feature cache version {version}", path)
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode()
            (size,) = struct.unpack("<I", fh.read(4))
            out[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").copy()
    return out


def write_warp_dump(path, dx: np.ndarray, dy: np.ndarray, valid: np.ndarray):
    """Binary warp dump: magic, version, H, W, int16 dx, int16 dy, packed validity bits."""
    h, w = dx.shape
    with open(path, "wb") as fh:
        fh.write(WARP_MAGIC)
        fh.write(struct.pack("<III", WARP_VERSION, h, w))
        fh.write(np.asarray(dx, dtype="<i2").tobytes())
        fh.write(np.asarray(dy, dtype="<i2").tobytes())
        fh.write(np.packbits(np.asarray(valid, dtype=bool).ravel()).tobytes())


def read_warp_dump(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != WARP_MAGIC:
            raise DataError("bad warp dump magic", path)
        _, h, w = struct.unpack("<III", fh.read(12))
        n = h * w
        dx = np.frombuffer(fh.read(2 * n), dtype="<i2").reshape(h, w).astype(int)
        dy = np.frombuffer(fh.read(2 * n), dtype="<i2").reshape(h, w).astype(int)
        bits = np.frombuffer(fh.read(), dtype=np.uint8)
        valid = np.unpackbits(bits)[:n].reshape(h, w).astype(bool)
    return dx, dy, valid

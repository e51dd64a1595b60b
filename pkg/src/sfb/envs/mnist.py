"""Reader and writer for the MNIST IDX format (optionally gzip-compressed)."""
from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, CountMismatch, TruncatedFile

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "SFB_DATA_DIR"

# file name -> (uncompressed size in bytes, md5 of the .gz as distributed)
MNIST_FILES = {
    "train-images-idx3-ubyte": (47040016, "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    "train-labels-idx1-ubyte": (60008, "d53e105ee54ea40749a09fcbcd1e9432"),
    "t10k-images-idx3-ubyte": (7840016, "9fb629c4189551a2d022fa330f9573f3"),
    "t10k-labels-idx1-ubyte": (10008, "ec29112dd5afa0611ce80d1b7f02629c"),
}


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic: int) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 4:
        raise TruncatedFile(f"{path}: missing header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFile(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise TruncatedFile(f"{path}: {len(data) - header} payload bytes, expected {size}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """Return ``(images uint8 (n, rows, cols), labels uint8 (n,))``."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def write_idx(path, array, compress: bool = False):
    """Write a uint8 array as IDX; 1-D arrays get the label magic, 3-D the image magic."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(payload)


def data_dir(override=None) -> Path:
    return Path(override or os.environ.get(DATA_DIR_ENV, "~/.cache/sfb/mnist")).expanduser()


def find_mnist(split: str = "train", directory=None):
    """Locate the IDX pair for ``split`` (train or t10k), plain or .gz; None if absent."""
    root = data_dir(directory)
    found = []
    for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
        name = f"{split}-{kind}"
        hit = next((root / c for c in (name, name + ".gz") if (root / c).exists()), None)
        if hit is None:
            return None
        found.append(hit)
    return tuple(found)


def expected_files_message(directory=None) -> str:
    root = data_dir(directory)
    lines = [f"MNIST not found. Place these files (plain or .gz) in {root}",
             f"or point {DATA_DIR_ENV} at their directory:"]
    for name, (size, md5) in MNIST_FILES.items():
        lines.append(f"  {name}  ({size} bytes uncompressed, md5 of .gz {md5})")
    return "\n".join(lines)

"""File formats: PFM depth maps, 8-bit PNG images, byte-stable npz archives."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

# Fixed zip timestamp so identical arrays always produce identical bytes.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_pfm(path, array: np.ndarray) -> None:
    """Write a single-channel little-endian float32 PFM (rows stored bottom-up)."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D array, got shape {a.shape}")
    h, w = a.shape
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
            f.write(np.ascontiguousarray(a[::-1]).tobytes())
    except OSError as e:
        raise OSError(f"cannot write PFM file {path}: {e}") from e


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read PFM file {path}: {e}") from e
    buf = io.BytesIO(data)
    kind = buf.readline().strip()
    if kind not in (b"Pf", b"PF"):
        raise ValueError(f"{path}: not a PFM file")
    w, h = (int(v) for v in buf.readline().split())
    scale = float(buf.readline().strip())
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(buf.read(), dtype=dtype, count=w * h * channels)
    arr = arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)
    return arr[::-1].astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    """Write an RGB image; float input in [0, 1] is quantized to 8 bits."""
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    try:
        Image.fromarray(a, mode="RGB" if a.ndim == 3 else "L").save(Path(path), format="PNG")
    except OSError as e:
        raise OSError(f"cannot write PNG file {path}: {e}") from e


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG as uint8 (H, W, 3)."""
    try:
        with Image.open(Path(path)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as e:
        raise OSError(f"cannot read PNG file {path}: {e}") from e


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def save_npz(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Save named arrays as an ``.npz`` archive whose bytes depend only on content.

    ``np.savez`` stamps the current time into the zip entries; this writer
    uses a fixed timestamp and sorted entry order. Metadata, if given, is
    stored as a JSON string under the ``__metadata__`` key.
    """
    entries = dict(arrays)
    if metadata is not None:
        entries["__metadata__"] = np.frombuffer(
            json.dumps(metadata, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
    path = Path(path)
    try:
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in sorted(entries):
                bio = io.BytesIO()
                # asarray keeps 0-d arrays 0-d (ascontiguousarray would promote them to 1-d)
                np.lib.format.write_array(bio, np.asarray(entries[name], order="C"), allow_pickle=False)
                info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
                info.external_attr = 0o644 << 16
                zf.writestr(info, bio.getvalue())
    except OSError as e:
        raise OSError(f"cannot write archive {path}: {e}") from e


def load_npz(path) -> tuple[dict[str, np.ndarray], dict | None]:
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = arrays.pop("__metadata__", None)
    if meta is not None:
        meta = json.loads(meta.tobytes().decode("utf-8"))
    return arrays, meta

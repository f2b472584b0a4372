"""Writers for the neutral interchange formats consumed by the core toolkit.

Deliberately independent of the core package: this module re-implements the
container ("NTC1"), key/value manifest, and dataset-store layouts from their
format definitions so that agreement between the two implementations is a
real cross-check.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

NTC_MAGIC = b"NTC1"
STORE_FORMAT = "inr-dataset-v1"


def write_container(tensors: dict[str, np.ndarray], path) -> None:
    """magic, u32 count, then per tensor: u16 name len, name bytes, u8 ndim,
    u32 dims, raw f32 little-endian data."""
    parts = [NTC_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def write_manifest(entries: dict, path) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))


def container_fingerprint(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    h.update(b"vit")
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def write_store_layout(out_dir, captions: list[str], text_embeddings: np.ndarray,
                       image_embeddings: np.ndarray, embed_dim: int,
                       encoder_fingerprint: str, source_hashes: list[bytes]) -> None:
    """Dataset-store directory without anchor weights (weights refs absent)."""
    out_dir = Path(out_dir)
    (out_dir / "weights").mkdir(parents=True, exist_ok=True)
    n = len(captions)
    text = np.asarray(text_embeddings, dtype="<f4")
    image = np.asarray(image_embeddings, dtype="<f4")
    if text.shape != (n, embed_dim) or image.shape != (n, embed_dim):
        raise ValueError("embedding matrices must be (n, d)")
    (out_dir / "embeddings.bin").write_bytes(text.tobytes() + image.tobytes())
    cap_parts = []
    records = []
    for i, caption in enumerate(captions):
        cb = caption.encode("utf-8")
        cap_parts.append(struct.pack("<I", len(cb)) + cb)
        records.append({
            "id": i,
            "caption_len": len(cb),
            "source_image_hash": source_hashes[i].hex(),
            "inr_weights": None,
            "plain_weights": None,
            "blur_sigma": 0.0,
            "seed": 0,
        })
    (out_dir / "captions.bin").write_bytes(b"".join(cap_parts))
    manifest = {
        "format": STORE_FORMAT,
        "embed_dim": embed_dim,
        "encoder_fingerprint": encoder_fingerprint,
        "entry_count": n,
        "entries": records,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

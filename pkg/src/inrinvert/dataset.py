"""Offline dataset of {image embedding, anchor weights, text embedding} triples.

Built once from an image/caption corpus: each image is blurred, fitted with
a robust anchor network, rendered, and embedded; the caption is embedded
through the text tower.  Retrieval is an exact linear scan (desk-scale
stores), so every query can be checked against a brute-force oracle.

On-disk layout (one directory per store):
  manifest.json      embed dim, encoder fingerprint, entry records
  embeddings.bin     f32 little-endian, text matrix then image matrix
  captions.bin       length-prefixed UTF-8
  weights/           one anchor weights file per entry
  weights_plain/     optional matching non-robust fits (ablation support)
"""

from __future__ import annotations

import json
import shutil
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .encoder import EncoderHandle, embed_image, embed_text, normalize
from .gradients import ParamVector
from .inr import CoordinateGrid, INRSpec, INRWeights, load_inr, render, save_inr
from .imaging import gaussian_blur, image_hash
from .robust_init import AWPConfig, RobustFitConfig, fit_inr, train_robust_inr

_STORE_FORMAT = "inr-dataset-v1"


class FingerprintMismatchError(RuntimeError):
    pass


@dataclass
class DatasetEntry:
    id: int
    image_embedding: np.ndarray
    text_embedding: np.ndarray
    caption: str
    source_image_hash: bytes
    inr_weights_ref: str | None = None
    plain_weights_ref: str | None = None
    blur_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.image_embedding = np.asarray(self.image_embedding, dtype=np.float32)
        self.text_embedding = np.asarray(self.text_embedding, dtype=np.float32)
        for name in ("image_embedding", "text_embedding"):
            v = getattr(self, name)
            if abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) > 1e-5:
                raise ValueError(f"{name} must be unit norm")


@dataclass
class DatasetStore:
    entries: list[DatasetEntry]
    embed_dim: int
    encoder_fingerprint: str
    root: Path | None = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("entry ids must be unique")
        for e in self.entries:
            if e.image_embedding.size != self.embed_dim:
                raise ValueError("entry embedding dim does not match store")

    def __len__(self) -> int:
        return len(self.entries)

    @cached_property
    def text_matrix(self) -> np.ndarray:
        return np.stack([e.text_embedding for e in self.entries]) if self.entries else \
            np.zeros((0, self.embed_dim), dtype=np.float32)

    @cached_property
    def image_matrix(self) -> np.ndarray:
        return np.stack([e.image_embedding for e in self.entries]) if self.entries else \
            np.zeros((0, self.embed_dim), dtype=np.float32)

    def load_weights(self, entry: DatasetEntry, plain: bool = False) -> INRWeights:
        ref = entry.plain_weights_ref if plain else entry.inr_weights_ref
        if ref is None:
            which = "plain-fit" if plain else "anchor"
            raise FileNotFoundError(f"entry {entry.id} has no {which} weights in this store")
        base = self.root if self.root is not None else Path(".")
        return load_inr(base / ref)


def blur_sigma_for(seed: int, img_hash: bytes, lo: float = 10.0, hi: float = 20.0) -> float:
    """Per-image blur strength, deterministic in (seed, image content)."""
    words = [seed] + list(np.frombuffer(img_hash[:16], dtype="<u4"))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
    return float(rng.uniform(lo, hi))


def prepare_entry(image: np.ndarray, caption: str, h: EncoderHandle,
                  spec: INRSpec, fit: RobustFitConfig, awp: AWPConfig,
                  seed: int, entry_id: int = 0, with_plain: bool = False,
                  ) -> tuple[DatasetEntry, INRWeights, INRWeights | None]:
    """Build one store triple: blur, fit the anchor, render, embed.

    The blur strength is drawn deterministically from (seed, image hash).
    Returns the entry plus the trained weights; the store builder persists
    the weight files and fills in the refs.
    """
    img_hash = image_hash(image)
    sigma = blur_sigma_for(seed, img_hash)
    fit_cfg = RobustFitConfig(**{**fit.__dict__, "blur_sigma": sigma})
    weights = train_robust_inr(image, spec, fit_cfg, awp, seed)
    grid = CoordinateGrid(h.image_resolution, h.image_resolution)
    out = render(weights, grid)
    entry = DatasetEntry(
        id=entry_id,
        image_embedding=embed_image(h, out),
        text_embedding=embed_text(h, caption),
        caption=caption,
        source_image_hash=img_hash,
        blur_sigma=sigma,
        seed=seed,
    )
    plain = None
    if with_plain:
        target = gaussian_blur(np.asarray(image, dtype=np.float64),
                               fit_cfg.blur_kernel, fit_cfg.blur_sigma)
        plain = fit_inr(target, spec, fit_cfg, seed)
    return entry, weights, plain


def build_store(pairs, h: EncoderHandle, spec: INRSpec, fit: RobustFitConfig,
                awp: AWPConfig, seed: int, out_dir, with_plain: bool = False,
                progress=None) -> DatasetStore:
    """Train and persist a store from (image, caption) pairs."""
    out_dir = Path(out_dir)
    (out_dir / "weights").mkdir(parents=True, exist_ok=True)
    if with_plain:
        (out_dir / "weights_plain").mkdir(exist_ok=True)
    entries = []
    for i, (image, caption) in enumerate(pairs):
        entry, weights, plain = prepare_entry(
            image, caption, h, spec, fit, awp, seed=seed + i, entry_id=i,
            with_plain=with_plain)
        entry.inr_weights_ref = f"weights/entry_{i:05d}.inrw"
        save_inr(weights, out_dir / entry.inr_weights_ref)
        if plain is not None:
            entry.plain_weights_ref = f"weights_plain/entry_{i:05d}.inrw"
            save_inr(plain, out_dir / entry.plain_weights_ref)
        entries.append(entry)
        if progress is not None:
            progress(i, len(pairs) if hasattr(pairs, "__len__") else None, caption)
    store = DatasetStore(entries, h.embed_dim, h.fingerprint, root=out_dir)
    save_store(store, out_dir)
    return store


def retrieve_init(e_target: np.ndarray, store: DatasetStore) -> DatasetEntry:
    """Entry whose text embedding is most similar to the target (ties: lowest id)."""
    if not store.entries:
        raise ValueError("store is empty")
    e = np.asarray(e_target, dtype=np.float64)
    sims = store.text_matrix.astype(np.float64) @ e
    ids = np.array([entry.id for entry in store.entries])
    return store.entries[int(np.lexsort((ids, -sims))[0])]


def blend_target(e_t: np.ndarray, store: DatasetStore, k: int) -> np.ndarray:
    """Softmax-weighted mix of the k image embeddings nearest the query.

    Weights are the softmax (temperature 1) of the raw cosine similarities;
    the blended vector is re-normalized onto the unit sphere.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(store.entries):
        raise ValueError(f"k = {k} exceeds store size {len(store.entries)}")
    e = np.asarray(e_t, dtype=np.float64)
    sims = store.image_matrix.astype(np.float64) @ e
    ids = np.array([entry.id for entry in store.entries])
    top = np.lexsort((ids, -sims))[:k]
    s = sims[top]
    w = np.exp(s - s.max())
    w = w / w.sum()
    return normalize(w @ store.image_matrix[top].astype(np.float64))


def save_store(store: DatasetStore, path) -> None:
    """Persist a store directory; weight files are copied bitwise if needed."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    d = store.embed_dim
    text = np.zeros((len(store), d), dtype="<f4")
    image = np.zeros((len(store), d), dtype="<f4")
    cap_parts = []
    records = []
    for i, e in enumerate(store.entries):
        text[i] = e.text_embedding
        image[i] = e.image_embedding
        cb = e.caption.encode("utf-8")
        cap_parts.append(struct.pack("<I", len(cb)) + cb)
        records.append({
            "id": e.id,
            "caption_len": len(cb),
            "source_image_hash": e.source_image_hash.hex(),
            "inr_weights": e.inr_weights_ref,
            "plain_weights": e.plain_weights_ref,
            "blur_sigma": e.blur_sigma,
            "seed": e.seed,
        })
        for ref in (e.inr_weights_ref, e.plain_weights_ref):
            if ref is None:
                continue
            dst = path / ref
            dst.parent.mkdir(parents=True, exist_ok=True)
            src = (store.root / ref) if store.root is not None else None
            if src is not None and src.resolve() != dst.resolve():
                shutil.copyfile(src, dst)
            elif src is None:
                raise FileNotFoundError(f"store has no root to resolve {ref}")
    (path / "embeddings.bin").write_bytes(text.tobytes() + image.tobytes())
    (path / "captions.bin").write_bytes(b"".join(cap_parts))
    manifest = {
        "format": _STORE_FORMAT,
        "embed_dim": d,
        "encoder_fingerprint": store.encoder_fingerprint,
        "entry_count": len(store),
        "entries": records,
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(path / "manifest.json")


def load_store(path, expected_fingerprint: str | None = None,
               allow_mismatch: bool = False) -> DatasetStore:
    """Load a store directory; verifies the encoder fingerprint when given."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != _STORE_FORMAT:
        raise ValueError(f"{path}: unknown store format {manifest.get('format')!r}")
    d = int(manifest["embed_dim"])
    n = int(manifest["entry_count"])
    fp = manifest["encoder_fingerprint"]
    if expected_fingerprint is not None and fp != expected_fingerprint:
        if not allow_mismatch:
            raise FingerprintMismatchError(
                f"store was built with encoder {fp}, active encoder is "
                f"{expected_fingerprint}; pass allow_mismatch to override")
    raw = (path / "embeddings.bin").read_bytes()
    if len(raw) != 2 * n * d * 4:
        raise ValueError(f"{path}: embeddings.bin has wrong size")
    text = np.frombuffer(raw, dtype="<f4", count=n * d).reshape(n, d).copy()
    image = np.frombuffer(raw, dtype="<f4", count=n * d, offset=n * d * 4).reshape(n, d).copy()
    cap_raw = (path / "captions.bin").read_bytes()
    captions, off = [], 0
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", cap_raw, off)
        off += 4
        captions.append(cap_raw[off : off + ln].decode("utf-8"))
        off += ln
    entries = []
    for i, rec in enumerate(manifest["entries"]):
        entries.append(DatasetEntry(
            id=int(rec["id"]),
            image_embedding=image[i],
            text_embedding=text[i],
            caption=captions[i],
            source_image_hash=bytes.fromhex(rec["source_image_hash"]),
            inr_weights_ref=rec.get("inr_weights"),
            plain_weights_ref=rec.get("plain_weights"),
            blur_sigma=float(rec.get("blur_sigma", 0.0)),
            seed=int(rec.get("seed", 0)),
        ))
    return DatasetStore(entries, d, fp, root=path)


def stores_equal(a: DatasetStore, b: DatasetStore) -> bool:
    """Field-for-field equality, embeddings and weight files bitwise."""
    if (a.embed_dim, a.encoder_fingerprint, len(a)) != (b.embed_dim, b.encoder_fingerprint, len(b)):
        return False
    for ea, eb in zip(a.entries, b.entries):
        if (ea.id, ea.caption, ea.source_image_hash) != (eb.id, eb.caption, eb.source_image_hash):
            return False
        if ea.image_embedding.tobytes() != eb.image_embedding.tobytes():
            return False
        if ea.text_embedding.tobytes() != eb.text_embedding.tobytes():
            return False
        for plain in (False, True):
            ra = ea.plain_weights_ref if plain else ea.inr_weights_ref
            rb = eb.plain_weights_ref if plain else eb.inr_weights_ref
            if (ra is None) != (rb is None):
                return False
            if ra is not None:
                if (a.root / ra).read_bytes() != (b.root / rb).read_bytes():
                    return False
    return True

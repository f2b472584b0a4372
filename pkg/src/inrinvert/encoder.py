"""Frozen multimodal encoder abstraction.

Two encoder kinds share one contract: a differentiable image tower and
(for the built-in toy encoder) a text tower, both mapping into the same
unit sphere.  External vision-transformer weights arrive through a neutral
tensor container plus a key/value manifest and are checked against a
recorded fixture embedding at load time.

The toy encoder is fully deterministic and cheap: 8x8 patches (centered at
mid-gray) through a seeded random linear map, sine nonlinearity, mean
pool, seeded projection, L2 normalization.  Its text tower hashes
lowercase character trigrams into 2048 buckets and projects them with a
seeded matrix.  It exists so the whole pipeline can be exercised end to
end without any external weights.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import load_png

_TOY_MASTER_SEED = 715517
_NORM_EPS = 0.0  # embeddings are normalized exactly; zero vectors are an error

# Standard channel statistics used by the reference CLIP preprocessing.
_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class EncoderLoadError(Exception):
    pass


class MissingTensorError(EncoderLoadError):
    pass


class ShapeMismatchError(EncoderLoadError):
    pass


class FixtureMismatchError(EncoderLoadError):
    pass


def normalize(v):
    """Project onto the unit sphere (numpy or torch)."""
    if isinstance(v, torch.Tensor):
        n = torch.linalg.vector_norm(v)
        if float(n) == 0.0:
            raise ValueError("cannot normalize a zero vector")
        return v / n
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def cosine_distance(a, b) -> float:
    """1 - a.b for unit-norm inputs; in [0, 2]."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return 1.0 - (a * b).sum()
    return float(1.0 - np.dot(np.asarray(a, np.float64), np.asarray(b, np.float64)))


def fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for byte in data:
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def trigram_hash_counts(text: str, buckets: int = 2048) -> np.ndarray:
    """Lowercase character-trigram counts under a fixed 32-bit FNV-1a hash."""
    if not text:
        raise ValueError("text must be nonempty")
    padded = "^" + text.lower() + "$"
    counts = np.zeros(buckets, dtype=np.float64)
    for i in range(len(padded) - 2):
        counts[fnv1a32(padded[i : i + 3].encode("utf-8")) % buckets] += 1.0
    return counts


def _resize_bilinear(img_t: torch.Tensor, size: int) -> torch.Tensor:
    """Differentiable (H, W, 3) -> (size, size, 3) resize."""
    if img_t.shape[0] == size and img_t.shape[1] == size:
        return img_t
    x = img_t.permute(2, 0, 1).unsqueeze(0)
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x.squeeze(0).permute(1, 2, 0)


class ToyEncoder:
    """Deterministic desk-scale stand-in for a frozen multimodal encoder."""

    kind = "toy"

    def __init__(self, seed: int = _TOY_MASTER_SEED, embed_dim: int = 64,
                 image_resolution: int = 64, patch_size: int = 8,
                 feature_dim: int = 256, text_buckets: int = 2048):
        if image_resolution % patch_size != 0:
            raise ValueError("image_resolution must be divisible by patch_size")
        self.seed = seed
        self.embed_dim = embed_dim
        self.image_resolution = image_resolution
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        self.text_buckets = text_buckets

        rng = np.random.Generator(np.random.PCG64(seed))
        p_in = patch_size * patch_size * 3
        self.w_patch = (rng.standard_normal((feature_dim, p_in)) * (3.0 / np.sqrt(p_in))).astype(np.float32)
        self.w_proj = (rng.standard_normal((embed_dim, feature_dim)) / np.sqrt(feature_dim)).astype(np.float32)
        self.w_text = (rng.standard_normal((embed_dim, text_buckets)) / np.sqrt(text_buckets)).astype(np.float32)
        self._cache: dict[torch.dtype, tuple[torch.Tensor, torch.Tensor]] = {}
        self.fingerprint = _fingerprint_arrays(
            {"patch": self.w_patch, "proj": self.w_proj, "text": self.w_text},
            meta=f"toy/{embed_dim}/{image_resolution}/{patch_size}/{feature_dim}/{text_buckets}",
        )

    def _weights_t(self, dtype: torch.dtype):
        if dtype not in self._cache:
            self._cache[dtype] = (
                torch.from_numpy(self.w_patch).to(dtype),
                torch.from_numpy(self.w_proj).to(dtype),
            )
        return self._cache[dtype]

    def embed_image_t(self, img_t: torch.Tensor) -> torch.Tensor:
        """Differentiable image tower; accepts (H, W, 3) or a batch (N, H, W, 3)."""
        batched = img_t.dim() == 4
        x = img_t if batched else img_t.unsqueeze(0)
        n, res, p = x.shape[0], self.image_resolution, self.patch_size
        if x.shape[1] != res or x.shape[2] != res:
            x = torch.stack([_resize_bilinear(im, res) for im in x])
        g = res // p
        patches = (
            x.reshape(n, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(n, g * g, p * p * 3)
        )
        w_patch, w_proj = self._weights_t(img_t.dtype)
        feats = torch.sin((patches - 0.5) @ w_patch.T)  # center: [0,1] pixels -> signed
        pooled = feats.mean(dim=1)
        emb = pooled @ w_proj.T
        emb = emb / torch.linalg.vector_norm(emb, dim=-1, keepdim=True)
        return emb if batched else emb.squeeze(0)

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            t = torch.from_numpy(np.asarray(img, dtype=np.float64))
            return self.embed_image_t(t).numpy()

    def embed_text(self, text: str) -> np.ndarray:
        counts = trigram_hash_counts(text, self.text_buckets)
        return normalize(self.w_text.astype(np.float64) @ counts)

    def to_container(self) -> dict[str, np.ndarray]:
        return {
            "toy.patch.weight": self.w_patch,
            "toy.proj.weight": self.w_proj,
            "toy.text.weight": self.w_text,
        }

    @classmethod
    def from_container(cls, tensors: dict[str, np.ndarray], image_resolution: int,
                       patch_size: int) -> "ToyEncoder":
        for name in ("toy.patch.weight", "toy.proj.weight", "toy.text.weight"):
            if name not in tensors:
                raise MissingTensorError(f"missing tensor: {name}")
        enc = cls.__new__(cls)
        enc.seed = -1
        enc.w_patch = tensors["toy.patch.weight"].astype(np.float32)
        enc.w_proj = tensors["toy.proj.weight"].astype(np.float32)
        enc.w_text = tensors["toy.text.weight"].astype(np.float32)
        enc.embed_dim = enc.w_proj.shape[0]
        enc.feature_dim = enc.w_proj.shape[1]
        enc.text_buckets = enc.w_text.shape[1]
        enc.image_resolution = image_resolution
        enc.patch_size = patch_size
        if enc.w_patch.shape != (enc.feature_dim, patch_size * patch_size * 3):
            raise ShapeMismatchError(
                f"toy.patch.weight has shape {enc.w_patch.shape}, expected "
                f"{(enc.feature_dim, patch_size * patch_size * 3)}"
            )
        enc._cache = {}
        enc.fingerprint = _fingerprint_arrays(
            {"patch": enc.w_patch, "proj": enc.w_proj, "text": enc.w_text},
            meta=f"toy/{enc.embed_dim}/{image_resolution}/{patch_size}/{enc.feature_dim}/{enc.text_buckets}",
        )
        return enc


def _fingerprint_arrays(arrays: dict[str, np.ndarray], meta: str = "") -> str:
    h = hashlib.sha256()
    h.update(meta.encode())
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()[:16]


class VitEncoder:
    """Vision-transformer image tower reconstructed from a tensor container.

    Pre-norm transformer with a class token, learned position embeddings and
    a final linear projection; matches the reference CLIP vision stack.  No
    text tower: text embeddings for external encoders are precomputed
    offline.
    """

    kind = "external"

    def __init__(self, tensors: dict[str, np.ndarray], image_resolution: int,
                 patch_size: int, depth: int, heads: int, embed_dim: int,
                 activation: str = "quick_gelu",
                 image_mean=_CLIP_MEAN, image_std=_CLIP_STD):
        self.image_resolution = image_resolution
        self.patch_size = patch_size
        self.depth = depth
        self.heads = heads
        self.embed_dim = embed_dim
        self.activation = activation
        self.image_mean = tuple(image_mean)
        self.image_std = tuple(image_std)

        names = ["patch_embed.weight", "class_embedding", "pos_embedding",
                 "ln_pre.weight", "ln_pre.bias", "ln_post.weight", "ln_post.bias",
                 "proj.weight"]
        for i in range(depth):
            for leaf in ("ln1.weight", "ln1.bias", "attn.q.weight", "attn.q.bias",
                         "attn.k.weight", "attn.k.bias", "attn.v.weight", "attn.v.bias",
                         "attn.out.weight", "attn.out.bias", "ln2.weight", "ln2.bias",
                         "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"):
                names.append(f"blocks.{i}.{leaf}")
        missing = [n for n in names if n not in tensors]
        if missing:
            raise MissingTensorError(f"missing tensor: {missing[0]} ({len(missing)} total)")

        self.width = int(tensors["class_embedding"].shape[-1])
        grid = image_resolution // patch_size
        expect = {
            "patch_embed.weight": (self.width, 3, patch_size, patch_size),
            "pos_embedding": (grid * grid + 1, self.width),
            "proj.weight": (embed_dim, self.width),
        }
        for name, shape in expect.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeMismatchError(
                    f"{name} has shape {tuple(tensors[name].shape)}, expected {shape}"
                )
        if self.width % heads != 0:
            raise ShapeMismatchError(f"width {self.width} not divisible by {heads} heads")
        self._np = {n: tensors[n].astype(np.float32) for n in names}
        self._cache: dict[torch.dtype, dict[str, torch.Tensor]] = {}
        self.fingerprint = _fingerprint_arrays(self._np, meta="vit")

    def _t(self, dtype: torch.dtype) -> dict[str, torch.Tensor]:
        if dtype not in self._cache:
            self._cache[dtype] = {k: torch.from_numpy(v).to(dtype) for k, v in self._np.items()}
        return self._cache[dtype]

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        if self.activation == "quick_gelu":
            return x * torch.sigmoid(1.702 * x)
        if self.activation == "gelu":
            return F.gelu(x)
        raise ValueError(f"unknown activation {self.activation!r}")

    def embed_image_t(self, img_t: torch.Tensor) -> torch.Tensor:
        batched = img_t.dim() == 4
        imgs = img_t if batched else img_t.unsqueeze(0)
        w = self._t(img_t.dtype)
        mean = torch.tensor(self.image_mean, dtype=img_t.dtype)
        std = torch.tensor(self.image_std, dtype=img_t.dtype)
        res, p = self.image_resolution, self.patch_size

        if imgs.shape[1] != res or imgs.shape[2] != res:
            imgs = torch.stack([_resize_bilinear(im, res) for im in imgs])
        x = ((imgs - mean) / std).permute(0, 3, 1, 2)
        x = F.conv2d(x, w["patch_embed.weight"], stride=p)  # (n, width, g, g)
        n = x.shape[0]
        x = x.reshape(n, self.width, -1).permute(0, 2, 1)  # (n, g*g, width)
        cls = w["class_embedding"].reshape(1, 1, -1).expand(n, 1, -1)
        x = torch.cat([cls, x], dim=1) + w["pos_embedding"]
        x = F.layer_norm(x, (self.width,), w["ln_pre.weight"], w["ln_pre.bias"])
        for i in range(self.depth):
            x = x + self._attn(F.layer_norm(x, (self.width,), w[f"blocks.{i}.ln1.weight"],
                                            w[f"blocks.{i}.ln1.bias"]), w, i)
            y = F.layer_norm(x, (self.width,), w[f"blocks.{i}.ln2.weight"],
                             w[f"blocks.{i}.ln2.bias"])
            y = self._act(y @ w[f"blocks.{i}.mlp.fc1.weight"].T + w[f"blocks.{i}.mlp.fc1.bias"])
            x = x + (y @ w[f"blocks.{i}.mlp.fc2.weight"].T + w[f"blocks.{i}.mlp.fc2.bias"])
        pooled = F.layer_norm(x[:, 0, :], (self.width,), w["ln_post.weight"], w["ln_post.bias"])
        emb = pooled @ w["proj.weight"].T
        emb = emb / torch.linalg.vector_norm(emb, dim=-1, keepdim=True)
        return emb if batched else emb.squeeze(0)

    def _attn(self, x: torch.Tensor, w: dict, i: int) -> torch.Tensor:
        n, s, d = x.shape
        hd = d // self.heads

        def split(t):
            return t.reshape(n, s, self.heads, hd).permute(0, 2, 1, 3)

        q = split(x @ w[f"blocks.{i}.attn.q.weight"].T + w[f"blocks.{i}.attn.q.bias"])
        k = split(x @ w[f"blocks.{i}.attn.k.weight"].T + w[f"blocks.{i}.attn.k.bias"])
        v = split(x @ w[f"blocks.{i}.attn.v.weight"].T + w[f"blocks.{i}.attn.v.bias"])
        att = torch.softmax((q @ k.transpose(-2, -1)) / np.sqrt(hd), dim=-1)
        out = (att @ v).permute(0, 2, 1, 3).reshape(n, s, d)
        return out @ w[f"blocks.{i}.attn.out.weight"].T + w[f"blocks.{i}.attn.out.bias"]

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            t = torch.from_numpy(np.asarray(img, dtype=np.float32))
            return self.embed_image_t(t).to(torch.float64).numpy()

    def embed_text(self, text: str) -> np.ndarray:
        raise EncoderLoadError("external encoder has no text tower; "
                               "use precomputed text embeddings")


EncoderHandle = ToyEncoder | VitEncoder


def embed_image(h: EncoderHandle, img) -> np.ndarray:
    """Unit-norm embedding of an image through the frozen image tower."""
    arr = img.detach().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    return h.embed_image(arr)


def embed_text(h: EncoderHandle, text: str) -> np.ndarray:
    if not text:
        raise ValueError("text must be nonempty")
    return h.embed_text(text)


def clipsim(h: EncoderHandle, img, text: str) -> float:
    """100 * max(0, cos) between the image and text embeddings."""
    return 100.0 * max(0.0, float(np.dot(embed_image(h, img), embed_text(h, text))))


# ----------------------------------------------------------------------------
# Tensor container ("NTC1") and encoder manifests
# ----------------------------------------------------------------------------

_NTC_MAGIC = b"NTC1"


def write_container(tensors: dict[str, np.ndarray], path) -> None:
    """magic "NTC1", u32 count, per tensor: u16 name len, name, u8 ndim, u32 dims, f32 data."""
    path = Path(path)
    parts = [_NTC_MAGIC, struct.pack("<I", len(tensors))]
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
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _NTC_MAGIC:
        raise EncoderLoadError(f"{path}: not a tensor container")
    (count,) = struct.unpack_from("<I", raw, 4)
    off = 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        end = off + 4 * size
        if end > len(raw):
            raise ShapeMismatchError(f"{name}: declared size exceeds container data")
        if name in tensors:
            raise EncoderLoadError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off = end
    return tensors


def read_kv(path) -> dict[str, str]:
    """key = value lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed line {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def write_kv(entries: dict, path) -> None:
    path = Path(path)
    text = "".join(f"{k} = {v}\n" for k, v in entries.items())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def save_encoder(enc: ToyEncoder, directory, fixture_image: np.ndarray | None = None) -> Path:
    """Write a toy encoder as container + manifest (+ optional fixture files)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_container(enc.to_container(), directory / "encoder.ntc")
    manifest = {
        "kind": "toy",
        "container": "encoder.ntc",
        "embed_dim": enc.embed_dim,
        "image_resolution": enc.image_resolution,
        "patch_size": enc.patch_size,
        "depth": 1,
        "heads": 1,
    }
    if fixture_image is not None:
        from .imaging import save_png

        save_png(fixture_image, directory / "fixture.png")
        emb = enc.embed_image(load_png(directory / "fixture.png"))
        (directory / "fixture_embedding.bin").write_bytes(emb.astype("<f4").tobytes())
        manifest["fixture_image"] = "fixture.png"
        manifest["fixture_embedding"] = "fixture_embedding.bin"
    write_kv(manifest, directory / "manifest.txt")
    return directory / "manifest.txt"


def load_encoder(container, manifest) -> EncoderHandle:
    """Build an encoder handle from a container and its manifest.

    ``manifest`` is a path to the key/value file (or a parsed dict);
    ``container`` may be None to use the manifest's ``container`` entry,
    resolved relative to the manifest location.  When the manifest records a
    fixture image/embedding pair, the reconstructed encoder must reproduce
    the recorded embedding to 1e-3 per coordinate.
    """
    base = Path(".")
    if not isinstance(manifest, dict):
        base = Path(manifest).parent
        manifest = read_kv(manifest)
    if container is None:
        container = base / manifest.get("container", "encoder.ntc")
    tensors = container if isinstance(container, dict) else read_container(container)

    kind = manifest.get("kind", "vit")
    if kind == "toy":
        enc: EncoderHandle = ToyEncoder.from_container(
            tensors,
            image_resolution=int(manifest.get("image_resolution", 64)),
            patch_size=int(manifest.get("patch_size", 8)),
        )
    elif kind in ("vit", "external"):
        mean = _parse_floats(manifest.get("image_mean")) or _CLIP_MEAN
        std = _parse_floats(manifest.get("image_std")) or _CLIP_STD
        enc = VitEncoder(
            tensors,
            image_resolution=int(manifest["image_resolution"]),
            patch_size=int(manifest["patch_size"]),
            depth=int(manifest["depth"]),
            heads=int(manifest["heads"]),
            embed_dim=int(manifest["embed_dim"]),
            activation=manifest.get("activation", "quick_gelu"),
            image_mean=mean,
            image_std=std,
        )
    else:
        raise EncoderLoadError(f"unknown encoder kind {kind!r}")

    if "fixture_image" in manifest and "fixture_embedding" in manifest:
        img = load_png(base / manifest["fixture_image"])
        recorded = np.frombuffer((base / manifest["fixture_embedding"]).read_bytes(),
                                 dtype="<f4").astype(np.float64)
        if recorded.size != enc.embed_dim:
            raise ShapeMismatchError(
                f"fixture embedding has {recorded.size} entries, expected {enc.embed_dim}"
            )
        got = enc.embed_image(img)
        err = float(np.max(np.abs(got - recorded)))
        if err >= 1e-3:
            raise FixtureMismatchError(
                f"fixture embedding mismatch: max abs err {err:.2e} >= 1e-3"
            )
    return enc


def _parse_floats(text: str | None):
    if not text:
        return None
    return tuple(float(x) for x in text.replace(",", " ").split())

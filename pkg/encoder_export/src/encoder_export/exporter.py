"""Export a CLIP ViT-B/32 vision tower into the neutral container format.

The tensor name map below carries the reference implementation's parameter
names into the container's architecture-neutral names.  A self-test fixture
(one 224x224 image plus its reference embedding) is recorded alongside so
the consumer can verify its reconstruction of the forward pass at load
time.

``model_id`` may be a pretrained checkpoint identifier/path, or
"random:<seed>" for a seeded randomly-initialized ViT-B/32 (the offline
test mode: the architecture and numerics are identical, only the weight
values differ).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .container import container_fingerprint, write_container, write_manifest

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

# reference parameter name -> container tensor name
NAME_MAP = {
    "vision_model.embeddings.patch_embedding.weight": "patch_embed.weight",
    "vision_model.embeddings.class_embedding": "class_embedding",
    "vision_model.embeddings.position_embedding.weight": "pos_embedding",
    "vision_model.pre_layrnorm.weight": "ln_pre.weight",
    "vision_model.pre_layrnorm.bias": "ln_pre.bias",
    "vision_model.post_layernorm.weight": "ln_post.weight",
    "vision_model.post_layernorm.bias": "ln_post.bias",
    "visual_projection.weight": "proj.weight",
}

_BLOCK_LEAF_MAP = {
    "layer_norm1.weight": "ln1.weight",
    "layer_norm1.bias": "ln1.bias",
    "self_attn.q_proj.weight": "attn.q.weight",
    "self_attn.q_proj.bias": "attn.q.bias",
    "self_attn.k_proj.weight": "attn.k.weight",
    "self_attn.k_proj.bias": "attn.k.bias",
    "self_attn.v_proj.weight": "attn.v.weight",
    "self_attn.v_proj.bias": "attn.v.bias",
    "self_attn.out_proj.weight": "attn.out.weight",
    "self_attn.out_proj.bias": "attn.out.bias",
    "layer_norm2.weight": "ln2.weight",
    "layer_norm2.bias": "ln2.bias",
    "mlp.fc1.weight": "mlp.fc1.weight",
    "mlp.fc1.bias": "mlp.fc1.bias",
    "mlp.fc2.weight": "mlp.fc2.weight",
    "mlp.fc2.bias": "mlp.fc2.bias",
}


def load_vision_model(model_id: str):
    from transformers import CLIPVisionConfig, CLIPVisionModelWithProjection

    if model_id.startswith("random:"):
        seed = int(model_id.split(":", 1)[1])
        torch.manual_seed(seed)
        model = CLIPVisionModelWithProjection(CLIPVisionConfig())
    else:
        model = CLIPVisionModelWithProjection.from_pretrained(model_id)
    model.eval()
    return model


def map_tensor_names(state: dict[str, torch.Tensor], depth: int) -> dict[str, np.ndarray]:
    name_map = dict(NAME_MAP)
    for i in range(depth):
        for src, dst in _BLOCK_LEAF_MAP.items():
            name_map[f"vision_model.encoder.layers.{i}.{src}"] = f"blocks.{i}.{dst}"
    out: dict[str, np.ndarray] = {}
    unmapped = []
    for key, value in state.items():
        if key in name_map:
            out[name_map[key]] = value.detach().to(torch.float32).numpy()
        else:
            unmapped.append(key)
    if unmapped:
        raise ValueError(f"unmapped reference tensors: {unmapped}")
    missing = [dst for dst in name_map.values() if dst not in out]
    if missing:
        raise ValueError(f"reference model lacks tensors for: {missing}")
    return out


def preprocess(image: np.ndarray, resolution: int) -> torch.Tensor:
    """Normalize-only preprocessing; inputs are expected at the model size.

    The consumer resizes bilinearly when fed other sizes; the recorded
    fixture is exported at the native resolution so the self-test does not
    depend on resize conventions.
    """
    if image.shape[0] != resolution or image.shape[1] != resolution:
        t = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
        t = torch.nn.functional.interpolate(
            t, size=(resolution, resolution), mode="bilinear", align_corners=False)
    else:
        t = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)
    return (t - mean) / std


def embed_reference(model, image: np.ndarray) -> np.ndarray:
    res = model.config.image_size
    with torch.no_grad():
        out = model(pixel_values=preprocess(image, res)).image_embeds[0]
        out = out / torch.linalg.vector_norm(out)
    return out.to(torch.float64).numpy()


def fixture_image(resolution: int, seed: int = 424242) -> np.ndarray:
    """Deterministic smooth test pattern at the model's native resolution."""
    rng = np.random.default_rng(seed)
    low = rng.random((14, 14, 3))
    t = torch.from_numpy(low).permute(2, 0, 1).unsqueeze(0)
    t = torch.nn.functional.interpolate(t, size=(resolution, resolution),
                                        mode="bilinear", align_corners=False)
    return t.squeeze(0).permute(1, 2, 0).numpy()


def export_encoder(model_id: str, out_dir) -> Path:
    """Write container + manifest + self-test fixture; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_vision_model(model_id)
    cfg = model.config
    tensors = map_tensor_names(dict(model.state_dict()), cfg.num_hidden_layers)
    write_container(tensors, out_dir / "encoder.ntc")

    img = fixture_image(cfg.image_size)
    arr8 = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr8, mode="RGB").save(out_dir / "fixture.png", format="PNG")
    quantized = np.asarray(Image.open(out_dir / "fixture.png").convert("RGB"),
                           dtype=np.float64) / 255.0
    emb = embed_reference(model, quantized)
    (out_dir / "fixture_embedding.bin").write_bytes(emb.astype("<f4").tobytes())

    manifest = {
        "kind": "vit",
        "source_model": model_id,
        "container": "encoder.ntc",
        "embed_dim": cfg.projection_dim,
        "image_resolution": cfg.image_size,
        "patch_size": cfg.patch_size,
        "depth": cfg.num_hidden_layers,
        "heads": cfg.num_attention_heads,
        "activation": cfg.hidden_act,
        "image_mean": ",".join(str(v) for v in CLIP_MEAN),
        "image_std": ",".join(str(v) for v in CLIP_STD),
        "resize": "bilinear",
        "fingerprint": container_fingerprint(tensors),
        "fixture_image": "fixture.png",
        "fixture_embedding": "fixture_embedding.bin",
    }
    write_manifest(manifest, out_dir / "manifest.txt")
    return out_dir / "manifest.txt"

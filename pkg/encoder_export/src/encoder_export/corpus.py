"""Precompute corpus text/image embeddings into the dataset-store layout.

For external encoders the core pipeline has no text tower, so text
embeddings are computed here (full CLIP, both towers) and written in the
store binary format the core loads directly.  When the tokenizer assets
are unavailable (offline test mode with random weights), captions are
tokenized by a deterministic hash fallback; embeddings remain format- and
norm-correct, which is what the cross-read contract checks.
"""

from __future__ import annotations

import hashlib
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .container import container_fingerprint, write_store_layout
from .exporter import map_tensor_names, preprocess

CONTEXT_LENGTH = 77


def load_full_model(model_id: str):
    from transformers import CLIPConfig, CLIPModel

    if model_id.startswith("random:"):
        seed = int(model_id.split(":", 1)[1])
        torch.manual_seed(seed)
        model = CLIPModel(CLIPConfig())
        tokenizer = None
    else:
        from transformers import AutoTokenizer, CLIPModel

        model = CLIPModel.from_pretrained(model_id)
        tokenizer = AutoTokenizer.from_pretrained(model_id)
    model.eval()
    return model, tokenizer


def hash_token_ids(caption: str, vocab_size: int, length: int = 16) -> list[int]:
    """Deterministic stand-in token sequence for offline mode."""
    ids = []
    data = caption.lower().encode("utf-8")
    counter = 0
    while len(ids) < length:
        h = hashlib.sha256(data + counter.to_bytes(4, "little")).digest()
        for i in range(0, len(h) - 1, 2):
            ids.append(int.from_bytes(h[i : i + 2], "little") % (vocab_size - 2) + 1)
            if len(ids) >= length:
                break
        counter += 1
    return ids


def embed_texts(model, tokenizer, captions: list[str]) -> np.ndarray:
    cfg = model.config.text_config
    if tokenizer is not None:
        batch = tokenizer(captions, padding=True, truncation=True,
                          max_length=CONTEXT_LENGTH, return_tensors="pt")
        ids, mask = batch["input_ids"], batch["attention_mask"]
    else:
        rows = [[cfg.bos_token_id] + hash_token_ids(c, cfg.vocab_size) + [cfg.eos_token_id]
                for c in captions]
        width = max(len(r) for r in rows)
        ids = torch.full((len(rows), width), cfg.pad_token_id, dtype=torch.long)
        mask = torch.zeros((len(rows), width), dtype=torch.long)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
            mask[i, : len(r)] = 1
    with torch.no_grad():
        out = model.text_model(input_ids=ids, attention_mask=mask)
        emb = model.text_projection(out.pooler_output)
        emb = emb / torch.linalg.vector_norm(emb, dim=-1, keepdim=True)
    return emb.to(torch.float64).numpy()


def embed_images(model, images: list[np.ndarray]) -> np.ndarray:
    res = model.config.vision_config.image_size
    with torch.no_grad():
        pixels = torch.cat([preprocess(img, res) for img in images])
        out = model.vision_model(pixel_values=pixels)
        emb = model.visual_projection(out.pooler_output)
        emb = emb / torch.linalg.vector_norm(emb, dim=-1, keepdim=True)
    return emb.to(torch.float64).numpy()


def export_corpus_embeddings(corpus_dir, model_id: str, out_dir) -> int:
    """Embed every image.png/image.txt pair; returns the entry count."""
    corpus_dir = Path(corpus_dir)
    pairs = []
    for png in sorted(corpus_dir.glob("*.png")):
        try:
            img = np.asarray(Image.open(png).convert("RGB"), dtype=np.float64) / 255.0
            caption = png.with_suffix(".txt").read_text().strip()
            if not caption:
                raise ValueError("empty caption")
        except (OSError, ValueError) as e:
            print(f"warning: skipping {png.name}: {e}", file=sys.stderr)
            continue
        pairs.append((png, img, caption))
    if not pairs:
        raise ValueError(f"no readable image/caption pairs in {corpus_dir}")

    model, tokenizer = load_full_model(model_id)
    captions = [c for _, _, c in pairs]
    text = embed_texts(model, tokenizer, captions)
    image = embed_images(model, [img for _, img, _ in pairs])

    vision_tensors = map_tensor_names(
        {k: v for k, v in model.state_dict().items()
         if k.startswith("vision_model.") or k == "visual_projection.weight"},
        model.config.vision_config.num_hidden_layers)
    hashes = []
    for png, img, _ in pairs:
        arr8 = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
        h = hashlib.sha256()
        h.update(np.asarray(arr8.shape, dtype="<u4").tobytes())
        h.update(arr8.tobytes())
        hashes.append(h.digest())
    write_store_layout(
        out_dir,
        captions=captions,
        text_embeddings=text,
        image_embeddings=image,
        embed_dim=model.config.projection_dim,
        encoder_fingerprint=container_fingerprint(vision_tensors),
        source_hashes=hashes,
    )
    return len(pairs)

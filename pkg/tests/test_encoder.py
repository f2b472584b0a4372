import numpy as np
import pytest
import torch

from inrinvert.encoder import (
    FixtureMismatchError,
    MissingTensorError,
    ToyEncoder,
    VitEncoder,
    clipsim,
    cosine_distance,
    embed_image,
    embed_text,
    load_encoder,
    normalize,
    read_container,
    save_encoder,
    trigram_hash_counts,
    write_container,
)
from inrinvert.fixtures import fixture_meta


class TestCosineDistance:
    def test_self_distance_zero(self, rng):
        v = normalize(rng.standard_normal(16))
        assert cosine_distance(v, v) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_is_one(self):
        a = np.zeros(4); a[0] = 1.0
        b = np.zeros(4); b[1] = 1.0
        assert cosine_distance(a, b) == pytest.approx(1.0)

    def test_antipodal_is_two(self, rng):
        v = normalize(rng.standard_normal(8))
        assert cosine_distance(v, -v) == pytest.approx(2.0)

    def test_symmetry(self, rng):
        a = normalize(rng.standard_normal(8))
        b = normalize(rng.standard_normal(8))
        assert cosine_distance(a, b) == pytest.approx(cosine_distance(b, a))


class TestToyImageTower:
    def test_unit_norm_for_any_input(self, rng, toy_encoder):
        for _ in range(5):
            img = rng.random((64, 64, 3))
            assert np.linalg.norm(embed_image(toy_encoder, img)) == pytest.approx(1.0, abs=1e-6)

    def test_deterministic(self, rng, toy_encoder):
        img = rng.random((64, 64, 3))
        assert np.array_equal(embed_image(toy_encoder, img), embed_image(toy_encoder, img))

    def test_resizes_other_resolutions(self, rng, toy_encoder):
        img = rng.random((48, 80, 3))
        e = embed_image(toy_encoder, img)
        assert e.shape == (64,)
        assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-6)

    def test_gradient_of_cosine_loss_matches_finite_differences(self, rng, toy_encoder):
        img = torch.from_numpy(rng.random((16, 16, 3))).requires_grad_(True)
        target = torch.from_numpy(embed_text(toy_encoder, "finite difference target"))
        loss = 1.0 - (toy_encoder.embed_image_t(img) * target).sum()
        loss.backward()
        g = img.grad.numpy().copy()
        fd = np.zeros_like(g)
        with torch.no_grad():
            flat = img.reshape(-1)
            h = 1e-6
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                hi = 1.0 - float((toy_encoder.embed_image_t(img) * target).sum())
                flat[i] = orig - h
                lo = 1.0 - float((toy_encoder.embed_image_t(img) * target).sum())
                flat[i] = orig
                fd.reshape(-1)[i] = (hi - lo) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4

    def test_lipschitz_bound_from_fixture_metadata(self, rng, toy_encoder):
        c = fixture_meta()["image_tower_lipschitz"]
        for _ in range(40):
            a = rng.random((64, 64, 3))
            b = np.clip(a + rng.normal(0, rng.uniform(0.002, 0.05), a.shape), 0, 1)
            de = np.linalg.norm(embed_image(toy_encoder, a) - embed_image(toy_encoder, b))
            dp = np.linalg.norm(a - b)
            assert de <= c * dp


class TestToyTextTower:
    def test_unit_norm(self, toy_encoder):
        assert np.linalg.norm(embed_text(toy_encoder, "hello world")) == pytest.approx(1.0, abs=1e-6)

    def test_identical_strings_identical_embeddings(self, toy_encoder):
        a = embed_text(toy_encoder, "A Striped Umbrella")
        b = embed_text(toy_encoder, "A Striped Umbrella")
        assert np.array_equal(a, b)

    def test_case_insensitive(self, toy_encoder):
        assert np.array_equal(embed_text(toy_encoder, "Red Fox"),
                              embed_text(toy_encoder, "red fox"))

    def test_empty_text_rejected(self, toy_encoder):
        with pytest.raises(ValueError):
            embed_text(toy_encoder, "")

    def test_single_char_text_works(self, toy_encoder):
        e = embed_text(toy_encoder, "x")
        assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-6)

    def test_trigram_counts(self):
        counts = trigram_hash_counts("ab")  # padded to ^ab$
        assert counts.sum() == 2.0

    def test_fixture_pairs_rank_own_caption_first(self, toy_encoder, fixture_corpus):
        captions = [c for _, _, c in fixture_corpus]
        text = np.stack([embed_text(toy_encoder, c) for c in captions])
        for i, (_, img, _) in enumerate(fixture_corpus):
            sims = text @ embed_image(toy_encoder, img)
            assert int(np.argmax(sims)) == i


class TestClipsim:
    def test_matching_embedding_scores_100(self, toy_encoder, fixture_corpus, monkeypatch):
        _, img, caption = fixture_corpus[0]
        e = embed_text(toy_encoder, caption)
        monkeypatch.setattr(ToyEncoder, "embed_image", lambda self, x: e)
        assert clipsim(toy_encoder, img, caption) == pytest.approx(100.0, abs=1e-6)

    def test_orthogonal_scores_zero(self, toy_encoder, monkeypatch):
        e = embed_text(toy_encoder, "anything")
        ortho = np.zeros_like(e)
        ortho[np.argmin(np.abs(e))] = 1.0
        ortho = normalize(ortho - float(ortho @ e) * e)
        monkeypatch.setattr(ToyEncoder, "embed_image", lambda self, x: ortho)
        assert clipsim(toy_encoder, np.zeros((64, 64, 3)), "anything") == pytest.approx(0.0, abs=1e-9)

    def test_anti_aligned_clamped_to_zero(self, toy_encoder, monkeypatch):
        e = embed_text(toy_encoder, "anything")
        monkeypatch.setattr(ToyEncoder, "embed_image", lambda self, x: -e)
        assert clipsim(toy_encoder, np.zeros((64, 64, 3)), "anything") == 0.0


class TestTensorContainer:
    def test_roundtrip(self, rng, tmp_path):
        tensors = {
            "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "b.bias": rng.standard_normal(7).astype(np.float32),
            "scalar": np.float32(2.5).reshape(()),
        }
        write_container(tensors, tmp_path / "t.ntc")
        out = read_container(tmp_path / "t.ntc")
        assert list(out) == list(tensors)
        for k in tensors:
            assert np.array_equal(out[k], tensors[k])

    def test_toy_encoder_container_roundtrip(self, toy_encoder, fixture_corpus, tmp_path):
        manifest = save_encoder(toy_encoder, tmp_path / "enc",
                                fixture_image=fixture_corpus[0][1])
        reloaded = load_encoder(None, manifest)
        assert reloaded.fingerprint == toy_encoder.fingerprint
        for _, img, caption in fixture_corpus[:3]:
            assert np.array_equal(embed_image(reloaded, img), embed_image(toy_encoder, img))
            assert np.array_equal(embed_text(reloaded, caption), embed_text(toy_encoder, caption))

    def test_missing_tensor_named_in_error(self, toy_encoder, tmp_path):
        manifest = save_encoder(toy_encoder, tmp_path / "enc")
        tensors = read_container(tmp_path / "enc" / "encoder.ntc")
        del tensors["toy.proj.weight"]
        with pytest.raises(MissingTensorError, match="toy.proj.weight"):
            load_encoder(tensors, manifest)

    def test_fixture_mismatch_detected(self, toy_encoder, fixture_corpus, tmp_path):
        save_encoder(toy_encoder, tmp_path / "enc", fixture_image=fixture_corpus[0][1])
        emb_file = tmp_path / "enc" / "fixture_embedding.bin"
        emb = np.frombuffer(emb_file.read_bytes(), dtype="<f4").copy()
        emb[0] += 0.01
        emb_file.write_bytes(emb.tobytes())
        with pytest.raises(FixtureMismatchError):
            load_encoder(None, tmp_path / "enc" / "manifest.txt")


def _tiny_vit_tensors(rng, width=32, depth=2, heads=4, patch=16, res=64, embed_dim=16):
    g = res // patch
    t = {
        "patch_embed.weight": rng.normal(0, 0.02, (width, 3, patch, patch)),
        "class_embedding": rng.normal(0, 0.02, width),
        "pos_embedding": rng.normal(0, 0.02, (g * g + 1, width)),
        "ln_pre.weight": np.ones(width), "ln_pre.bias": np.zeros(width),
        "ln_post.weight": np.ones(width), "ln_post.bias": np.zeros(width),
        "proj.weight": rng.normal(0, 0.02, (embed_dim, width)),
    }
    for i in range(depth):
        t[f"blocks.{i}.ln1.weight"] = np.ones(width)
        t[f"blocks.{i}.ln1.bias"] = np.zeros(width)
        t[f"blocks.{i}.ln2.weight"] = np.ones(width)
        t[f"blocks.{i}.ln2.bias"] = np.zeros(width)
        for nm in ("q", "k", "v", "out"):
            t[f"blocks.{i}.attn.{nm}.weight"] = rng.normal(0, 0.02, (width, width))
            t[f"blocks.{i}.attn.{nm}.bias"] = np.zeros(width)
        t[f"blocks.{i}.mlp.fc1.weight"] = rng.normal(0, 0.02, (width * 4, width))
        t[f"blocks.{i}.mlp.fc1.bias"] = np.zeros(width * 4)
        t[f"blocks.{i}.mlp.fc2.weight"] = rng.normal(0, 0.02, (width, width * 4))
        t[f"blocks.{i}.mlp.fc2.bias"] = np.zeros(width)
    return {k: v.astype(np.float32) for k, v in t.items()}


class TestVitEncoder:
    def test_forward_unit_norm_and_deterministic(self, rng):
        enc = VitEncoder(_tiny_vit_tensors(rng), image_resolution=64, patch_size=16,
                         depth=2, heads=4, embed_dim=16)
        img = rng.random((64, 64, 3))
        e1 = enc.embed_image(img)
        e2 = enc.embed_image(img)
        assert np.linalg.norm(e1) == pytest.approx(1.0, abs=1e-6)
        assert np.array_equal(e1, e2)

    def test_text_tower_absent(self, rng):
        enc = VitEncoder(_tiny_vit_tensors(rng), image_resolution=64, patch_size=16,
                         depth=2, heads=4, embed_dim=16)
        with pytest.raises(Exception, match="text tower"):
            enc.embed_text("anything")

    def test_differentiable_wrt_pixels(self, rng):
        enc = VitEncoder(_tiny_vit_tensors(rng), image_resolution=64, patch_size=16,
                         depth=2, heads=4, embed_dim=16)
        img = torch.from_numpy(rng.random((64, 64, 3)).astype(np.float32)).requires_grad_(True)
        e = enc.embed_image_t(img)
        e.sum().backward()
        assert torch.isfinite(img.grad).all()
        assert float(img.grad.abs().sum()) > 0

    def test_missing_block_tensor(self, rng):
        tensors = _tiny_vit_tensors(rng)
        del tensors["blocks.1.mlp.fc2.bias"]
        with pytest.raises(MissingTensorError, match="blocks.1.mlp.fc2.bias"):
            VitEncoder(tensors, image_resolution=64, patch_size=16, depth=2,
                       heads=4, embed_dim=16)

    def test_shape_mismatch(self, rng):
        tensors = _tiny_vit_tensors(rng)
        tensors["proj.weight"] = tensors["proj.weight"][:, :-1]
        with pytest.raises(Exception, match="proj.weight"):
            VitEncoder(tensors, image_resolution=64, patch_size=16, depth=2,
                       heads=4, embed_dim=16)

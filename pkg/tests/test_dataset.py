import numpy as np
import pytest

from inrinvert.dataset import (
    DatasetEntry,
    DatasetStore,
    FingerprintMismatchError,
    blend_target,
    blur_sigma_for,
    load_store,
    prepare_entry,
    retrieve_init,
    save_store,
    stores_equal,
)
from inrinvert.encoder import embed_image, embed_text
from inrinvert.gradients import ParamVector
from inrinvert.inr import INRSpec, init_finer, save_inr
from inrinvert.robust_init import AWPConfig, RobustFitConfig


def synthetic_store(rng, n, d=16, root=None, with_weights=False):
    entries = []
    for i in range(n):
        t = rng.standard_normal(d)
        v = rng.standard_normal(d)
        entries.append(DatasetEntry(
            id=i,
            image_embedding=v / np.linalg.norm(v),
            text_embedding=t / np.linalg.norm(t),
            caption=f"synthetic caption number {i}",
            source_image_hash=rng.bytes(32),
            blur_sigma=float(rng.uniform(10, 20)),
            seed=i,
        ))
    return DatasetStore(entries, d, "synthetic-fp", root=root)


class TestRetrieveInit:
    def test_exact_match_returns_that_entry(self, rng):
        store = synthetic_store(rng, 64)
        e = store.entries[17].text_embedding.astype(np.float64)
        assert retrieve_init(e, store).id == 17

    def test_single_entry_store(self, rng):
        store = synthetic_store(rng, 1)
        e = rng.standard_normal(16)
        e /= np.linalg.norm(e)
        assert retrieve_init(e, store).id == 0

    def test_empty_store_errors(self):
        store = DatasetStore([], 16, "fp")
        with pytest.raises(ValueError):
            retrieve_init(np.ones(16) / 4.0, store)

    def test_matches_exhaustive_oracle_on_512_entries(self, rng):
        store = synthetic_store(rng, 512)
        for _ in range(20):
            e = rng.standard_normal(16)
            e /= np.linalg.norm(e)
            got = retrieve_init(e, store)
            best = max(store.entries,
                       key=lambda x: (float(np.dot(x.text_embedding.astype(np.float64), e)), -x.id))
            assert got.id == best.id

    def test_tie_broken_by_ascending_id(self, rng):
        d = 8
        t = rng.standard_normal(d)
        t /= np.linalg.norm(t)
        entries = [DatasetEntry(id=i, image_embedding=t, text_embedding=t,
                                caption="same", source_image_hash=b"0" * 32)
                   for i in (5, 2, 9)]
        store = DatasetStore(entries, d, "fp")
        assert retrieve_init(t, store).id == 2


class TestBlendTarget:
    def test_k1_returns_nearest_image_embedding(self, rng):
        store = synthetic_store(rng, 32)
        e = store.entries[5].image_embedding.astype(np.float64)
        out = blend_target(e, store, 1)
        assert np.allclose(out, store.entries[5].image_embedding.astype(np.float64), atol=1e-7)

    def test_unit_norm(self, rng):
        store = synthetic_store(rng, 32)
        e = rng.standard_normal(16)
        e /= np.linalg.norm(e)
        assert np.linalg.norm(blend_target(e, store, 8)) == pytest.approx(1.0, abs=1e-6)

    def test_softmax_weights_positive_and_sum_to_one(self, rng):
        store = synthetic_store(rng, 16)
        e = rng.standard_normal(16)
        e /= np.linalg.norm(e)
        sims = store.image_matrix.astype(np.float64) @ e
        top = np.sort(np.argsort(-sims)[:8])
        s = sims[top]
        w = np.exp(s - s.max())
        w /= w.sum()
        assert np.all(w > 0) and w.sum() == pytest.approx(1.0)

    def test_permutation_invariance(self, rng):
        store = synthetic_store(rng, 24)
        perm = rng.permutation(24)
        shuffled = DatasetStore(
            [store.entries[i] for i in perm], store.embed_dim, store.encoder_fingerprint)
        e = rng.standard_normal(16)
        e /= np.linalg.norm(e)
        assert np.allclose(blend_target(e, store, 8), blend_target(e, shuffled, 8), atol=1e-12)

    def test_k_exceeding_store_errors(self, rng):
        store = synthetic_store(rng, 4)
        with pytest.raises(ValueError):
            blend_target(store.entries[0].text_embedding, store, 5)

    def test_weights_continuous_in_query(self, rng):
        store = synthetic_store(rng, 64)
        e = rng.standard_normal(16)
        e /= np.linalg.norm(e)
        base = blend_target(e, store, 8)
        for scale in (1e-6, 1e-5):
            delta = rng.standard_normal(16) * scale
            moved = blend_target((e + delta) / np.linalg.norm(e + delta), store, 8)
            assert np.linalg.norm(moved - base) < 1e3 * scale


class TestPersistence:
    def _store_with_weights(self, rng, tmp_path, n=4):
        spec = INRSpec(hidden_width=6, hidden_layers=2)
        root = tmp_path / "store"
        (root / "weights").mkdir(parents=True)
        entries = []
        for i in range(n):
            t = rng.standard_normal(16)
            v = rng.standard_normal(16)
            ref = f"weights/entry_{i:05d}.inrw"
            save_inr(init_finer(spec, i), root / ref)
            entries.append(DatasetEntry(
                id=i,
                image_embedding=v / np.linalg.norm(v),
                text_embedding=t / np.linalg.norm(t),
                caption=f"entry {i} caption with unicode éè",
                source_image_hash=rng.bytes(32),
                inr_weights_ref=ref,
                blur_sigma=12.5,
                seed=i,
            ))
        store = DatasetStore(entries, 16, "fp-abc", root=root)
        save_store(store, root)
        return store, root

    def test_empty_store_roundtrips(self, tmp_path):
        store = DatasetStore([], 16, "fp-empty")
        save_store(store, tmp_path / "s")
        out = load_store(tmp_path / "s")
        assert len(out) == 0 and out.embed_dim == 16
        assert out.encoder_fingerprint == "fp-empty"

    def test_roundtrip_bitwise(self, rng, tmp_path):
        store, root = self._store_with_weights(rng, tmp_path)
        out = load_store(root)
        assert stores_equal(store, out)

    def test_save_to_new_location_copies_weight_files(self, rng, tmp_path):
        store, root = self._store_with_weights(rng, tmp_path)
        save_store(store, tmp_path / "copy")
        out = load_store(tmp_path / "copy")
        assert stores_equal(store, out)

    def test_fingerprint_mismatch_raises_and_is_overridable(self, rng, tmp_path):
        _, root = self._store_with_weights(rng, tmp_path)
        with pytest.raises(FingerprintMismatchError):
            load_store(root, expected_fingerprint="other-encoder")
        out = load_store(root, expected_fingerprint="other-encoder", allow_mismatch=True)
        assert len(out) == 4

    def test_weights_loadable_after_roundtrip(self, rng, tmp_path):
        store, root = self._store_with_weights(rng, tmp_path)
        out = load_store(root)
        w = out.load_weights(out.entries[2])
        assert np.array_equal(w.params.values, init_finer(w.spec, 2).params.values)

    def test_missing_plain_weights_reported(self, rng, tmp_path):
        store, root = self._store_with_weights(rng, tmp_path)
        out = load_store(root)
        with pytest.raises(FileNotFoundError, match="plain"):
            out.load_weights(out.entries[0], plain=True)


class TestPrepareEntry:
    @pytest.fixture(scope="class")
    def tiny_setup(self, request):
        rng = np.random.default_rng(5)
        toy = request.getfixturevalue("toy_encoder")
        spec = INRSpec(hidden_width=8, hidden_layers=2)
        fit = RobustFitConfig(steps=30)
        return rng, toy, spec, fit

    def test_deterministic_given_seed(self, tiny_setup, fixture_corpus):
        rng, toy, spec, fit = tiny_setup
        _, img, caption = fixture_corpus[0]
        e1, w1, _ = prepare_entry(img, caption, toy, spec, fit, AWPConfig(), seed=4)
        e2, w2, _ = prepare_entry(img, caption, toy, spec, fit, AWPConfig(), seed=4)
        assert np.array_equal(e1.image_embedding, e2.image_embedding)
        assert np.array_equal(e1.text_embedding, e2.text_embedding)
        assert np.array_equal(w1.params.values, w2.params.values)
        assert e1.blur_sigma == e2.blur_sigma

    def test_embeddings_unit_norm(self, tiny_setup, fixture_corpus):
        rng, toy, spec, fit = tiny_setup
        _, img, caption = fixture_corpus[1]
        entry, _, _ = prepare_entry(img, caption, toy, spec, fit, AWPConfig(), seed=4)
        assert np.linalg.norm(entry.image_embedding.astype(np.float64)) == pytest.approx(1.0, abs=1e-5)
        assert np.linalg.norm(entry.text_embedding.astype(np.float64)) == pytest.approx(1.0, abs=1e-5)

    def test_blur_sigma_in_range_and_content_dependent(self, rng):
        h1, h2 = rng.bytes(32), rng.bytes(32)
        s1 = blur_sigma_for(3, h1)
        s2 = blur_sigma_for(3, h2)
        assert 10.0 <= s1 <= 20.0 and 10.0 <= s2 <= 20.0
        assert s1 != s2
        assert blur_sigma_for(3, h1) == s1


class TestFixtureStoreCoupling:
    def test_store_matches_fixture_corpus(self, fixture_store, fixture_corpus):
        assert len(fixture_store) == 16
        captions = [c for _, _, c in fixture_corpus]
        assert [e.caption for e in fixture_store.entries] == captions

    def test_image_embedding_near_own_caption(self, fixture_store):
        # anchor-render embedding ranks its caption in the top 4 of 16
        text = fixture_store.text_matrix.astype(np.float64)
        for i, e in enumerate(fixture_store.entries):
            sims = text @ e.image_embedding.astype(np.float64)
            rank = int(np.sum(sims > sims[i])) + 1
            assert rank <= 4, f"entry {i} ranks {rank}"

    def test_store_weights_load(self, fixture_store):
        w = fixture_store.load_weights(fixture_store.entries[0])
        assert w.spec.hidden_width == 64
        wp = fixture_store.load_weights(fixture_store.entries[0], plain=True)
        assert wp.spec == w.spec

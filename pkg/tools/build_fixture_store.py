#!/usr/bin/env python3
"""Build the prebuilt fixture store shipped with the package.

Trains a robust anchor plus a matching plain fit for each of the 16 fixture
pairs and persists the store under src/inrinvert/fixtures/store/.  Takes
tens of CPU-minutes; rerun only when the toy encoder, fixture corpus, the
network architecture/init, or the anchor trainers change.
"""

from __future__ import annotations

import shutil
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from inrinvert.dataset import build_store  # noqa: E402
from inrinvert.encoder import ToyEncoder  # noqa: E402
from inrinvert.fixtures import (  # noqa: E402
    FIXTURE_STORE_SEED,
    fixture_awp_config,
    fixture_fit_config,
    fixture_inr_spec,
    load_fixture_corpus,
)

OUT = Path(__file__).resolve().parents[1] / "src" / "inrinvert" / "fixtures" / "store"


def main():
    corpus = load_fixture_corpus()
    enc = ToyEncoder()
    if OUT.exists():
        shutil.rmtree(OUT)
    t0 = time.perf_counter()

    def progress(i, n, caption):
        print(f"[{i + 1}/{n}] {caption} ({time.perf_counter() - t0:.0f}s)", flush=True)

    store = build_store(
        [(img, caption) for _, img, caption in corpus],
        enc,
        fixture_inr_spec(),
        fixture_fit_config(),
        fixture_awp_config(),
        seed=FIXTURE_STORE_SEED,
        out_dir=OUT,
        with_plain=True,
        progress=progress,
    )

    text = store.text_matrix.astype(np.float64)
    ranks = []
    for i, e in enumerate(store.entries):
        sims = text @ e.image_embedding.astype(np.float64)
        ranks.append(int(np.sum(sims > sims[i])) + 1)
    print(f"anchor-render own-caption ranks: {ranks}")
    print(f"store at {OUT} ({time.perf_counter() - t0:.0f}s total)")
    if max(ranks) > 4:
        raise SystemExit("coupling too weak after anchor fits")


if __name__ == "__main__":
    main()

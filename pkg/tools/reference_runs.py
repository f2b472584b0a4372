#!/usr/bin/env python3
"""Reference runs that freeze the regression floors used by the acceptance suite.

Run after any change to the numeric core, fixtures, or store; paste the
reported numbers into tests/test_acceptance.py (they are recorded there as
explicit constants with provenance comments).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import inrinvert as ii  # noqa: E402
from inrinvert.dataset import blur_sigma_for  # noqa: E402
from inrinvert.fixtures import (  # noqa: E402
    FIXTURE_STORE_SEED,
    load_fixture_corpus,
    load_fixture_store,
)
from inrinvert.imaging import gaussian_blur, high_band_fraction, image_hash, psnr, radial_power_spectrum  # noqa: E402
from inrinvert.inr import CoordinateGrid, render  # noqa: E402
from inrinvert.inversion import InversionConfig, invert  # noqa: E402


def toy_cfg(**kw):
    base = dict(procrustes_p=16, blend_k=8, seed=2024)
    base.update(kw)
    return InversionConfig(**base)


def robust_fit_reference():
    corpus = load_fixture_corpus()
    _, img, _ = corpus[0]
    sigma = blur_sigma_for(FIXTURE_STORE_SEED, image_hash(img))
    spec = ii.INRSpec()
    fit = ii.RobustFitConfig(steps=900, blur_sigma=sigma)
    t0 = time.perf_counter()
    w = ii.train_robust_inr(img, spec, fit, ii.AWPConfig(), seed=FIXTURE_STORE_SEED)
    dt = time.perf_counter() - t0
    target = gaussian_blur(img, fit.blur_kernel, sigma)
    out = render(w, CoordinateGrid(64, 64))
    bands = radial_power_spectrum(out)
    print(f"[robust-fit 5x256] sigma={sigma:.3f} steps=900 psnr={psnr(out, target):.2f} dB "
          f"high-band fraction={high_band_fraction(bands):.4f} time={dt:.0f}s")


def fresh_init_reference():
    fracs = []
    for seed in range(8):
        w = ii.init_finer(ii.INRSpec(), seed)
        bands = radial_power_spectrum(render(w, CoordinateGrid(64, 64)))
        fracs.append(bands[:16].sum() / bands.sum())
    print(f"[fresh-init 5x256] below-Nyquist-midpoint fraction: "
          f"min={min(fracs):.4f} mean={np.mean(fracs):.4f}")


def end_to_end_reference(store, toy, steps=400):
    print(f"[end-to-end] {steps} steps, full config")
    reductions, improvements = [], []
    t0 = time.perf_counter()
    for i, e in enumerate(store.entries):
        cfg = toy_cfg(steps=steps, seed=1000 + i)
        weights, trace = invert(e.caption, store, toy, cfg)
        img = render(weights, CoordinateGrid(64, 64))
        init = store.load_weights(
            ii.dataset.retrieve_init(_target(e.caption, store, toy, cfg), store))
        init_img = render(init, CoordinateGrid(64, 64))
        c_final = ii.clipsim(toy, img, e.caption)
        c_init = ii.clipsim(toy, init_img, e.caption)
        red = 1 - trace[-1].align_loss / trace[0].align_loss
        reductions.append(red)
        improvements.append(c_final - c_init)
        print(f"  {i:2d}: align {trace[0].align_loss:.4f} -> {trace[-1].align_loss:.4f} "
              f"({100 * red:.1f}%) clipsim {c_init:.2f} -> {c_final:.2f}")
    print(f"  median reduction={100 * float(np.median(reductions)):.1f}% "
          f"min={100 * min(reductions):.1f}% clipsim improved on "
          f"{sum(1 for d in improvements if d > 0)}/16 time={time.perf_counter() - t0:.0f}s")


def _target(caption, store, toy, cfg):
    from inrinvert.alignment import build_local_pairs, solve_procrustes, project_text

    e_t = ii.embed_text(toy, caption)
    if cfg.use_procrustes:
        r = solve_procrustes(build_local_pairs(e_t, store, cfg.procrustes_p))
        e = project_text(e_t, r)
        return e if cfg.retrieve_by == "projected" else e_t
    return e_t


def coarse_to_fine_reference(store, toy):
    print("[coarse-to-fine] schedule on vs off at step 100")
    wins = 0
    t0 = time.perf_counter()
    for i, e in enumerate(store.entries):
        fracs = {}
        for on in (True, False):
            cfg = toy_cfg(steps=100, seed=500 + i, use_freq_schedule=on)
            weights, _ = invert(e.caption, store, toy, cfg)
            bands = radial_power_spectrum(render(weights, CoordinateGrid(64, 64)))
            fracs[on] = high_band_fraction(bands)
        wins += fracs[True] < fracs[False]
        print(f"  {i:2d}: on={fracs[True]:.4f} off={fracs[False]:.4f}")
    print(f"  schedule-on lower on {wins}/16 time={time.perf_counter() - t0:.0f}s")


def ablation_reference(store, toy, steps=400):
    print("[ablation] full vs no-AWP mean clipsim")
    sims = {"full": [], "no_awp": []}
    t0 = time.perf_counter()
    for i, e in enumerate(store.entries):
        for label, flag in (("full", True), ("no_awp", False)):
            cfg = toy_cfg(steps=steps, seed=1000 + i, use_awp_init=flag)
            weights, _ = invert(e.caption, store, toy, cfg)
            sims[label].append(ii.clipsim(toy, render(weights, CoordinateGrid(64, 64)), e.caption))
    print(f"  full={np.mean(sims['full']):.3f} no_awp={np.mean(sims['no_awp']):.3f} "
          f"time={time.perf_counter() - t0:.0f}s")
    return sims


def drift_reference(store, toy, steps=400):
    print("[awp drift] final-vs-init embedding similarity, robust vs plain init")
    wins = 0
    for i, e in enumerate(store.entries):
        sims = {}
        for label, flag in (("robust", True), ("plain", False)):
            cfg = toy_cfg(steps=steps, seed=1000 + i, use_awp_init=flag)
            weights, _ = invert(e.caption, store, toy, cfg)
            out_e = ii.embed_image(toy, render(weights, CoordinateGrid(64, 64)))
            init = store.load_weights(e, plain=not flag)
            init_e = ii.embed_image(toy, render(init, CoordinateGrid(64, 64)))
            sims[label] = float(out_e @ init_e)
        wins += sims["robust"] > sims["plain"]
        print(f"  {i:2d}: robust={sims['robust']:.4f} plain={sims['plain']:.4f}")
    print(f"  robust closer on {wins}/16")


def tasks_reference(store, toy):
    from inrinvert.tasks import edit, reconstruct, style_transfer

    corpus = load_fixture_corpus()
    print("[tasks] reconstruction similarity over 16 fixtures (store anchors as init)")
    t0 = time.perf_counter()
    sims = []
    for i, (_, img, _) in enumerate(corpus):
        cfg = toy_cfg(steps=300, seed=3000 + i, use_blend=False, use_procrustes=False)
        anchor = store.load_weights(store.entries[i])
        run = reconstruct(img, toy, cfg, init_weights=anchor)
        sims.append(float(ii.embed_image(toy, run.image) @ ii.embed_image(toy, img)))
    print(f"  min={min(sims):.4f} mean={np.mean(sims):.4f} time={time.perf_counter() - t0:.0f}s")

    _, img, _ = corpus[7]
    init = store.load_weights(store.entries[7], plain=True)
    cfg = toy_cfg(steps=300, seed=77, use_blend=False, use_procrustes=False)
    run = style_transfer(img, img, toy, cfg, init_weights=init)
    sim = float(ii.embed_image(toy, run.image) @ ii.embed_image(toy, img))
    print(f"  style degenerate (style=content): similarity={sim:.4f}")

    _, img, _ = corpus[3]
    anchor = store.load_weights(store.entries[3])
    own = ii.embed_image(toy, img)
    run = edit(img, "unused", toy, cfg, init_weights=anchor, target_embedding=own)
    sim = float(ii.embed_image(toy, run.image) @ own)
    print(f"  edit near-fixed-point: similarity={sim:.4f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("parts", nargs="*", default=[],
                    help="subset: fit init e2e ctf ablate drift tasks")
    args = ap.parse_args()
    parts = set(args.parts) or {"fit", "init", "e2e", "ctf", "ablate", "drift", "tasks"}

    toy = ii.ToyEncoder()
    store = load_fixture_store(expected_fingerprint=toy.fingerprint) \
        if parts & {"e2e", "ctf", "ablate", "drift", "tasks"} else None
    if "init" in parts:
        fresh_init_reference()
    if "fit" in parts:
        robust_fit_reference()
    if "e2e" in parts:
        end_to_end_reference(store, toy)
    if "ctf" in parts:
        coarse_to_fine_reference(store, toy)
    if "ablate" in parts:
        ablation_reference(store, toy)
    if "drift" in parts:
        drift_reference(store, toy)
    if "tasks" in parts:
        tasks_reference(store, toy)


if __name__ == "__main__":
    main()

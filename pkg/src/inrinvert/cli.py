"""Command-line surface: dataset preparation, generation, tasks, ablations.

Every command writes its output plus a replayable run manifest (a key/value
file holding the fully resolved configuration); re-running a command with
``--config <manifest>`` and the toy encoder reproduces the output bitwise.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields as dataclass_fields
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import tasks as task_mod
from .encoder import EncoderLoadError, ToyEncoder, clipsim, embed_image, embed_text, load_encoder
from .gradients import NumericalOverflowError
from .imaging import load_png, save_png
from .inr import CoordinateGrid, INRSpec, render
from .inversion import FingerprintError, InversionConfig, invert, write_trace
from .robust_init import AWPConfig, RobustFitConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, ValueError):
        return text


def read_config_file(path) -> dict:
    """key = value lines; values are JSON scalars/lists where possible."""
    from .encoder import read_kv

    return {k: _parse_value(v) for k, v in read_kv(path).items()}


_CONFIG_FIELDS = {f.name for f in dataclass_fields(InversionConfig)}
_TUPLE_FIELDS = {"schedule_centers", "clip_thresholds", "scale_range", "adam_betas"}


def build_inversion_config(file_values: dict, overrides: dict) -> InversionConfig:
    """Defaults < config file < explicit flags."""
    merged = {}
    for src in (file_values, overrides):
        for k, v in src.items():
            if k in _CONFIG_FIELDS and v is not None:
                merged[k] = tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
    return InversionConfig(**merged)


def _load_encoder_arg(spec: str):
    if spec == "toy":
        return ToyEncoder()
    path = Path(spec)
    manifest = path if path.is_file() else path / "manifest.txt"
    if not manifest.is_file():
        raise EncoderLoadError(f"no encoder manifest at {manifest}")
    return load_encoder(None, manifest)


def _write_manifest(out_path: Path, command: str, args_ns, cfg: InversionConfig | None,
                    encoder, store, duration: float, outputs: list[str],
                    warnings: int = 0) -> Path:
    from .encoder import write_kv

    entries: dict = {"command": command}
    ns = vars(args_ns)
    for key in ("prompt", "corpus", "image", "content", "style", "prompts"):
        if ns.get(key) is not None:
            entries[key] = ns[key]
    entries["encoder"] = ns.get("encoder", "toy")
    if ns.get("store"):
        entries["store"] = ns["store"]
    if cfg is not None:
        for f in dataclass_fields(InversionConfig):
            v = getattr(cfg, f.name)
            entries[f.name] = json.dumps(list(v)) if isinstance(v, tuple) else \
                (json.dumps(v) if isinstance(v, (bool, str)) else v)
    for key in ("fit_steps", "with_plain", "content_weight", "refine_steps"):
        if ns.get(key) is not None:
            entries[key] = ns[key]
    if encoder is not None:
        entries["encoder_fingerprint"] = encoder.fingerprint
    if store is not None:
        entries["store_fingerprint"] = store.encoder_fingerprint
    entries["duration_seconds"] = f"{duration:.3f}"
    entries["outputs"] = json.dumps(outputs)
    entries["warnings"] = warnings
    manifest_path = out_path.parent / (out_path.name + ".manifest")
    write_kv(entries, manifest_path)
    return manifest_path


def main(argv=None) -> int:
    parser = _Parser(prog="inrinvert",
                     description="decoder-free text-to-image inversion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, store_required=False):
        p.add_argument("--encoder", default="toy",
                       help="'toy' or path to an encoder manifest/directory")
        p.add_argument("--store", required=store_required, help="dataset store directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="key/value config file")
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--allow-encoder-mismatch", action="store_true")

    p = sub.add_parser("prepare-dataset", help="build a store from an image corpus")
    p.add_argument("--corpus", required=True, help="directory of image.png + image.txt pairs")
    shared(p)
    p.add_argument("--fit-steps", type=int, default=None, help="anchor fit steps")
    p.add_argument("--hidden-width", type=int, default=None)
    p.add_argument("--with-plain", action="store_true",
                   help="also store non-robust fits (ablation support)")
    p.add_argument("--text-embeddings", default=None,
                   help="store-layout directory with precomputed text embeddings")

    p = sub.add_parser("generate", help="synthesize an image from a prompt")
    p.add_argument("--prompt", required=True)
    shared(p, store_required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--suffix", default=None, help="prompt suffix")
    p.add_argument("--no-awp", action="store_true")
    p.add_argument("--no-procrustes", action="store_true")
    p.add_argument("--no-freq-schedule", action="store_true")
    p.add_argument("--no-blend", action="store_true")

    p = sub.add_parser("reconstruct", help="rebuild an image from its embedding")
    p.add_argument("--image", required=True)
    shared(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--fit-steps", type=int, default=None)

    p = sub.add_parser("edit", help="prompt-driven image modification")
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    shared(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--fit-steps", type=int, default=None)
    p.add_argument("--refine-steps", type=int, default=None)
    p.add_argument("--content-weight", type=float, default=None)

    p = sub.add_parser("style", help="neural style transfer")
    p.add_argument("--content", required=True)
    p.add_argument("--style", required=True)
    shared(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--fit-steps", type=int, default=None)
    p.add_argument("--content-weight", type=float, default=None)

    p = sub.add_parser("ablate", help="run switch variants over a prompt list")
    p.add_argument("--prompts", required=True, help="text file, one prompt per line")
    shared(p, store_required=True)
    p.add_argument("--steps", type=int, default=None)

    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return _dispatch(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalOverflowError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ds.FingerprintMismatchError, FingerprintError, EncoderLoadError,
            FileNotFoundError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def _dispatch(args) -> int:
    t0 = time.perf_counter()
    file_values = read_config_file(args.config) if args.config else {}
    encoder = _load_encoder_arg(file_values.get("encoder", args.encoder)
                                if args.encoder == "toy" else args.encoder)

    overrides = {
        "seed": args.seed,
        "steps": getattr(args, "steps", None),
        "prompt_suffix": getattr(args, "suffix", None),
    }
    for flag, key in (("no_awp", "use_awp_init"), ("no_procrustes", "use_procrustes"),
                      ("no_freq_schedule", "use_freq_schedule"), ("no_blend", "use_blend")):
        if getattr(args, flag, False):
            overrides[key] = False
    cfg = build_inversion_config(file_values, overrides)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.command == "prepare-dataset":
        return _cmd_prepare(args, cfg, encoder, out, t0, file_values)

    store = None
    if args.store:
        store = ds.load_store(args.store, expected_fingerprint=encoder.fingerprint,
                              allow_mismatch=args.allow_encoder_mismatch)

    if args.command == "generate":
        return _cmd_generate(args, cfg, encoder, store, out, t0)
    if args.command == "ablate":
        return _cmd_ablate(args, cfg, encoder, store, out, t0)
    return _cmd_task(args, cfg, encoder, store, out, t0, file_values)


def _resolve_fit(args, cfg, file_values, default_steps=None):
    spec_kw = {"hidden_width": getattr(args, "hidden_width", None)
               or file_values.get("hidden_width")}
    spec = INRSpec(**{k: v for k, v in spec_kw.items() if v})
    steps = getattr(args, "fit_steps", None) or file_values.get("fit_steps") or default_steps
    fit = RobustFitConfig(steps=steps) if steps else RobustFitConfig()
    return spec, fit


def _cmd_prepare(args, cfg, encoder, out, t0, file_values) -> int:
    corpus = Path(args.corpus)
    if not corpus.is_dir():
        raise UsageError(f"corpus directory {corpus} does not exist")
    pairs = []
    warnings = 0
    for png in sorted(corpus.glob("*.png")):
        caption_file = png.with_suffix(".txt")
        try:
            image = load_png(png)
            caption = caption_file.read_text().strip()
            if not caption:
                raise ValueError("empty caption")
        except (OSError, ValueError) as e:
            print(f"warning: skipping {png.name}: {e}", file=sys.stderr)
            warnings += 1
            continue
        pairs.append((image, caption))
    if not pairs:
        raise ValueError(f"no readable image/caption pairs in {corpus}")

    text_overrides = None
    if args.text_embeddings:
        text_overrides = _load_text_embeddings(args.text_embeddings, encoder.embed_dim)

    spec, fit = _resolve_fit(args, cfg, file_values)
    awp = AWPConfig()

    def progress(i, n, caption):
        total = f"/{n}" if n else ""
        print(f"[{i + 1}{total}] {caption}")

    store = ds.build_store(pairs, encoder, spec, fit, awp, seed=cfg.seed,
                           out_dir=out, with_plain=getattr(args, "with_plain", False),
                           progress=progress)
    if text_overrides is not None:
        replaced = 0
        for e in store.entries:
            if e.caption in text_overrides:
                e.text_embedding = text_overrides[e.caption]
                replaced += 1
        ds.save_store(store, out)
        print(f"applied {replaced} precomputed text embeddings")
    _write_manifest(out / "store", "prepare-dataset", args, cfg, encoder, store,
                    time.perf_counter() - t0, [str(out)], warnings=warnings)
    print(f"store with {len(store)} entries at {out}")
    return EXIT_OK


def _load_text_embeddings(path, embed_dim) -> dict[str, np.ndarray]:
    exported = ds.load_store(path, expected_fingerprint=None)
    if exported.embed_dim != embed_dim:
        raise ValueError(f"text embeddings have dim {exported.embed_dim}, "
                         f"encoder expects {embed_dim}")
    return {e.caption: e.text_embedding for e in exported.entries}


def _cmd_generate(args, cfg, encoder, store, out, t0) -> int:
    weights, trace = invert(args.prompt, store, encoder, cfg)
    size = cfg.render_size or encoder.image_resolution
    image = render(weights, CoordinateGrid(size, size))
    save_png(image, out)
    trace_path = out.with_suffix(".trace.txt")
    write_trace(trace, trace_path)
    _write_manifest(out, "generate", args, cfg, encoder, store,
                    time.perf_counter() - t0, [str(out), str(trace_path)])
    score = clipsim(encoder, image, args.prompt)
    print(f"wrote {out} (clipsim {score:.2f})")
    return EXIT_OK


_VARIANTS = [
    ("i.full", {}),
    ("ii.no_freq", {"use_freq_schedule": False}),
    ("iii.no_awp", {"use_awp_init": False}),
    ("iv.no_freq_no_procrustes", {"use_freq_schedule": False, "use_procrustes": False}),
    ("v.no_freq_no_blend", {"use_freq_schedule": False, "use_blend": False}),
]


def _cmd_ablate(args, cfg, encoder, store, out, t0) -> int:
    prompts = [ln.strip() for ln in Path(args.prompts).read_text().splitlines() if ln.strip()]
    if not prompts:
        raise ValueError(f"no prompts in {args.prompts}")
    size = cfg.render_size or encoder.image_resolution
    rows = []
    for name, switches in _VARIANTS:
        sims, losses, failures = [], [], 0
        for prompt in prompts:
            try:
                weights, trace = invert(prompt, store, encoder, replace(cfg, **switches))
                image = render(weights, CoordinateGrid(size, size))
                sims.append(clipsim(encoder, image, prompt))
                losses.append(trace[-1].align_loss if trace else float("nan"))
            except (NumericalOverflowError, FileNotFoundError, ValueError) as e:
                print(f"warning: {name} failed on {prompt!r}: {e}", file=sys.stderr)
                failures += 1
        mean_sim = float(np.mean(sims)) if sims else float("nan")
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        rows.append((name, mean_sim, mean_loss, failures))
        print(f"{name}: clipsim {mean_sim:.3f}, final align loss {mean_loss:.5f}")
    lines = ["variant\tmean_clipsim\tmean_final_align_loss\tfailures"]
    lines += [f"{n}\t{s:.6f}\t{l:.8f}\t{f}" for n, s, l, f in rows]
    out.write_text("\n".join(lines) + "\n")
    _write_manifest(out, "ablate", args, cfg, encoder, store,
                    time.perf_counter() - t0, [str(out)])
    return EXIT_OK


def _cmd_task(args, cfg, encoder, store, out, t0, file_values) -> int:
    spec, fit = _resolve_fit(args, cfg, file_values, default_steps=None)
    if args.command == "reconstruct":
        result = task_mod.reconstruct(load_png(args.image), encoder, cfg, spec=spec, fit=fit)
    elif args.command == "edit":
        cw = args.content_weight if args.content_weight is not None else 0.0
        refine = args.refine_steps if args.refine_steps is not None else 500
        result = task_mod.edit(load_png(args.image), args.prompt, encoder, cfg,
                               store=store, spec=spec, fit=fit,
                               content_weight=cw, refine_steps=refine)
    else:
        cw = args.content_weight if args.content_weight is not None else 0.5
        result = task_mod.style_transfer(load_png(args.content), load_png(args.style),
                                         encoder, cfg, spec=spec, fit=fit,
                                         content_weight=cw)
    save_png(result.image, out)
    trace_path = out.with_suffix(".trace.txt")
    write_trace(result.trace, trace_path)
    _write_manifest(out, args.command, args, cfg, encoder, store,
                    time.perf_counter() - t0, [str(out), str(trace_path)])
    print(f"wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

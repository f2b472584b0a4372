"""Built-in desk-scale fixtures: 16 coupled (image, caption) pairs.

The fixture images were synthesized against the toy encoder so that each
image embeds closest to its own caption, and still does after the heavy
dataset-preparation blur (see tools/gen_fixtures.py in the repository).
A prebuilt store over this corpus ships with the package so the end-to-end
tests do not pay for sixteen anchor fits on every run.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import DatasetStore, load_store
from .imaging import load_png
from .inr import INRSpec
from .robust_init import AWPConfig, RobustFitConfig

# Desk-scale network for fixture anchors: same depth as the full-scale
# default, narrower layers so a fit stays in CPU-seconds territory.
FIXTURE_HIDDEN_WIDTH = 64
FIXTURE_FIT_STEPS = 1500
FIXTURE_STORE_SEED = 90

FIXTURE_CAPTIONS = [
    "crimson sunset over a calm dark ocean",
    "bright yellow sunflower field under a blue sky",
    "deep green pine forest in soft morning fog",
    "violet dusk sky above jagged mountain peaks",
    "orange desert dunes with long shadows",
    "turquoise shallow lagoon with white sand",
    "red brick wall half covered in ivy",
    "pale grey city skyline in heavy rain",
    "golden wheat field swaying at noon",
    "black volcanic beach under low clouds",
    "pink cherry blossoms against a white wall",
    "icy blue glacier wall above still water",
    "emerald rice terraces on a steep hillside",
    "ochre canyon walls glowing at sunrise",
    "lavender rows stretching toward the horizon",
    "silver moonlight on a rippling midnight lake",
]


def fixture_inr_spec() -> INRSpec:
    return INRSpec(hidden_width=FIXTURE_HIDDEN_WIDTH)


def fixture_fit_config() -> RobustFitConfig:
    return RobustFitConfig(steps=FIXTURE_FIT_STEPS)


def fixture_awp_config() -> AWPConfig:
    return AWPConfig()


def _data_dir() -> Path:
    return Path(resources.files("inrinvert") / "fixtures")


def fixture_corpus_dir() -> Path:
    d = _data_dir() / "corpus"
    if not d.is_dir():
        raise FileNotFoundError(
            "fixture corpus not present; run tools/gen_fixtures.py")
    return d


def fixture_store_dir() -> Path:
    d = _data_dir() / "store"
    if not d.is_dir():
        raise FileNotFoundError(
            "fixture store not present; run tools/build_fixture_store.py")
    return d


def load_fixture_corpus() -> list[tuple[str, np.ndarray, str]]:
    """(name, image, caption) triples, sorted by name."""
    out = []
    corpus = fixture_corpus_dir()
    for png in sorted(corpus.glob("*.png")):
        caption = png.with_suffix(".txt").read_text().strip()
        out.append((png.stem, load_png(png), caption))
    return out


def load_fixture_store(expected_fingerprint: str | None = None) -> DatasetStore:
    return load_store(fixture_store_dir(), expected_fingerprint=expected_fingerprint)


def fixture_meta() -> dict:
    return json.loads((_data_dir() / "meta.json").read_text())

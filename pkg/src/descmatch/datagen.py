"""Synthetic hierarchical corpus and feature generator.

Each image carries one sentence per hierarchy level and deeper sentences
are strict supersets: level l appends new words to level l-1.  Appended
words are drawn from per-level strata whose vocabularies grow with depth,
so deeper words are rarer and mean token rarity rises monotonically with
level.  Features place every text near its image's latent with noise that
shrinks as the level deepens; with noise_sigma 0 the text features equal
the image features bit for bit because both run through the same code
path.

Randomness is split by stream: default_rng([seed, 0]) drives the corpus,
default_rng([seed, 1]) the features, so editing one stage never shifts
the other.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import geometry

# words added on top of the inherited prefix at each level
_BASE_SHARED = 3
_BASE_RARE = 1
_STEP_SHARED = 1
_STEP_RARE = 2


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 200
    levels: int = 4
    shared_vocab: int = 12
    rare_vocab: int = 600
    feature_dim: int = 48
    noise_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 2 or self.levels < 1 or self.feature_dim < 2:
            raise ValueError("bad synthetic dimensions")
        if self.shared_vocab < 1 or self.rare_vocab < self.levels:
            raise ValueError("vocabularies too small")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _strata(spec: SynthSpec) -> list[list[str]]:
    """Per-level word pools with sizes proportional to depth, so deeper
    words spread over a larger pool and end up in fewer sentences."""
    weight_sum = spec.levels * (spec.levels + 1) // 2
    strata = []
    used = 0
    for level in range(1, spec.levels + 1):
        if level < spec.levels:
            size = max(1, spec.rare_vocab * level // weight_sum)
        else:
            size = spec.rare_vocab - used
        strata.append([f"r{level}x{k:04d}" for k in range(size)])
        used += size
    return strata


def gen_corpus(spec: SynthSpec) -> list[corpus_mod.SentenceRecord]:
    """One cumulative sentence chain per image, all in the train split."""
    rng = np.random.default_rng([spec.seed, 0])
    shared = [f"s{k:02d}" for k in range(spec.shared_vocab)]
    strata = _strata(spec)
    records = []
    for i in range(spec.n_images):
        image_id = f"img{i:04d}"
        words: list[str] = []
        for level in range(1, spec.levels + 1):
            n_shared = _BASE_SHARED if level == 1 else _STEP_SHARED
            n_rare = _BASE_RARE if level == 1 else _STEP_RARE
            words = list(words)
            words.extend(shared[k] for k in rng.integers(0, len(shared), n_shared))
            pool = strata[level - 1]
            words.extend(pool[k] for k in rng.integers(0, len(pool), n_rare))
            records.append(corpus_mod.SentenceRecord(
                id=f"{image_id}-l{level}",
                image_id=image_id,
                text=" ".join(words),
                split="train",
                level=level,
            ))
    return records


def gen_features(spec: SynthSpec, records) -> tuple[list[str], np.ndarray, list[str], np.ndarray]:
    """Unit-normalized image latents and per-text noisy copies.

    A level-l text sits at the image latent plus (levels - l + 1) times
    noise_sigma of Gaussian noise, so deeper (more specific) texts land
    closer to the image.  Noise is always drawn, keeping the stream layout
    independent of noise_sigma.
    """
    rng = np.random.default_rng([spec.seed, 1])
    image_ids = sorted({r.image_id for r in records})
    latents = rng.normal(size=(len(image_ids), spec.feature_dim))
    image_feats = geometry.l2_normalize(latents)
    latent_of = {img: latents[k] for k, img in enumerate(image_ids)}
    text_ids = []
    text_raw = np.empty((len(records), spec.feature_dim))
    for k, r in enumerate(records):
        if r.level is None:
            raise ValueError(f"sentence {r.id} has no level")
        noise = rng.normal(size=spec.feature_dim)
        scale = (spec.levels - r.level + 1) * spec.noise_sigma
        text_ids.append(r.id)
        text_raw[k] = latent_of[r.image_id] + scale * noise
    return image_ids, image_feats, text_ids, geometry.l2_normalize(text_raw)


def write_dataset(out_dir, spec: SynthSpec) -> dict[str, str]:
    """Emit corpus.jsonl, table.jsonl, image/text feature files, and a
    spec echo into out_dir.  Returns the paths keyed by role."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = gen_corpus(spec)
    image_ids, image_feats, text_ids, text_feats = gen_features(spec, records)

    corpus_path = out / "corpus.jsonl"
    corpus_mod.write_corpus_jsonl(corpus_path, records)
    _, table = corpus_mod.build_table(records)
    table_path = out / "table.jsonl"
    corpus_mod.write_table_jsonl(table_path, table)
    img_manifest = geometry.write_features(out / "images", image_ids,
                                           image_feats, dtype="f64")
    txt_manifest = geometry.write_features(out / "texts", text_ids,
                                           text_feats, dtype="f64")
    spec_path = out / "synth_config.json"
    with open(spec_path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {
        "corpus": str(corpus_path),
        "table": str(table_path),
        "image_features": str(img_manifest),
        "text_features": str(txt_manifest),
        "spec": str(spec_path),
    }

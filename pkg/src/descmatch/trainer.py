"""Shared-embedding trainer over precomputed image and sentence features.

The model is one linear projection per modality followed by L2
normalization.  Backpropagation is hand-written: the losses return
gradients with respect to the normalized embeddings, and the chain rule
through row normalization is g_z = (g_e - (g_e . e) e) / ||z||.  Updates
use AdamW with decoupled weight decay (biases excluded).

Checkpoints are a single binary file: an 8-byte magic, a little-endian
uint64 header length, a sorted-keys JSON header describing the arrays and
carrying config, history, and the batch-shuffle rng state, then the raw
float64 array bytes in header order.  Equal runs produce equal bytes.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import evaluation, geometry
from .losses import (Batch, LossConfig, adaptive_triplet_loss, overall_loss,
                     triplet_loss)

_CKPT_MAGIC = b"DMCK0001"

# ablation variants: fixed-margin ranking, descriptiveness-scaled margins,
# and the full objective with the ordering penalty
LOSS_VARIANTS = {
    "baseline": triplet_loss,
    "adaptive": adaptive_triplet_loss,
    "full": overall_loss,
}


@dataclass(frozen=True)
class TrainConfig:
    embed_dim: int = 64
    batch_size: int = 128
    epochs: int = 25
    lr: float = 5e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 2
    decay_epoch: int = 15
    decay_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "full"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.embed_dim < 1 or self.batch_size < 2 or self.epochs < 1:
            raise ValueError("bad trainer dimensions")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")


@dataclass
class Dataset:
    """Feature-level view of one corpus split, ready for batching."""

    image_ids: list[str]
    image_feats: np.ndarray
    text_ids: list[str]
    text_feats: np.ndarray
    image_of_text: np.ndarray
    deltas: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        n_img, n_txt = len(self.image_ids), len(self.text_ids)
        if self.image_feats.shape[0] != n_img or self.text_feats.shape[0] != n_txt:
            raise ValueError("feature row counts disagree with id lists")
        for arr, name in ((self.image_of_text, "image_of_text"),
                          (self.deltas, "deltas"), (self.levels, "levels")):
            if arr.shape != (n_txt,):
                raise ValueError(f"{name} must have one entry per text")

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def n_texts(self) -> int:
        return len(self.text_ids)


def _load_features(path) -> tuple[list[str], np.ndarray]:
    """Accept a manifest path, a bare stem, or a JSONL fallback file."""
    p = Path(path)
    if p.name.endswith(".manifest.json"):
        return geometry.read_features(p)
    if p.name.endswith(".jsonl"):
        return geometry.read_features_jsonl(p)
    manifest = p.with_name(p.name + ".manifest.json")
    if manifest.exists():
        return geometry.read_features(manifest)
    raise FileNotFoundError(
        f"no feature file at {path} (expected *.manifest.json, *.jsonl, or a stem)")


def load_dataset(corpus_path, table_path, image_features_path,
                 text_features_path, split: str | None = None) -> Dataset:
    """Join a corpus file, its descriptiveness table, and feature files.

    Every kept sentence must have a feature row and a table entry; images
    are ordered by first appearance among the kept sentences.
    """
    records = corpus_mod.read_corpus_jsonl(corpus_path)
    if split is not None:
        records = [r for r in records if r.split == split]
    if not records:
        raise ValueError(f"no sentences for split {split!r} in {corpus_path}")
    table = corpus_mod.read_table_jsonl(table_path)
    img_ids, img_feats = _load_features(image_features_path)
    txt_ids, txt_feats = _load_features(text_features_path)
    img_row = {i: k for k, i in enumerate(img_ids)}
    txt_row = {i: k for k, i in enumerate(txt_ids)}

    image_ids: list[str] = []
    image_index: dict[str, int] = {}
    owners, deltas, levels, rows = [], [], [], []
    text_ids = []
    for r in records:
        if r.id not in txt_row:
            raise KeyError(f"sentence {r.id} missing from text features")
        if r.image_id not in img_row:
            raise KeyError(f"image {r.image_id} missing from image features")
        if r.id not in table.scores:
            raise KeyError(f"sentence {r.id} missing from descriptiveness table")
        if r.image_id not in image_index:
            image_index[r.image_id] = len(image_ids)
            image_ids.append(r.image_id)
        text_ids.append(r.id)
        rows.append(txt_row[r.id])
        owners.append(image_index[r.image_id])
        deltas.append(table.scores[r.id])
        levels.append(-1 if r.level is None else r.level)
    feat_rows = np.array([img_row[i] for i in image_ids], dtype=np.int64)
    return Dataset(
        image_ids=image_ids,
        image_feats=np.ascontiguousarray(img_feats[feat_rows]),
        text_ids=text_ids,
        text_feats=np.ascontiguousarray(txt_feats[np.array(rows, dtype=np.int64)]),
        image_of_text=np.array(owners, dtype=np.int64),
        deltas=np.array(deltas, dtype=np.float64),
        levels=np.array(levels, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Model: per-modality linear projection, then row normalization


def init_params(rng: np.random.Generator, d_img: int, d_txt: int,
                d_out: int) -> dict[str, np.ndarray]:
    return {
        "W_img": rng.normal(0.0, 1.0 / math.sqrt(d_img), size=(d_img, d_out)),
        "b_img": np.zeros(d_out),
        "W_txt": rng.normal(0.0, 1.0 / math.sqrt(d_txt), size=(d_txt, d_out)),
        "b_txt": np.zeros(d_out),
    }


def _project(feats: np.ndarray, W: np.ndarray, b: np.ndarray):
    z = feats @ W + b
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), geometry.NORM_FLOOR)
    return z / norms, norms


def forward(params: dict, img_feats: np.ndarray, txt_feats: np.ndarray):
    """Project both modalities onto the shared unit sphere.

    Returns (image_embs, text_embs, cache) where cache feeds backward.
    """
    img_e, img_n = _project(img_feats, params["W_img"], params["b_img"])
    txt_e, txt_n = _project(txt_feats, params["W_txt"], params["b_txt"])
    cache = {"img_feats": img_feats, "txt_feats": txt_feats,
             "img_e": img_e, "img_n": img_n, "txt_e": txt_e, "txt_n": txt_n}
    return img_e, txt_e, cache


def _norm_backward(g_e: np.ndarray, e: np.ndarray, norms: np.ndarray) -> np.ndarray:
    dots = np.sum(g_e * e, axis=1, keepdims=True)
    return (g_e - dots * e) / norms


def backward(cache: dict, g_img_e: np.ndarray, g_txt_e: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the loss with respect to the projection parameters."""
    g_zi = _norm_backward(g_img_e, cache["img_e"], cache["img_n"])
    g_zt = _norm_backward(g_txt_e, cache["txt_e"], cache["txt_n"])
    return {
        "W_img": cache["img_feats"].T @ g_zi,
        "b_img": g_zi.sum(axis=0),
        "W_txt": cache["txt_feats"].T @ g_zt,
        "b_txt": g_zt.sum(axis=0),
    }


# ---------------------------------------------------------------------------
# AdamW

_DECAYED = ("W_img", "W_txt")


def init_opt_state(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamw_step(params: dict, grads: dict, state: dict, lr: float,
               config: TrainConfig) -> None:
    """One in-place update: decoupled decay on weights only, then Adam."""
    state["t"] += 1
    t = state["t"]
    b1, b2 = config.beta1, config.beta2
    for name in sorted(params):
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        if name in _DECAYED:
            params[name] *= 1.0 - lr * config.weight_decay
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


# ---------------------------------------------------------------------------
# Batching


def epoch_plan(rng: np.random.Generator, dataset: Dataset,
               batch_size: int) -> list[tuple[list[int], list[int]]]:
    """Shuffle images and pack whole images until a batch holds at least
    batch_size texts.  Images keep all their texts together, so same-image
    pairs for the ordering loss are never split.  A trailing single-image
    batch is merged into its predecessor: mining needs two images.
    """
    texts_of: dict[int, list[int]] = {}
    for j, owner in enumerate(dataset.image_of_text):
        texts_of.setdefault(int(owner), []).append(j)
    order = [int(i) for i in rng.permutation(dataset.n_images) if int(i) in texts_of]
    batches: list[tuple[list[int], list[int]]] = []
    cur_i: list[int] = []
    cur_t: list[int] = []
    for gi in order:
        cur_i.append(gi)
        cur_t.extend(texts_of[gi])
        if len(cur_t) >= batch_size:
            batches.append((cur_i, cur_t))
            cur_i, cur_t = [], []
    if cur_i:
        batches.append((cur_i, cur_t))
    if len(batches) >= 2 and len(batches[-1][0]) < 2:
        last_i, last_t = batches.pop()
        batches[-1] = (batches[-1][0] + last_i, batches[-1][1] + last_t)
    if not batches or len(batches[0][0]) < 2:
        raise ValueError("dataset too small: every batch needs at least two images")
    return batches


def _make_batch(dataset: Dataset, img_e: np.ndarray, txt_e: np.ndarray,
                img_idx: list[int], txt_idx: list[int]) -> Batch:
    local = {gi: k for k, gi in enumerate(img_idx)}
    owners = np.array([local[int(dataset.image_of_text[j])] for j in txt_idx],
                      dtype=np.int64)
    return Batch(img_e, txt_e, owners, dataset.deltas[np.array(txt_idx, dtype=np.int64)])


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params: dict, opt_state: dict, epoch: int,
                    rng: np.random.Generator, config: TrainConfig,
                    history: list[dict]) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name in sorted(params):
        arrays.append((f"param/{name}", params[name]))
    for slot in ("m", "v"):
        for name in sorted(opt_state[slot]):
            arrays.append((f"adam_{slot}/{name}", opt_state[slot][name]))
    header = {
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "epoch": epoch,
        "adam_t": opt_state["t"],
        "rng_state": rng.bit_generator.state,
        "config": dataclasses.asdict(config),
        "history": history,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint (bad magic)")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        out: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            out[entry["name"]] = data.reshape(shape).astype(np.float64)
    params = {k.split("/", 1)[1]: v for k, v in out.items() if k.startswith("param/")}
    opt_state = {
        "t": header["adam_t"],
        "m": {k.split("/", 1)[1]: v for k, v in out.items() if k.startswith("adam_m/")},
        "v": {k.split("/", 1)[1]: v for k, v in out.items() if k.startswith("adam_v/")},
    }
    return {"params": params, "opt_state": opt_state, "epoch": header["epoch"],
            "rng_state": header["rng_state"], "config": header["config"],
            "history": header["history"]}


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    params: dict
    opt_state: dict
    history: list[dict]
    config: TrainConfig


def embed_dataset(params: dict, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    img_e, txt_e, _ = forward(params, dataset.image_feats, dataset.text_feats)
    return img_e, txt_e


def _val_rsum(params: dict, dataset: Dataset) -> float:
    img_e, txt_e = embed_dataset(params, dataset)
    sims = geometry.sim_matrix(img_e, txt_e)
    return evaluation.rsum(sims, dataset.image_of_text)


def train(dataset: Dataset, config: TrainConfig, val_dataset: Dataset | None = None,
          checkpoint_path=None, resume_from=None, log_fn=None) -> TrainResult:
    """Full training run.  Logs one record per epoch with the mean batch
    loss, its two components, the epoch lr, and RSUM on the validation
    set (the training set stands in when no validation split exists).

    With checkpoint_path set the state is rewritten after every epoch, so
    an interrupted run can resume via resume_from.  A non-finite loss
    aborts immediately.
    """
    if dataset.n_images < 2:
        raise ValueError("training needs at least two images")
    if resume_from is not None:
        saved = load_checkpoint(resume_from)
        want = dataclasses.asdict(config)
        have = dict(saved["config"])
        # epochs is the run target, not part of the training recipe, so a
        # resumed run may extend it
        want.pop("epochs"), have.pop("epochs")
        if have != want:
            raise ValueError("resume config disagrees with checkpoint config")
        params = saved["params"]
        opt_state = saved["opt_state"]
        history = list(saved["history"])
        start_epoch = saved["epoch"] + 1
        shuffle_rng = np.random.default_rng()
        shuffle_rng.bit_generator.state = saved["rng_state"]
    else:
        init_rng = np.random.default_rng([config.seed, 2])
        params = init_params(init_rng, dataset.image_feats.shape[1],
                             dataset.text_feats.shape[1], config.embed_dim)
        opt_state = init_opt_state(params)
        history = []
        start_epoch = 0
        shuffle_rng = np.random.default_rng([config.seed, 3])

    eval_set = val_dataset if val_dataset is not None else dataset
    loss_fn = LOSS_VARIANTS[config.variant]
    for epoch in range(start_epoch, config.epochs):
        lr = config.lr * (config.decay_factor if epoch >= config.decay_epoch else 1.0)
        mining = epoch >= config.warmup_epochs
        loss_cfg = dataclasses.replace(config.loss, use_hardest_mining=mining)
        plan = epoch_plan(shuffle_rng, dataset, config.batch_size)
        tot_loss = tot_trip = tot_order = 0.0
        for img_idx, txt_idx in plan:
            rows_i = np.array(img_idx, dtype=np.int64)
            rows_t = np.array(txt_idx, dtype=np.int64)
            img_e, txt_e, cache = forward(params, dataset.image_feats[rows_i],
                                          dataset.text_feats[rows_t])
            batch = _make_batch(dataset, img_e, txt_e, img_idx, txt_idx)
            out = loss_fn(batch, loss_cfg)
            if not math.isfinite(out.value):
                raise RuntimeError(f"non-finite loss at epoch {epoch}")
            grads = backward(cache, out.grad_images, out.grad_texts)
            adamw_step(params, grads, opt_state, lr, config)
            tot_loss += out.value
            tot_trip += out.diagnostics["triplet"]
            tot_order += out.diagnostics["ordering"]
        n_b = len(plan)
        record = {
            "epoch": epoch,
            "lr": lr,
            "mining": mining,
            "loss": tot_loss / n_b,
            "triplet": tot_trip / n_b,
            "ordering": tot_order / n_b,
            "val_rsum": _val_rsum(params, eval_set),
        }
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, params, opt_state, epoch,
                            shuffle_rng, config, history)
    return TrainResult(params, opt_state, history, config)

"""Ranking and ordering objectives over a batch of cross-modal embeddings.

Every loss returns its scalar value together with analytic gradients with
respect to both embedding matrices.  Gradients treat per-sentence
descriptiveness values as constants, use the exact subgradient 0 at hinge
kinks, and are checked against central finite differences (the oracle
perturbs the already-normalized embeddings without re-normalizing, so both
sides live in the same domain).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# incremented on every hardest_negatives call; tests reset it to observe
# the warm-up schedule
MINING_CALLS = 0


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    tau: float = 6.0
    lam: float = 0.07
    eps_delta: float = 1e-4
    eps_dist: float = 1e-4
    use_hardest_mining: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.eps_delta <= 0 or self.eps_dist <= 0:
            raise ValueError("clamps must be positive")


@dataclass
class Batch:
    """Aligned image/text embeddings with ownership and descriptiveness.

    ``image_embs`` is (n_images, D) and ``text_embs`` (n_texts, D); rows are
    unit vectors (checked loosely, so finite-difference perturbations of
    the embeddings remain admissible).  ``image_of_text[j]`` is the image
    owning text j; an image may own several texts.  ``pair_map`` lists the
    positive pairs the ranking losses sum over and defaults to one pair
    per text.
    """

    image_embs: np.ndarray
    text_embs: np.ndarray
    image_of_text: np.ndarray
    deltas: np.ndarray
    pair_map: list[tuple[int, int]] | None = None

    def __post_init__(self):
        self.image_embs = np.asarray(self.image_embs, dtype=np.float64)
        self.text_embs = np.asarray(self.text_embs, dtype=np.float64)
        self.image_of_text = np.asarray(self.image_of_text, dtype=np.int64)
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        n_img, n_txt = self.image_embs.shape[0], self.text_embs.shape[0]
        if self.image_embs.shape[1] != self.text_embs.shape[1]:
            raise ValueError("image/text embedding dims differ")
        if self.image_of_text.shape != (n_txt,) or self.deltas.shape != (n_txt,):
            raise ValueError("per-text arrays must have one entry per text")
        if n_txt and (self.image_of_text.min() < 0 or self.image_of_text.max() >= n_img):
            raise ValueError("text owner index out of range")
        if np.any(self.deltas < 0.0) or np.any(self.deltas > 1.0):
            raise ValueError("deltas must lie in [0, 1]")
        for embs, name in ((self.image_embs, "image"), (self.text_embs, "text")):
            norms = np.linalg.norm(embs, axis=1)
            if norms.size and np.max(np.abs(norms - 1.0)) > 1e-3:
                raise ValueError(f"{name} embeddings are not L2-normalized")
        if self.pair_map is None:
            self.pair_map = [(int(self.image_of_text[j]), j) for j in range(n_txt)]
        for i, j in self.pair_map:
            if not (0 <= i < n_img and 0 <= j < n_txt):
                raise ValueError(f"pair ({i}, {j}) out of range")
            if self.image_of_text[j] != i:
                raise ValueError(f"pair ({i}, {j}) disagrees with text ownership")

    @property
    def n_images(self) -> int:
        return self.image_embs.shape[0]

    @property
    def n_texts(self) -> int:
        return self.text_embs.shape[0]


@dataclass
class LossOutput:
    value: float
    grad_images: np.ndarray
    grad_texts: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _pair_arrays(pair_map: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    pairs = np.asarray(pair_map, dtype=np.int64).reshape(len(pair_map), 2)
    return pairs[:, 0], pairs[:, 1]


def hardest_negatives(sims: np.ndarray, pair_map: list[tuple[int, int]],
                      image_of_text: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per positive pair, the most-similar admissible negative text and image.

    Texts owned by the pair's image are excluded from the text-negative
    candidates (multi-caption batches); the pair's own image is excluded on
    the image side.  Ties break toward the lowest index (argmax keeps the
    first maximum).
    """
    global MINING_CALLS
    MINING_CALLS += 1
    sims = np.asarray(sims, dtype=np.float64)
    image_of_text = np.asarray(image_of_text, dtype=np.int64)
    n_img, _ = sims.shape
    p_i, p_j = _pair_arrays(pair_map)
    banned = image_of_text[None, :] == p_i[:, None]
    dead = np.flatnonzero(banned.all(axis=1))
    if dead.size:
        i, j = pair_map[int(dead[0])]
        raise ValueError(f"pair ({i}, {j}) has no admissible negative text")
    t_neg = np.where(banned, -np.inf, sims[p_i]).argmax(axis=1)
    if n_img < 2:
        i, j = pair_map[0]
        raise ValueError(f"pair ({i}, {j}) has no admissible negative image")
    img_cols = sims[:, p_j].T.copy()
    img_cols[np.arange(len(pair_map)), p_i] = -np.inf
    v_neg = img_cols.argmax(axis=1)
    return t_neg.astype(np.int64), v_neg.astype(np.int64)


def adaptive_margins(delta_t: float, delta_tneg: float, tau: float) -> tuple[float, float]:
    """Margins from descriptiveness sums: the text-side margin couples the
    positive and mined-negative sentences; the image-side margin doubles
    the positive sentence's score, exactly as formulated."""
    return (delta_t + delta_tneg) / tau, (delta_t + delta_t) / tau


def _ranking_loss(batch: Batch, config: LossConfig, adaptive: bool) -> LossOutput:
    """Shared hinge-ranking core.

    With mining on, each pair contributes two hinges against its hardest
    negatives.  With mining off (warm-up), the hardest negative is replaced
    by the mean of the per-negative hinge terms over all admissible
    negatives, each with its own margin in the adaptive case.
    """
    imgs, txts = batch.image_embs, batch.text_embs
    deltas = batch.deltas
    sims = imgs @ txts.T
    grad_i = np.zeros_like(imgs)
    grad_t = np.zeros_like(txts)
    p_i, p_j = _pair_arrays(batch.pair_map)
    s_pos = sims[p_i, p_j]

    if config.use_hardest_mining:
        t_neg, v_neg = hardest_negatives(sims, batch.pair_map, batch.image_of_text)
        if adaptive:
            a_i2t = (deltas[p_j] + deltas[t_neg]) / config.tau
            a_t2i = (deltas[p_j] + deltas[p_j]) / config.tau
        else:
            a_i2t = np.full(len(batch.pair_map), config.alpha)
            a_t2i = a_i2t
        h1 = a_i2t - s_pos + sims[p_i, t_neg]
        h2 = a_t2i - s_pos + sims[v_neg, p_j]
        on1 = h1 > 0.0
        on2 = h2 > 0.0
        value = float(h1[on1].sum()) + float(h2[on2].sum())
        np.add.at(grad_i, p_i[on1], txts[t_neg[on1]] - txts[p_j[on1]])
        np.add.at(grad_t, p_j[on1], -imgs[p_i[on1]])
        np.add.at(grad_t, t_neg[on1], imgs[p_i[on1]])
        np.add.at(grad_i, p_i[on2], -txts[p_j[on2]])
        np.add.at(grad_i, v_neg[on2], txts[p_j[on2]])
        np.add.at(grad_t, p_j[on2], imgs[v_neg[on2]] - imgs[p_i[on2]])
        active = int(on1.sum()) + int(on2.sum())
        return LossOutput(value, grad_i, grad_t,
                          {"triplet": value, "ordering": 0.0, "active_hinges": active})

    n_pairs = len(batch.pair_map)
    allowed_t = batch.image_of_text[None, :] != p_i[:, None]
    n1 = allowed_t.sum(axis=1)
    if np.any(n1 == 0) or batch.n_images < 2:
        bad = int(np.argmin(n1)) if np.any(n1 == 0) else 0
        i, j = batch.pair_map[bad]
        raise ValueError(f"pair ({i}, {j}) has no admissible negative")
    if adaptive:
        margins_t = (deltas[p_j][:, None] + deltas[None, :]) / config.tau
        a_t2i = (deltas[p_j] + deltas[p_j]) / config.tau
    else:
        margins_t = np.full((n_pairs, batch.n_texts), config.alpha)
        a_t2i = np.full(n_pairs, config.alpha)
    h1 = margins_t - s_pos[:, None] + sims[p_i]
    act1 = (h1 > 0.0) & allowed_t
    value = float(np.sum(np.sum(h1 * act1, axis=1) / n1))
    c1 = act1.sum(axis=1)
    np.add.at(grad_i, p_i,
              (act1 @ txts - c1[:, None] * txts[p_j]) / n1[:, None])
    np.add.at(grad_t, p_j, -(c1 / n1)[:, None] * imgs[p_i])
    grad_t += (act1 / n1[:, None]).T @ imgs[p_i]

    n2 = batch.n_images - 1
    allowed_i = np.ones((n_pairs, batch.n_images), dtype=bool)
    allowed_i[np.arange(n_pairs), p_i] = False
    h2 = a_t2i[:, None] - s_pos[:, None] + sims[:, p_j].T
    act2 = (h2 > 0.0) & allowed_i
    value += float(np.sum(np.sum(h2 * act2, axis=1) / n2))
    c2 = act2.sum(axis=1)
    grad_i += act2.T @ (txts[p_j] / n2)
    np.add.at(grad_i, p_i, -(c2 / n2)[:, None] * txts[p_j])
    np.add.at(grad_t, p_j, (act2 @ imgs - c2[:, None] * imgs[p_i]) / n2)
    active = int(act1.sum()) + int(act2.sum())
    return LossOutput(value, grad_i, grad_t,
                      {"triplet": value, "ordering": 0.0, "active_hinges": active})


def triplet_loss(batch: Batch, config: LossConfig) -> LossOutput:
    """Hinge ranking loss with a fixed margin."""
    return _ranking_loss(batch, config, adaptive=False)


def adaptive_triplet_loss(batch: Batch, config: LossConfig) -> LossOutput:
    """Hinge ranking loss whose margins scale with sentence descriptiveness."""
    return _ranking_loss(batch, config, adaptive=True)


def same_image_pairs(batch: Batch) -> list[tuple[int, int, int]]:
    """Unordered pairs (image, text_a, text_b) of texts sharing an image.

    Cached on the batch: ownership never changes, and the finite-difference
    oracle calls the losses thousands of times per batch.
    """
    cached = getattr(batch, "_same_image_pairs", None)
    if cached is not None:
        return cached
    groups: dict[int, list[int]] = {}
    for j, owner in enumerate(batch.image_of_text):
        groups.setdefault(int(owner), []).append(j)
    pairs = []
    for owner in sorted(groups):
        members = groups[owner]
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                pairs.append((owner, members[a], members[b]))
    batch._same_image_pairs = pairs
    return pairs


def ordering_loss(batch: Batch, config: LossConfig) -> LossOutput:
    """Squared log-ratio penalty tying image-text distance ratios to the
    inverse ratio of sentence descriptiveness.

    Distances and descriptiveness values are clamped below before the
    ratios (a clamped quantity contributes no gradient); images owning a
    single batch text contribute nothing.
    """
    imgs, txts = batch.image_embs, batch.text_embs
    grad_i = np.zeros_like(imgs)
    grad_t = np.zeros_like(txts)
    pairs = same_image_pairs(batch)
    if not pairs:
        return LossOutput(0.0, grad_i, grad_t,
                          {"triplet": 0.0, "ordering": 0.0, "active_hinges": 0,
                           "ordering_pairs": 0})
    arr = np.asarray(pairs, dtype=np.int64)
    i_arr, a_arr, b_arr = arr[:, 0], arr[:, 1], arr[:, 2]
    diff_a = imgs[i_arr] - txts[a_arr]
    diff_b = imgs[i_arr] - txts[b_arr]
    raw_da = np.linalg.norm(diff_a, axis=1)
    raw_db = np.linalg.norm(diff_b, axis=1)
    da = np.maximum(raw_da, config.eps_dist)
    db = np.maximum(raw_db, config.eps_dist)
    dea = np.maximum(batch.deltas[a_arr], config.eps_delta)
    deb = np.maximum(batch.deltas[b_arr], config.eps_delta)
    args = np.log(da / db) - np.log(deb / dea)
    value = float(np.sum(args * args))
    coef_a = np.where(raw_da > config.eps_dist, 2.0 * args / (da * da), 0.0)
    coef_b = np.where(raw_db > config.eps_dist, 2.0 * args / (db * db), 0.0)
    g_a = coef_a[:, None] * diff_a
    g_b = coef_b[:, None] * diff_b
    np.add.at(grad_i, i_arr, g_a - g_b)
    np.add.at(grad_t, a_arr, -g_a)
    np.add.at(grad_t, b_arr, g_b)
    return LossOutput(value, grad_i, grad_t,
                      {"triplet": 0.0, "ordering": value, "active_hinges": 0,
                       "ordering_pairs": len(pairs)})


def overall_loss(batch: Batch, config: LossConfig) -> LossOutput:
    """Adaptive ranking plus lam times the ordering penalty."""
    ada = adaptive_triplet_loss(batch, config)
    order = ordering_loss(batch, config)
    return LossOutput(
        ada.value + config.lam * order.value,
        ada.grad_images + config.lam * order.grad_images,
        ada.grad_texts + config.lam * order.grad_texts,
        {"triplet": ada.value, "ordering": order.value,
         "active_hinges": ada.diagnostics["active_hinges"],
         "ordering_pairs": order.diagnostics["ordering_pairs"]},
    )


# ---------------------------------------------------------------------------
# Finite-difference oracle and the gradient-check suite


def finite_diff_grad(loss_fn, batch: Batch, h: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of loss_fn(batch).value per embedding coordinate.

    Perturbations are applied directly to the stored embeddings, without
    re-normalization, matching the domain of the analytic gradients.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    grads = []
    for embs in (batch.image_embs, batch.text_embs):
        grad = np.zeros_like(embs)
        for idx in np.ndindex(embs.shape):
            orig = embs[idx]
            embs[idx] = orig + h
            f_plus = loss_fn(batch).value
            embs[idx] = orig - h
            f_minus = loss_fn(batch).value
            embs[idx] = orig
            grad[idx] = (f_plus - f_minus) / (2.0 * h)
        grads.append(grad)
    return grads[0], grads[1]


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Frobenius-norm relative error; both-near-zero counts as agreement
    (finite differences of an identically-zero gradient are pure noise)."""
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if denom < 1e-7:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / denom


def random_batch(rng: np.random.Generator, n_images: int = 8, n_texts: int = 8,
                 dim: int = 16) -> Batch:
    """Random unit embeddings with every image owning at least one text."""
    if n_texts < n_images:
        raise ValueError("need at least one text per image")
    imgs = rng.normal(size=(n_images, dim))
    imgs /= np.linalg.norm(imgs, axis=1, keepdims=True)
    txts = rng.normal(size=(n_texts, dim))
    txts /= np.linalg.norm(txts, axis=1, keepdims=True)
    owners = np.concatenate([np.arange(n_images),
                             rng.integers(0, n_images, size=n_texts - n_images)])
    deltas = rng.uniform(0.05, 1.0, size=n_texts)
    return Batch(imgs, txts, owners, deltas)


def kink_gap(batch: Batch, config: LossConfig) -> float:
    """Distance from the nearest non-smooth point of the checked losses:
    hinge arguments at zero (fixed and adaptive margins, both mining
    modes) and argmax ties in the mining step."""
    sims = batch.image_embs @ batch.text_embs.T
    deltas = batch.deltas
    gap = math.inf
    for i, j in batch.pair_map:
        t_cand = np.flatnonzero(batch.image_of_text != i)
        i_cand = np.array([k for k in range(batch.n_images) if k != i], dtype=np.int64)
        if t_cand.size == 0 or i_cand.size == 0:
            continue
        t_sims = sims[i, t_cand]
        i_sims = sims[i_cand, j]
        for vals in (t_sims, i_sims):
            if vals.size >= 2:
                top = np.sort(vals)[-2:]
                gap = min(gap, float(top[1] - top[0]))
        for adaptive in (False, True):
            if adaptive:
                margins_t = (deltas[j] + deltas[t_cand]) / config.tau
                a_t2i = 2.0 * deltas[j] / config.tau
            else:
                margins_t = np.full(t_cand.size, config.alpha)
                a_t2i = config.alpha
            gap = min(gap, float(np.min(np.abs(margins_t - sims[i, j] + t_sims))))
            gap = min(gap, float(np.min(np.abs(a_t2i - sims[i, j] + i_sims))))
    for i, a, b in same_image_pairs(batch):
        for j in (a, b):
            d = float(np.linalg.norm(batch.image_embs[i] - batch.text_embs[j]))
            gap = min(gap, abs(d - config.eps_dist))
    return gap


_CHECKED_LOSSES = (
    ("triplet/mined", triplet_loss, True),
    ("triplet/mean", triplet_loss, False),
    ("adaptive/mined", adaptive_triplet_loss, True),
    ("adaptive/mean", adaptive_triplet_loss, False),
    ("ordering", ordering_loss, True),
    ("overall", overall_loss, True),
)


def run_gradcheck(seed: int = 0, trials: int = 20, h: float = 1e-5,
                  tol: float = 1e-4, n_images: int = 8, dim: int = 16) -> dict:
    """Compare analytic gradients against central differences on random
    multi-caption batches, skipping kink-adjacent draws.

    Returns {"passed", "trials": [per-trial records], "worst"}.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    base = LossConfig()
    records = []
    worst = {"rel_err": 0.0}
    for trial in range(trials):
        for _ in range(200):
            batch = random_batch(rng, n_images=n_images, n_texts=2 * n_images, dim=dim)
            if kink_gap(batch, base) > 10.0 * h:
                break
        else:
            raise RuntimeError("could not draw a kink-free batch")
        for name, fn, mining in _CHECKED_LOSSES:
            config = LossConfig(use_hardest_mining=mining)
            out = fn(batch, config)
            fd_i, fd_t = finite_diff_grad(lambda b: fn(b, config), batch, h=h)
            err = max(grad_rel_error(out.grad_images, fd_i),
                      grad_rel_error(out.grad_texts, fd_t))
            rec = {"trial": trial, "loss": name, "rel_err": err, "passed": err < tol}
            records.append(rec)
            if err > worst["rel_err"]:
                worst = dict(rec)
    return {"passed": all(r["passed"] for r in records), "trials": records, "worst": worst}

"""Mixup negatives, the per-layer peer-class contrastive loss, cross-entropy,
and exact reverse-mode gradients for every head parameter.

The contrastive term at one layer scores each image anchor against its paired
text description (positive) and, for every other batch index k, three
negatives: the mixed image k, the non-paired text k, and the mixed text k.
Rows are L2-normalized before any dot product, so feature scale never leaks
into similarities and a temperature of 0.005 keeps exponents in [-200, 200].

Two readings of the objective are supported:

  per_anchor (default): mean over anchors of -log(pos / (pos + negatives)),
      the bounded, conventional contrastive form.
  literal: -log of the batch mean of pos / negatives ratios, with the
      positive absent from the denominator.

All math runs in float64 with max-subtraction, regardless of input dtype.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateBatchError, InvalidArgumentError, ShapeError
from .head import MlpHead, forward_with_cache, softmax

logger = logging.getLogger(__name__)

PCC_FORMS = ("per_anchor", "literal")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.005
    mix_lambda: float = 0.5
    layer_count: int = 3
    pcc_form: str = "per_anchor"
    use_pcc: bool = True
    use_ce: bool = True
    use_mixup: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.mix_lambda <= 1.0:
            raise ConfigError(f"mix_lambda must lie in [0, 1], got {self.mix_lambda}")
        if self.layer_count != 3:
            raise ConfigError("exactly 3 shared layers are supported")
        if self.pcc_form not in PCC_FORMS:
            raise ConfigError(f"pcc_form must be one of {PCC_FORMS}, got {self.pcc_form!r}")
        if not (self.use_pcc or self.use_ce):
            raise ConfigError("at least one loss term must be enabled")


@dataclass
class TrainingBatch:
    """Paired image/text features with integer class labels.

    text_features row i is the encoded description of class labels[i].
    """

    image_features: np.ndarray
    labels: np.ndarray
    text_features: np.ndarray

    def __post_init__(self):
        self.image_features = np.asarray(self.image_features, dtype=np.float64)
        self.text_features = np.asarray(self.text_features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image_features.ndim != 2 or self.text_features.ndim != 2:
            raise ShapeError("batch features must be 2-D")
        if self.image_features.shape != self.text_features.shape:
            raise ShapeError(
                f"image/text feature shapes differ: {self.image_features.shape} "
                f"vs {self.text_features.shape}"
            )
        if self.labels.shape != (self.image_features.shape[0],):
            raise ShapeError("labels must be one index per batch row")
        if self.size and self.labels.min() < 0:
            raise InvalidArgumentError("labels must be non-negative class indices")

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class NegativeSet:
    """Feature-space mixup negatives plus the sampling provenance."""

    mixed_images: np.ndarray
    mixed_texts: np.ndarray
    q_indices: np.ndarray   # q_indices[i]: same-batch index of a different class
    p_choices: np.ndarray   # p_choices[i]: which peer of class labels[i] was mixed in


def mixup(a: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination lam*a + (1-lam)*b; no normalization applied."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mixup operands differ in shape: {a.shape} vs {b.shape}")
    return lam * a + (1.0 - lam) * b


def build_negative_set(
    batch: TrainingBatch,
    peer_text_features: dict[int, np.ndarray],
    lam: float,
    rng: np.random.Generator,
) -> NegativeSet:
    """Sample mixup negatives for a batch.

    Mixed image i blends image i with a uniformly chosen same-batch image of
    a different class; mixed text i blends description i with a uniformly
    chosen peer description of class labels[i]. Deterministic given the rng.
    """
    n = batch.size
    if n < 2:
        raise DegenerateBatchError(f"need a batch of >= 2 samples, got {n}")
    labels = batch.labels
    if np.unique(labels).size < 2:
        raise DegenerateBatchError("batch holds a single class; cannot mix across classes")

    q_indices = np.empty(n, dtype=np.int64)
    p_choices = np.empty(n, dtype=np.int64)
    peer_rows = np.empty_like(batch.text_features)
    for i in range(n):
        candidates = np.flatnonzero(labels != labels[i])
        q_indices[i] = candidates[rng.integers(len(candidates))]
        cls = int(labels[i])
        peers = peer_text_features.get(cls)
        if peers is None or len(peers) == 0:
            raise ConfigError(f"class {cls} has no peer description features")
        peers = np.asarray(peers, dtype=np.float64)
        p_choices[i] = rng.integers(peers.shape[0])
        peer_rows[i] = peers[p_choices[i]]

    mixed_images = mixup(batch.image_features, batch.image_features[q_indices], lam)
    mixed_texts = mixup(batch.text_features, peer_rows, lam)
    return NegativeSet(mixed_images, mixed_texts, q_indices, p_choices)


def _normalized(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < 1e-12):
        raise InvalidArgumentError(f"{what} has a (near-)zero row; similarity undefined")
    return x / norms[:, None], norms


def _logsumexp_rows(parts: list[np.ndarray]) -> np.ndarray:
    """Row-wise logsumexp over a list of (N,) / (N,N) arrays; -inf entries drop out."""
    stacked = np.concatenate([p.reshape(p.shape[0], -1) for p in parts], axis=1)
    m = stacked.max(axis=1)
    return m + np.log(np.exp(stacked - m[:, None]).sum(axis=1))


def _pcc_value_and_input_grads(
    img: np.ndarray,
    txt_pos: np.ndarray,
    txt_all: np.ndarray,
    mixed_img: np.ndarray | None,
    mixed_txt: np.ndarray | None,
    tau: float,
    form: str,
    want_grad: bool,
):
    """Shared core: loss value and, optionally, gradients w.r.t. the raw inputs."""
    if not tau > 0:
        raise InvalidArgumentError(f"temperature must be > 0, got {tau}")
    if form not in PCC_FORMS:
        raise InvalidArgumentError(f"unknown pcc form {form!r}")
    a_hat, a_n = _normalized(img, "image features")
    n = a_hat.shape[0]
    if n < 2:
        raise DegenerateBatchError(f"contrastive loss needs N >= 2, got {n}")
    p_hat, p_n = _normalized(txt_pos, "paired text features")
    b_hat, b_n = _normalized(txt_all, "text features")
    for name, other in (("paired text", p_hat), ("text", b_hat)):
        if other.shape != a_hat.shape:
            raise ShapeError(f"{name} shape {other.shape} does not match images {a_hat.shape}")
    mats = {"B": b_hat}
    norms = {"B": b_n}
    if mixed_img is not None:
        c_hat, c_n = _normalized(mixed_img, "mixed image features")
        if c_hat.shape != a_hat.shape:
            raise ShapeError("mixed image shape does not match images")
        mats["C"], norms["C"] = c_hat, c_n
    if mixed_txt is not None:
        d_hat, d_n = _normalized(mixed_txt, "mixed text features")
        if d_hat.shape != a_hat.shape:
            raise ShapeError("mixed text shape does not match images")
        mats["D"], norms["D"] = d_hat, d_n

    inv_tau = 1.0 / tau
    sp = np.einsum("ij,ij->i", a_hat, p_hat)
    sims = {key: a_hat @ mat.T for key, mat in mats.items()}
    off_diag = ~np.eye(n, dtype=bool)

    # Exponent arguments; diagonal masked out of the negative matrices (k != i).
    neg_parts = []
    for key in mats:
        arg = sims[key] * inv_tau
        arg = np.where(off_diag, arg, -np.inf)
        neg_parts.append(arg)

    if form == "per_anchor":
        lse_all = _logsumexp_rows([sp[:, None] * inv_tau] + neg_parts)
        value = float(np.mean(lse_all - sp * inv_tau))
    else:
        lse_neg = _logsumexp_rows(neg_parts)
        log_ratio = sp * inv_tau - lse_neg
        m = log_ratio.max()
        value = float(np.log(n) - (m + np.log(np.exp(log_ratio - m).sum())))

    if not want_grad:
        return value, None

    # dL/d(similarity) for the positive vector and each negative matrix.
    if form == "per_anchor":
        w_pos = np.exp(sp * inv_tau - lse_all)
        d_sp = (w_pos - 1.0) * inv_tau / n
        d_sims = {
            key: np.where(off_diag, np.exp(arg - lse_all[:, None]), 0.0) * inv_tau / n
            for key, arg in zip(mats, neg_parts)
        }
    else:
        alpha = np.exp(log_ratio - log_ratio.max())
        alpha /= alpha.sum()
        d_sp = -alpha * inv_tau
        d_sims = {
            key: np.where(off_diag, np.exp(arg - lse_neg[:, None]), 0.0)
            * alpha[:, None]
            * inv_tau
            for key, arg in zip(mats, neg_parts)
        }

    # Chain through s = <a_hat, b_hat>: ds/da = (b_hat - s*a_hat)/||a||.
    part1 = d_sp[:, None] * p_hat
    row_coef = d_sp * sp
    for key, mat in mats.items():
        part1 += d_sims[key] @ mat
        row_coef += np.einsum("ik,ik->i", d_sims[key], sims[key])
    g_img = (part1 - row_coef[:, None] * a_hat) / a_n[:, None]

    g_pos = d_sp[:, None] * (a_hat - sp[:, None] * p_hat) / p_n[:, None]

    def _col_grad(key: str) -> np.ndarray:
        w = d_sims[key]
        col_coef = np.einsum("ik,ik->k", w, sims[key])
        return (w.T @ a_hat - col_coef[:, None] * mats[key]) / norms[key][:, None]

    g_all = _col_grad("B")
    g_mimg = _col_grad("C") if "C" in mats else None
    g_mtxt = _col_grad("D") if "D" in mats else None
    return value, (g_img, g_pos, g_all, g_mimg, g_mtxt)


def pcc_loss(
    layer_img: np.ndarray,
    layer_txt_pos: np.ndarray,
    layer_txt_all: np.ndarray,
    layer_mixed_img: np.ndarray | None,
    layer_mixed_txt: np.ndarray | None,
    tau: float,
    form: str = "per_anchor",
) -> float:
    """Peer-class contrastive loss over one layer's activations.

    All inputs must come from the same shared layer. Mixed-feature matrices
    may be None to drop the mixup negatives (text negatives remain).
    """
    value, _ = _pcc_value_and_input_grads(
        layer_img, layer_txt_pos, layer_txt_all, layer_mixed_img, layer_mixed_txt,
        tau, form, want_grad=False,
    )
    return value


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("logits must be (N, M) with one label per row")
    n, m = logits.shape
    if n == 0:
        raise DegenerateBatchError("cross-entropy of an empty batch is undefined")
    if labels.min() < 0 or labels.max() >= m:
        raise InvalidArgumentError(
            f"label out of range [0, {m}): {labels.min()}..{labels.max()}"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    return float(np.mean(lse - logits[np.arange(n), labels]))


@dataclass
class LossBreakdown:
    total: float
    pcc_layers: tuple[float, ...]
    ce: float

    def as_row(self) -> dict[str, float]:
        row = {"total": self.total}
        for i, v in enumerate(self.pcc_layers, start=1):
            row[f"pcc{i}"] = v
        row["ce"] = self.ce
        return row


@dataclass
class HeadGrads:
    """Gradient of the objective w.r.t. every head parameter (float64)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    clf_weight: np.ndarray
    clf_bias: np.ndarray

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            items.append((f"fc{i}.weight", w))
            items.append((f"fc{i}.bias", b))
        items.append(("classifier.weight", self.clf_weight))
        items.append(("classifier.bias", self.clf_bias))
        return items


def _check_inputs(head: MlpHead, batch: TrainingBatch, negatives: NegativeSet | None, cfg: LossConfig):
    if cfg.use_pcc and cfg.use_mixup and negatives is None:
        raise InvalidArgumentError("mixup enabled but no negative set supplied")
    if batch.size and batch.labels.max() >= head.num_id_classes:
        raise InvalidArgumentError(
            f"batch label {batch.labels.max()} out of range for {head.num_id_classes} ID classes"
        )


def loss_and_grad(
    head: MlpHead,
    batch: TrainingBatch,
    negatives: NegativeSet | None,
    cfg: LossConfig,
    want_grad: bool = True,
) -> tuple[LossBreakdown, HeadGrads | None]:
    """Objective value (and gradients) for one batch.

    The objective is the sum of the contrastive term at each shared layer
    plus cross-entropy on the image logits, with terms switched by cfg.
    Text and image features share the same layers, so every enabled stream
    contributes to the shared-layer gradients; encoder inputs stay frozen.
    """
    _check_inputs(head, batch, negatives, cfg)
    n = batch.size
    use_mix = cfg.use_pcc and cfg.use_mixup and negatives is not None

    streams = [batch.image_features, batch.text_features]
    if use_mix:
        streams += [negatives.mixed_images, negatives.mixed_texts]
    stacked = np.vstack(streams)
    hs, zs, logits_all = forward_with_cache(head, stacked)
    n_layers = len(head.weights)

    def block(arr: np.ndarray, s: int) -> np.ndarray:
        return arr[s * n : (s + 1) * n]

    n_streams = len(streams)
    # Adjoints w.r.t. post-ReLU activations, per layer, stacked over streams.
    adj = [np.zeros_like(hs[l + 1]) for l in range(n_layers)]

    pcc_values = []
    if cfg.use_pcc:
        for l in range(1, n_layers + 1):
            h = hs[l]
            value, grads = _pcc_value_and_input_grads(
                block(h, 0), block(h, 1), block(h, 1),
                block(h, 2) if use_mix else None,
                block(h, 3) if use_mix else None,
                cfg.temperature, cfg.pcc_form, want_grad,
            )
            pcc_values.append(value)
            if want_grad:
                g_img, g_pos, g_all, g_mimg, g_mtxt = grads
                adj[l - 1][0 * n : 1 * n] += g_img
                adj[l - 1][1 * n : 2 * n] += g_pos + g_all
                if use_mix:
                    adj[l - 1][2 * n : 3 * n] += g_mimg
                    adj[l - 1][3 * n : 4 * n] += g_mtxt
    else:
        pcc_values = [0.0] * n_layers

    ce_value = 0.0
    g_logits = None
    if cfg.use_ce:
        logits_img = block(logits_all, 0)
        ce_value = ce_loss(logits_img, batch.labels)
        if want_grad:
            probs = softmax(logits_img)
            g_logits = probs.copy()
            g_logits[np.arange(n), batch.labels] -= 1.0
            g_logits /= n

    total = float(sum(pcc_values) + ce_value)
    breakdown = LossBreakdown(total=total, pcc_layers=tuple(pcc_values), ce=ce_value)
    if not want_grad:
        return breakdown, None

    w64 = [w.astype(np.float64) for w in head.weights]
    d_weights = [np.zeros_like(w) for w in w64]
    d_biases = [np.zeros(w.shape[0]) for w in w64]
    d_clf_w = np.zeros(head.clf_weight.shape, dtype=np.float64)
    d_clf_b = np.zeros(head.clf_bias.shape, dtype=np.float64)

    running = adj[n_layers - 1]
    if g_logits is not None:
        h_top_img = block(hs[n_layers], 0)
        d_clf_w = g_logits.T @ h_top_img
        d_clf_b = g_logits.sum(axis=0)
        running = running.copy()
        running[0:n] += g_logits @ head.clf_weight.astype(np.float64)

    for li in range(n_layers - 1, -1, -1):
        dz = running * (zs[li] > 0)
        d_weights[li] = dz.T @ hs[li]
        d_biases[li] = dz.sum(axis=0)
        if li > 0:
            running = dz @ w64[li] + adj[li - 1]

    grads = HeadGrads(
        weights=d_weights, biases=d_biases, clf_weight=d_clf_w, clf_bias=d_clf_b
    )
    return breakdown, grads


def total_loss(
    head: MlpHead,
    batch: TrainingBatch,
    negatives: NegativeSet | None,
    cfg: LossConfig,
) -> LossBreakdown:
    """Sum of the three per-layer contrastive terms and the cross-entropy."""
    breakdown, _ = loss_and_grad(head, batch, negatives, cfg, want_grad=False)
    return breakdown


def grad_total_loss(
    head: MlpHead,
    batch: TrainingBatch,
    negatives: NegativeSet | None,
    cfg: LossConfig,
) -> HeadGrads:
    """Exact gradients of total_loss for every head parameter."""
    _, grads = loss_and_grad(head, batch, negatives, cfg, want_grad=True)
    return grads

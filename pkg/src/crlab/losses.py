"""Training objectives and their exact gradients.

Views of the unlabeled batch are indexed 0..N-1 with ``source[v]`` giving the
unlabeled sample each strong view came from. Pseudo-labels are produced once
per source and inherited by its views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ForwardCache, ModelParams, backward
from .numerics import ConfigError, DegenerateInputError, DimensionError, log_softmax, softmax

LOSS_MODES = ("cs-only", "cr-only", "cs+cr", "cs+ntxent")


# --------------------------------------------------------------------------
# pseudo-labels


@dataclass(frozen=True)
class PseudoLabelRecord:
    q: np.ndarray
    q_hat: int
    confidence: float
    mask_cs: bool
    mask_cr: bool


@dataclass(frozen=True)
class PseudoLabels:
    """Frozen pseudo-labels for a batch of sources (arrays, one row per source)."""

    q: np.ndarray
    q_hat: np.ndarray
    confidence: np.ndarray
    mask_cs: np.ndarray
    mask_cr: np.ndarray
    delta: float
    delta_prime: float

    def __len__(self):
        return len(self.q_hat)

    def __getitem__(self, i) -> PseudoLabelRecord:
        return PseudoLabelRecord(
            self.q[i], int(self.q_hat[i]), float(self.confidence[i]), bool(self.mask_cs[i]), bool(self.mask_cr[i])
        )

    def records(self) -> list[PseudoLabelRecord]:
        return [self[i] for i in range(len(self))]


def make_pseudo_labels(logits: np.ndarray, delta: float, delta_prime: float) -> PseudoLabels:
    q = softmax(np.atleast_2d(logits), axis=1)
    q_hat = np.argmax(q, axis=1)  # first maximum wins ties
    conf = q[np.arange(len(q)), q_hat]
    arrays = (q, q_hat, conf, conf > delta, conf > delta_prime)
    for a in arrays:
        a.setflags(write=False)
    return PseudoLabels(*arrays, delta=delta, delta_prime=delta_prime)


def pseudo_labels_from_probs(q: np.ndarray, delta: float, delta_prime: float) -> PseudoLabels:
    """Same as :func:`make_pseudo_labels` but from given distributions."""
    q = np.array(np.atleast_2d(q), dtype=np.float64)
    q_hat = np.argmax(q, axis=1)
    conf = q[np.arange(len(q)), q_hat]
    arrays = (q, q_hat, conf, conf > delta, conf > delta_prime)
    for a in arrays:
        a.setflags(write=False)
    return PseudoLabels(*arrays, delta=delta, delta_prime=delta_prime)


# --------------------------------------------------------------------------
# supervised and consistency terms


def supervised_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient (softmax - onehot) / B."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if len(labels) != n:
        raise DimensionError(f"{n} logit rows but {len(labels)} labels")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def _view_targets(pseudo: PseudoLabels, source: np.ndarray, n_views: int):
    source = np.asarray(source)
    if len(source) != n_views:
        raise DimensionError(f"{n_views} view rows but {len(source)} source indices")
    if len(source) and (source.min() < 0 or source.max() >= len(pseudo)):
        raise DimensionError("source index outside the pseudo-label batch")
    return pseudo.q_hat[source], pseudo.mask_cs[source], pseudo.mask_cr[source]


def check_grouping(source: np.ndarray, m: int) -> None:
    """Every source must own exactly ``m`` views."""
    counts = np.bincount(np.asarray(source))
    if np.any(counts != m):
        raise DimensionError(f"each source needs exactly {m} views, got counts {sorted(set(counts.tolist()))}")


def consistency_loss(
    logits: np.ndarray, pseudo: PseudoLabels, source: np.ndarray, m: int | None = None
) -> tuple[float, np.ndarray]:
    """Masked cross-entropy against pseudo-labels, averaged over ALL views.

    Masked-out views stay in the denominator and get exactly zero gradient.
    """
    n = logits.shape[0]
    if m is not None:
        check_grouping(source, m)
    q_hat, mask, _ = _view_targets(pseudo, source, n)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    grad = np.zeros_like(logits)
    if not mask.any():
        return 0.0, grad
    rows = np.flatnonzero(mask)
    logp = log_softmax(logits[rows], axis=1)
    tgt = q_hat[rows]
    loss = -float(np.sum(logp[np.arange(len(rows)), tgt])) / n
    g = np.exp(logp)
    g[np.arange(len(rows)), tgt] -= 1.0
    grad[rows] = g / n
    return loss, grad


def grad_cs_wrt_classweights(
    h: np.ndarray, probs: np.ndarray, pseudo: PseudoLabels, source: np.ndarray
) -> np.ndarray:
    """Per-class minus gradient restricted to the views assigned to that class:

        column i = (1/N) * sum over views v with q_hat(v) = i and mask(v)
                   of h(v) * (1 - p(i|v))

    This drops the -p(i|v) h(v) terms contributed by views of other classes;
    the exact gradient is ``-backward(...)["cls.w"]``.
    """
    n, k = probs.shape
    q_hat, mask, _ = _view_targets(pseudo, source, n)
    out = np.zeros((h.shape[1], k))
    if n == 0:
        return out
    w = mask * (1.0 - probs[np.arange(n), q_hat])
    onehot = np.zeros((n, k))
    onehot[np.arange(n), q_hat] = w
    return h.T @ onehot / n


def grad_cs_wrt_features(
    W: np.ndarray, probs: np.ndarray, pseudo: PseudoLabels, source: np.ndarray
) -> np.ndarray:
    """Exact minus gradient of the consistency term w.r.t. each view's features:

        row v = mask(v)/N * ( w_qhat (1 - p(qhat|v)) - sum_{i != qhat} p(i|v) w_i )
    """
    n, k = probs.shape
    q_hat, mask, _ = _view_targets(pseudo, source, n)
    coef = -probs.copy()
    coef[np.arange(n), q_hat] += 1.0
    return (mask[:, None] * coef) @ W.T / max(n, 1)


# --------------------------------------------------------------------------
# contrastive terms


@dataclass(frozen=True)
class PositiveSet:
    """Boolean ``positive[a, v]``: view v shares anchor a's pseudo-label (v != a)."""

    positive: np.ndarray

    @classmethod
    def from_labels(cls, view_labels: np.ndarray) -> "PositiveSet":
        lab = np.asarray(view_labels)
        pos = lab[:, None] == lab[None, :]
        np.fill_diagonal(pos, False)
        pos.setflags(write=False)
        return cls(pos)

    def positives(self, anchor: int) -> np.ndarray:
        return np.flatnonzero(self.positive[anchor])

    def negatives(self, anchor: int) -> np.ndarray:
        row = ~self.positive[anchor]
        row[anchor] = False
        return np.flatnonzero(row)

    def counts(self) -> np.ndarray:
        return self.positive.sum(axis=1)


def positive_sets(pseudo: PseudoLabels, source: np.ndarray) -> PositiveSet:
    return PositiveSet.from_labels(pseudo.q_hat[np.asarray(source)])


def _contrastive_core(z: np.ndarray, positive: np.ndarray, anchor_on: np.ndarray, tau: float):
    """Masked mean over anchors of the multi-positive contrastive term.

    Anchors that are switched off, or that have no positive, contribute zero
    but still count in the 1/N normalization and still serve as candidates
    in every other anchor's denominator.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    n = z.shape[0]
    if positive.shape != (n, n):
        raise DimensionError(f"positive mask must be {n}x{n}")
    grad = np.zeros_like(z)
    if n < 2:
        return 0.0, grad, np.zeros(n)
    npos = positive.sum(axis=1)
    active = anchor_on & (npos > 0)
    per_anchor = np.zeros(n)
    if not active.any():
        return 0.0, grad, per_anchor
    a = np.flatnonzero(active)
    rows = np.arange(len(a))
    scores = (z[a] @ z.T) / tau
    pos = positive[a]
    inv = 1.0 / npos[a]
    pos_mean = np.einsum("ij,ij->i", pos, scores) * inv
    scores[rows, a] = -np.inf
    mx = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - mx)
    denom = e.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(denom[:, 0])
    per_anchor[a] = lse - pos_mean
    loss = float(per_anchor.sum()) / n
    # dR/dscore[a, v] = (s[a, v] - 1[v in P(a)]/|P(a)|) / N, zero at v = a
    e *= 1.0 / (denom * n)
    e -= pos * (inv / n)[:, None]
    # scores = z[a] z^T / tau: anchors and candidates both receive gradient
    grad[a] += (e @ z) / tau
    grad += (e.T @ z[a]) / tau
    return loss, grad, per_anchor


def contrastive_loss(
    z: np.ndarray, pseudo: PseudoLabels, source: np.ndarray, tau: float
) -> tuple[float, np.ndarray]:
    """Pseudo-label contrastive regularization and its gradient w.r.t. z.

    Anchors are gated by the delta' mask; positive sets and denominators use
    every view regardless of confidence.
    """
    n = z.shape[0]
    q_hat, _, mask = _view_targets(pseudo, source, n)
    pos = PositiveSet.from_labels(q_hat).positive
    loss, grad, _ = _contrastive_core(z, pos, mask, tau)
    return loss, grad


def per_anchor_contrastive(z: np.ndarray, view_labels: np.ndarray, anchor: int, tau: float = 1.0) -> float:
    """r(anchor) for free embeddings (no normalization, no masking)."""
    pos = PositiveSet.from_labels(view_labels)
    if not pos.positive[anchor].any():
        raise DegenerateInputError("anchor has an empty positive set")
    scores = z @ z[anchor] / tau
    others = np.arange(len(z)) != anchor
    mx = scores[others].max()
    lse = mx + np.log(np.sum(np.exp(scores[others] - mx)))
    return float(-np.mean(scores[pos.positive[anchor]] - lse))


@dataclass
class CrGradient:
    """Minus gradients of one anchor's contrastive term, taking z = h and tau = 1."""

    anchor: np.ndarray  # -dr/dh(anchor)
    views: np.ndarray  # row v: -dr/dh(v); the anchor row holds ``anchor``
    main: np.ndarray  # sum_p (1/|P| - s[a,p]) h(p)
    remainder: np.ndarray  # -sum_n s[a,n] h(n)
    scores: np.ndarray  # s[a, v], zero at the anchor


def grad_cr_exact(h: np.ndarray, view_labels: np.ndarray, anchor: int) -> CrGradient:
    """Closed-form gradient of r(anchor) over free features.

    For the anchor:  sum_p (1/|P| - s[a,p]) h(p) - sum_n s[a,n] h(n).
    For v != anchor: (1[v in P]/|P| - s[a,v]) h(anchor).
    """
    h = np.asarray(h, dtype=np.float64)
    pos = PositiveSet.from_labels(view_labels)
    p_idx = pos.positives(anchor)
    if len(p_idx) == 0:
        raise DegenerateInputError(f"anchor {anchor} has an empty positive set")
    n_idx = pos.negatives(anchor)
    others = np.arange(len(h)) != anchor
    raw = h @ h[anchor]
    s = np.zeros(len(h))
    s[others] = softmax(raw[others])
    inv = 1.0 / len(p_idx)
    main = ((inv - s[p_idx])[:, None] * h[p_idx]).sum(axis=0)
    remainder = -(s[n_idx][:, None] * h[n_idx]).sum(axis=0)
    coef = pos.positive[anchor] * inv - s
    views = coef[:, None] * h[anchor][None, :]
    views[anchor] = main + remainder
    return CrGradient(main + remainder, views, main, remainder, s)


def ntxent_loss(z: np.ndarray, source: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Instance-discrimination loss with two views per source; the sibling
    view is the only positive. Same normalization as the contrastive term."""
    source = np.asarray(source)
    counts = np.bincount(source)
    if np.any(counts != 2):
        raise ConfigError("NT-Xent needs exactly m = 2 views per source")
    pos = source[:, None] == source[None, :]
    np.fill_diagonal(pos, False)
    loss, grad, _ = _contrastive_core(z, pos, np.ones(len(z), dtype=bool), tau)
    return loss, grad


# --------------------------------------------------------------------------
# total objective


@dataclass(frozen=True)
class LossWeights:
    lambda_cs: float = 1.0
    lambda_cr: float = 1.0
    tau: float = 0.01
    mode: str = "cs+cr"

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.lambda_cs < 0 or self.lambda_cr < 0:
            raise ConfigError("loss weights must be >= 0")

    @property
    def effective(self) -> tuple[float, float]:
        cs = 0.0 if self.mode == "cr-only" else self.lambda_cs
        cr = 0.0 if self.mode == "cs-only" else self.lambda_cr
        return cs, cr


@dataclass
class LossBreakdown:
    loss_sup: float
    loss_cs: float
    loss_cr: float  # holds NT-Xent in cs+ntxent mode
    total: float
    mask_cs: float
    mask_cr: float


def _head_rows(cache: ForwardCache, n: int) -> ForwardCache:
    cut = lambda a: None if a is None else a[:n]
    return ForwardCache(
        [a[:n] for a in cache.inputs],
        [a[:n] for a in cache.pre],
        cache.h[:n],
        cache.logits[:n],
        cut(cache.proj_pre),
        cut(cache.proj_act),
        cut(cache.proj_out),
        cut(cache.proj_norm),
        cut(cache.z),
    )


def total_loss(
    params: ModelParams,
    cache: ForwardCache,
    n_labeled: int,
    labels: np.ndarray,
    pseudo: PseudoLabels,
    source: np.ndarray,
    weights: LossWeights,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Supervised + weighted consistency + weighted contrastive loss.

    ``cache`` holds one forward pass over ``[labeled rows; strong views]``.
    The contrastive value is always reported; it only feeds the gradient when
    its effective weight is positive.
    """
    lam_cs, lam_cr = weights.effective
    logits = cache.logits
    sup, g_sup = supervised_loss(logits[:n_labeled], labels)
    cs, g_cs = consistency_loss(logits[n_labeled:], pseudo, source)
    z = cache.z[n_labeled:] if cache.z is not None else None
    cr, g_cr = 0.0, None
    if z is not None:
        if weights.mode == "cs+ntxent":
            cr, g_cr = ntxent_loss(z, source, weights.tau)
        else:
            cr, g_cr = contrastive_loss(z, pseudo, source, weights.tau)
    elif lam_cr > 0:
        raise DimensionError("contrastive weight > 0 but forward skipped the projection head")
    if lam_cs == 0 and lam_cr == 0:
        # unlabeled rows carry no signal; keep them out of the reductions entirely
        grads = backward(params, _head_rows(cache, n_labeled), g_sup)
    else:
        grad_logits = np.concatenate([g_sup, lam_cs * g_cs])
        grad_z = None
        if g_cr is not None and lam_cr > 0:
            grad_z = np.concatenate([np.zeros((n_labeled, z.shape[1])), lam_cr * g_cr])
        grads = backward(params, cache, grad_logits, grad_z)
    view_mask_cs = pseudo.mask_cs[source]
    view_mask_cr = pseudo.mask_cr[source]
    bd = LossBreakdown(
        loss_sup=sup,
        loss_cs=cs,
        loss_cr=cr,
        total=sup + lam_cs * cs + lam_cr * cr,
        mask_cs=float(view_mask_cs.mean()) if len(source) else 0.0,
        mask_cr=float(view_mask_cr.mean()) if len(source) else 0.0,
    )
    return bd, grads

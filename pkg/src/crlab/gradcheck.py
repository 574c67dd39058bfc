"""Analytic-versus-finite-difference checks for the regularizer gradients.

Finite differences here are taken on 128-bit MPFR evaluations of the losses.
At tau = 0.01 many gradient entries sit near 1e-8 while the loss itself is
O(10), so float64 central differences cannot resolve them; 128 bits remove
round-off and leave only O(h^2) truncation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import gmpy2
import numpy as np
from gmpy2 import mpfr

from . import losses as L
from .numerics import make_rng, max_relative_error, softmax

MP = gmpy2.context(precision=128)
TAUS = (1.0, 0.1, 0.01)
def _mp_lse(vals):
    mx = max(vals)
    return mx + gmpy2.log(gmpy2.fsum([gmpy2.exp(v - mx) for v in vals]))


def _mp_dot(a, b):
    return gmpy2.fsum([x * y for x, y in zip(a, b)])


def r_mp(h, view_labels, anchor, tau=1.0):
    """Per-anchor term over free features."""
    with gmpy2.context(MP):
        t = mpfr(tau)
        n = len(h)
        s = [_mp_dot(h[anchor], h[v]) / t for v in range(n)]
        others = [s[v] for v in range(n) if v != anchor]
        pos = [s[v] for v in range(n) if v != anchor and view_labels[v] == view_labels[anchor]]
        return _mp_lse(others) - gmpy2.fsum(pos) / len(pos)


def cr_mp(raw, view_labels, anchor_mask, tau):
    """Masked-mean contrastive term of the normalized rows of ``raw``."""
    with gmpy2.context(MP):
        z = []
        for row in raw:
            norm = gmpy2.sqrt(_mp_dot(row, row))
            z.append([v / norm for v in row])
        n = len(z)
        terms = []
        for a in range(n):
            if anchor_mask[a] and any(view_labels[v] == view_labels[a] for v in range(n) if v != a):
                terms.append(r_mp(z, view_labels, a, tau))
        return gmpy2.fsum(terms) / n if terms else mpfr(0)


def fd_mp(f, at, h=1e-6):
    """Central differences with ``f`` evaluated on exact 128-bit copies of ``at``."""
    at = np.asarray(at, dtype=np.float64)
    with gmpy2.context(MP):
        x = [[mpfr(float(v)) for v in row] for row in at]
        step = mpfr(h)
        g = np.zeros(at.shape)
        for i in range(at.shape[0]):
            for j in range(at.shape[1]):
                orig = x[i][j]
                x[i][j] = orig + step
                fp = f(x)
                x[i][j] = orig - step
                fm = f(x)
                x[i][j] = orig
                g[i, j] = float((fp - fm) / (2 * step))
    return g


def fd_cr_mp(raw, view_labels, anchor_mask, tau, h=1e-6):
    """Central differences of :func:`cr_mp` with respect to ``raw``.

    Same arithmetic as ``fd_mp(lambda x: cr_mp(x, ...), raw, h)`` but reuses
    the pairwise exponentials that a perturbation of one row leaves unchanged.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n, p = raw.shape
    labels = list(view_labels)
    active = [
        bool(anchor_mask[a]) and any(labels[v] == labels[a] for v in range(n) if v != a) for a in range(n)
    ]
    g = np.zeros(raw.shape)
    if not any(active):
        return g
    with gmpy2.context(MP):
        t = mpfr(tau)
        x = [[mpfr(float(v)) for v in row] for row in raw]

        def unit(row):
            norm = gmpy2.sqrt(_mp_dot(row, row))
            return [v / norm for v in row]

        z = [unit(row) for row in x]
        S = [[_mp_dot(z[a], z[v]) / t for v in range(n)] for a in range(n)]
        E = [[gmpy2.exp(S[a][v]) for v in range(n)] for a in range(n)]

        def total(zi, i):
            s_i = [_mp_dot(zi, z[v]) / t if v != i else S[i][i] for v in range(n)]
            e_i = [gmpy2.exp(sv) for sv in s_i]
            terms = []
            for a in range(n):
                if not active[a]:
                    continue
                if a == i:
                    row_s, row_e = s_i, e_i
                else:
                    row_s = [s_i[a] if v == i else S[a][v] for v in range(n)]
                    row_e = [e_i[a] if v == i else E[a][v] for v in range(n)]
                lse = gmpy2.log(gmpy2.fsum([row_e[v] for v in range(n) if v != a]))
                pos = [row_s[v] for v in range(n) if v != a and labels[v] == labels[a]]
                terms.append(lse - gmpy2.fsum(pos) / len(pos))
            return gmpy2.fsum(terms) / n

        step = mpfr(h)
        for i in range(n):
            for j in range(p):
                row = list(x[i])
                row[j] = x[i][j] + step
                fp = total(unit(row), i)
                row[j] = x[i][j] - step
                fm = total(unit(row), i)
                g[i, j] = float((fp - fm) / (2 * step))
    return g


def cs_terms_mp(W, h, view_labels, view_mask):
    """Per-view masked cross-entropy values (not yet divided by N)."""
    k = len(W[0])
    out = []
    for v, row in enumerate(h):
        if not view_mask[v]:
            out.append(mpfr(0))
            continue
        logits = [_mp_dot(row, [W[j][i] for j in range(len(W))]) for i in range(k)]
        out.append(_mp_lse(logits) - logits[view_labels[v]])
    return out


def fd_cs_mp(W, h, view_labels, view_mask, step=1e-6):
    """Central differences of the consistency term w.r.t. ``W`` and ``h``.

    A feature row only enters its own view's term, so perturbing it only
    re-evaluates that term.
    """
    W = np.asarray(W, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n = len(h)
    gW, gh = np.zeros(W.shape), np.zeros(h.shape)
    with gmpy2.context(MP):
        Wm = [[mpfr(float(v)) for v in row] for row in W]
        hm = [[mpfr(float(v)) for v in row] for row in h]
        d = mpfr(step)

        def total(Wx, hx):
            return gmpy2.fsum(cs_terms_mp(Wx, hx, view_labels, view_mask)) / n

        for a in range(W.shape[0]):
            for b in range(W.shape[1]):
                orig = Wm[a][b]
                Wm[a][b] = orig + d
                fp = total(Wm, hm)
                Wm[a][b] = orig - d
                fm = total(Wm, hm)
                Wm[a][b] = orig
                gW[a, b] = float((fp - fm) / (2 * d))
        for v in range(n):
            if not view_mask[v]:
                continue
            for j in range(h.shape[1]):
                row = list(hm[v])
                row[j] = hm[v][j] + d
                fp = cs_terms_mp(Wm, [row], [view_labels[v]], [True])[0]
                row[j] = hm[v][j] - d
                fm = cs_terms_mp(Wm, [row], [view_labels[v]], [True])[0]
                gh[v, j] = float((fp - fm) / (2 * d * n))
    return gW, gh


# --------------------------------------------------------------------------
# random instances


def _sizes(rng):
    n = int(rng.integers(3, 13))
    dim = int(rng.integers(2, 9))
    k = int(rng.integers(1, 5))
    tau = TAUS[int(rng.integers(len(TAUS)))]
    return n, dim, k, tau


def _views(rng, n, k, delta):
    m = 2 if n % 2 == 0 else 1
    source = np.tile(np.arange(n // m), m)
    q = rng.dirichlet(np.full(k, 0.5), size=n // m)
    return source, L.pseudo_labels_from_probs(q, delta, delta)


def check_cr_exact(rng) -> float:
    """Closed-form per-anchor gradient over free features (z = h, tau = 1)."""
    n, dim, k, tau = _sizes(rng)
    labels = rng.integers(0, k, size=n)
    labels[1] = labels[0]
    # scale so h.h spans the same range as z.z / tau
    h = rng.standard_normal((n, dim)) / np.sqrt(dim * tau)
    g = L.grad_cr_exact(h, labels, 0)
    fd = fd_mp(lambda x: r_mp(x, labels, 0), h)
    return max_relative_error(-g.views, fd)


def check_cr_chain(rng) -> float:
    """Masked contrastive term through normalization, temperature and masks,
    differentiated w.r.t. the unnormalized projection outputs."""
    n, dim, k, tau = _sizes(rng)
    source, pl = _views(rng, n, k, 0.6)
    raw = rng.standard_normal((n, dim))
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    z = raw / norm
    _, gz = L.contrastive_loss(z, pl, source, tau)
    g = (gz - z * np.sum(z * gz, axis=1, keepdims=True)) / norm
    fd = fd_cr_mp(raw, pl.q_hat[source], pl.mask_cr[source], tau)
    return max_relative_error(g, fd)


def cs_instance(rng):
    n, dim, k, _ = _sizes(rng)
    k = max(k, 2)
    source, pl = _views(rng, n, k, 0.5)
    h = rng.standard_normal((n, dim))
    W = rng.standard_normal((dim, k))
    return h, W, pl, source


def cs_brute_force(h, probs, q_hat, mask):
    """Class-weight closed form accumulated one view and one class at a time."""
    n, k = probs.shape
    out = np.zeros((h.shape[1], k))
    for i in range(k):
        for v in range(n):
            if mask[v] and q_hat[v] == i:
                out[:, i] += h[v] * (1.0 - probs[v, i])
    return out / n


def check_cs_closed_form(rng) -> float:
    h, W, pl, source = cs_instance(rng)
    probs = softmax(h @ W)
    closed = L.grad_cs_wrt_classweights(h, probs, pl, source)
    brute = cs_brute_force(h, probs, pl.q_hat[source], pl.mask_cs[source])
    return float(np.max(np.abs(closed - brute)))


def check_cs_gradient(rng) -> float:
    """Exact consistency gradient w.r.t. classifier weights and features."""
    h, W, pl, source = cs_instance(rng)
    _, g_logits = L.consistency_loss(h @ W, pl, source)
    gW = h.T @ g_logits
    gh = -L.grad_cs_wrt_features(W, softmax(h @ W), pl, source)
    fW, fh = fd_cs_mp(W, h, pl.q_hat[source], pl.mask_cs[source])
    return max(max_relative_error(gW, fW), max_relative_error(gh, fh))


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    instances: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} {self.name:<22} max_err={self.max_error:.3e} "
            f"tol={self.tolerance:.0e} n={self.instances} t={self.seconds:.2f}s"
        )


CHECKS = (
    ("cr_exact", check_cr_exact, 1e-6),
    ("cr_chain", check_cr_chain, 1e-6),
    ("cs_closed_form", check_cs_closed_form, 1e-12),
    ("cs_gradient", check_cs_gradient, 1e-6),
)


def run_check(name: str, instances: int = 100, seed: int = 0) -> CheckResult:
    fn, tol = {c[0]: (c[1], c[2]) for c in CHECKS}[name]
    rng = make_rng(seed)
    t0 = time.perf_counter()
    worst = max(fn(rng) for _ in range(instances))
    return CheckResult(name, worst, tol, instances, time.perf_counter() - t0)


def run_all(instances: int = 100, seed: int = 0) -> list[CheckResult]:
    return [run_check(name, instances, seed) for name, _, _ in CHECKS]

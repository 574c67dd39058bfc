"""MLP encoder, linear classifier and normalized projection head.

Parameters live in a flat ``name -> array`` mapping so the optimizer, the EMA
shadow and checkpoints can all treat them uniformly:

    enc{i}.w, enc{i}.b   encoder layers, D -> ... -> H
    cls.w                classifier, H x K (no bias: logits = h @ W)
    proj0.w, proj0.b     projection head layer 1, H -> P_hidden
    proj1.w, proj1.b     projection head layer 2, P_hidden -> P
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import ConfigError, DimensionError, NORM_EPS, l2_normalize_clamped

CHECKPOINT_FORMAT = "crlab-checkpoint/1"


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    n_classes: int
    hidden: tuple[int, ...] = (64, 64)
    feat_dim: int = 16
    proj_dim: int = 8
    proj_hidden: int | None = None  # defaults to feat_dim
    leaky_slope: float = 0.0  # 0.0 is plain ReLU

    def encoder_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.feat_dim]

    @property
    def proj_width(self) -> int:
        return self.feat_dim if self.proj_hidden is None else self.proj_hidden


@dataclass
class ModelParams:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]

    @property
    def n_encoder(self) -> int:
        return len(self.spec.encoder_sizes()) - 1

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        check_congruent(self.tensors, tensors)
        return ModelParams(self.spec, tensors)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each encoder layer
    pre: list[np.ndarray]  # encoder pre-activations
    h: np.ndarray  # penultimate features, batch x H
    logits: np.ndarray  # batch x K
    proj_pre: np.ndarray | None = None
    proj_act: np.ndarray | None = None
    proj_out: np.ndarray | None = None  # before normalization
    proj_norm: np.ndarray | None = None
    z: np.ndarray | None = None  # unit rows, batch x P
    n_clamped: int = 0


@dataclass
class EmaShadow:
    tensors: dict[str, np.ndarray]
    momentum: float = 0.999

    def as_params(self, spec: ModelSpec) -> ModelParams:
        return ModelParams(spec, self.tensors)


def check_congruent(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> None:
    if a.keys() != b.keys():
        raise DimensionError(f"parameter names differ: {sorted(a)} vs {sorted(b)}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise DimensionError(f"{k}: shape {a[k].shape} vs {b[k].shape}")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """Zero-mean Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    sizes = spec.encoder_sizes()
    dims = [*sizes, spec.n_classes, spec.proj_width, spec.proj_dim]
    if any(int(d) < 1 for d in dims):
        raise ConfigError(f"all layer sizes must be >= 1, got {dims}")

    def weight(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    t: dict[str, np.ndarray] = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        t[f"enc{i}.w"] = weight(a, b)
        t[f"enc{i}.b"] = np.zeros(b)
    H = spec.feat_dim
    t["cls.w"] = weight(H, spec.n_classes)
    t["proj0.w"] = weight(H, spec.proj_width)
    t["proj0.b"] = np.zeros(spec.proj_width)
    t["proj1.w"] = weight(spec.proj_width, spec.proj_dim)
    t["proj1.b"] = np.zeros(spec.proj_dim)
    return ModelParams(spec, t)


def _act(x, slope):
    return np.where(x > 0, x, slope * x) if slope else np.maximum(x, 0.0)


def _act_grad(pre, g, slope):
    return np.where(pre > 0, g, slope * g) if slope else g * (pre > 0)


def forward(params: ModelParams, inputs: np.ndarray, project: bool = True) -> ForwardCache:
    """Run the network. ``project=False`` skips the projection head."""
    x = np.asarray(inputs, dtype=np.float64)
    t = params.tensors
    slope = params.spec.leaky_slope
    if x.ndim != 2 or x.shape[1] != t["enc0.w"].shape[0]:
        raise DimensionError(f"expected batch x {t['enc0.w'].shape[0]} inputs, got {x.shape}")
    ins, pres = [], []
    a = x
    for i in range(params.n_encoder):
        ins.append(a)
        pre = a @ t[f"enc{i}.w"] + t[f"enc{i}.b"]
        pres.append(pre)
        a = _act(pre, slope)
    h = a
    cache = ForwardCache(ins, pres, h, h @ t["cls.w"])
    if project:
        cache.proj_pre = h @ t["proj0.w"] + t["proj0.b"]
        cache.proj_act = _act(cache.proj_pre, slope)
        cache.proj_out = cache.proj_act @ t["proj1.w"] + t["proj1.b"]
        cache.z, cache.proj_norm, cache.n_clamped = l2_normalize_clamped(cache.proj_out, NORM_EPS)
    return cache


def backward(
    params: ModelParams,
    cache: ForwardCache,
    grad_logits: np.ndarray | None,
    grad_z: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Chain upstream gradients on logits and z back to every parameter.

    Either upstream gradient may be None (treated as zero). Parameters that
    receive no signal get explicit zero arrays.
    """
    t = params.tensors
    slope = params.spec.leaky_slope
    grads = {k: np.zeros_like(v) for k, v in t.items()}
    dh = np.zeros_like(cache.h)
    if grad_logits is not None:
        if grad_logits.shape != cache.logits.shape:
            raise DimensionError(f"grad_logits {grad_logits.shape} vs logits {cache.logits.shape}")
        grads["cls.w"] = cache.h.T @ grad_logits
        dh = grad_logits @ t["cls.w"].T
    if grad_z is not None:
        if cache.z is None:
            raise DimensionError("grad_z given but forward ran without the projection head")
        if grad_z.shape != cache.z.shape:
            raise DimensionError(f"grad_z {grad_z.shape} vs z {cache.z.shape}")
        z = cache.z
        # d(u/|u|) = (g - z<z,g>)/|u|; clamped rows are a plain division by eps
        radial = np.sum(z * grad_z, axis=1, keepdims=True)
        clamped = cache.proj_norm <= NORM_EPS
        d_out = np.where(clamped, grad_z, grad_z - z * radial) / cache.proj_norm
        grads["proj1.w"] = cache.proj_act.T @ d_out
        grads["proj1.b"] = d_out.sum(axis=0)
        d_pre = _act_grad(cache.proj_pre, d_out @ t["proj1.w"].T, slope)
        grads["proj0.w"] = cache.h.T @ d_pre
        grads["proj0.b"] = d_pre.sum(axis=0)
        dh = dh + d_pre @ t["proj0.w"].T
    g = dh
    for i in reversed(range(params.n_encoder)):
        g = _act_grad(cache.pre[i], g, slope)
        grads[f"enc{i}.w"] = cache.inputs[i].T @ g
        grads[f"enc{i}.b"] = g.sum(axis=0)
        if i:
            g = g @ t[f"enc{i}.w"].T
    return grads


def make_ema(params: ModelParams, momentum: float = 0.999) -> EmaShadow:
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1), got {momentum}")
    return EmaShadow({k: v.copy() for k, v in params.tensors.items()}, momentum)


def ema_update(shadow: EmaShadow, params: ModelParams) -> EmaShadow:
    """s' = m*s + (1-m)*p for every entry."""
    check_congruent(shadow.tensors, params.tensors)
    m = shadow.momentum
    new = {k: m * s + (1.0 - m) * params.tensors[k] for k, s in shadow.tensors.items()}
    return EmaShadow(new, m)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], spec: ModelSpec) -> None:
    """JSON checkpoint: header string, model spec and named tensors with shapes."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "spec": {
            "input_dim": spec.input_dim,
            "n_classes": spec.n_classes,
            "hidden": list(spec.hidden),
            "feat_dim": spec.feat_dim,
            "proj_dim": spec.proj_dim,
            "proj_hidden": spec.proj_hidden,
            "leaky_slope": spec.leaky_slope,
        },
        "tensors": {
            k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in tensors.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {doc.get('format')!r}")
    s = doc["spec"]
    spec = ModelSpec(
        input_dim=s["input_dim"],
        n_classes=s["n_classes"],
        hidden=tuple(s["hidden"]),
        feat_dim=s["feat_dim"],
        proj_dim=s["proj_dim"],
        proj_hidden=s["proj_hidden"],
        leaky_slope=s["leaky_slope"],
    )
    tensors = {
        k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
        for k, v in doc["tensors"].items()
    }
    params = ModelParams(spec, tensors)
    check_congruent(init_params(spec, np.random.default_rng(0)).tensors, tensors)
    return params

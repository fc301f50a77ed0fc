"""Small dense-math engine: MLPs with manual backprop, Adam, Polyak averaging.

Every network in the package is an MLP over ``[input; embedding(label)]`` with
ReLU activations and optional layer normalization on the hidden layers. Arrays
are plain numpy arrays (float32 for training; the routines are dtype-agnostic so
tests can run them in float64 for finite-difference checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LN_EPS = 1e-5
MANIFEST_FORMAT = "stylerl-params/1"


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    use_layer_norm: bool = False
    label_embedding_dim: int | None = None
    num_labels: int | None = None

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden must be a nonempty list of positive widths")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if (self.label_embedding_dim is None) != (self.num_labels is None):
            raise ValueError("label_embedding_dim and num_labels go together")
        if self.label_embedding_dim is not None and (self.label_embedding_dim < 1 or self.num_labels < 1):
            raise ValueError("embedding dims must be >= 1")

    @property
    def conditioned(self) -> bool:
        return self.label_embedding_dim is not None

    @property
    def first_layer_dim(self) -> int:
        return self.input_dim + (self.label_embedding_dim or 0)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "use_layer_norm": self.use_layer_norm,
            "label_embedding_dim": self.label_embedding_dim,
            "num_labels": self.num_labels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(**{**d, "hidden": tuple(d["hidden"])})


@dataclass
class ParameterSet:
    """Named arrays of one network plus its Adam moments.

    Entries are views into one flat buffer (likewise the moments) so optimizer
    and averaging updates touch a single array.
    """

    entries: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        names = list(self.entries)
        dtype = np.result_type(*[self.entries[n] for n in names]) if names else np.float32
        self.flat = self._pack(self.entries, names, dtype)
        self.flat_m = self._pack({n: self.adam_m.get(n, 0) for n in names}, names, dtype)
        self.flat_v = self._pack({n: self.adam_v.get(n, 0) for n in names}, names, dtype)
        self.entries = self._views(self.flat)
        self.adam_m = self._views(self.flat_m)
        self.adam_v = self._views(self.flat_v)

    def _pack(self, arrays, names, dtype):
        self._layout = []
        offset = 0
        for n in names:
            shape = np.shape(self.entries[n])
            size = int(np.prod(shape)) if shape else 1
            self._layout.append((n, shape, offset, size))
            offset += size
        flat = np.zeros(offset, dtype=dtype)
        for n, shape, off, size in self._layout:
            flat[off:off + size] = np.broadcast_to(np.asarray(arrays[n], dtype=dtype), shape).ravel()
        return flat

    def _views(self, flat):
        return {n: flat[off:off + size].reshape(shape) for n, shape, off, size in self._layout}

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Gradient dict -> flat vector in entry order (missing entries are zero)."""
        out = np.zeros_like(self.flat)
        for n, shape, off, size in self._layout:
            g = grads.get(n)
            if g is None:
                continue
            if np.shape(g) != shape:
                raise ValueError(f"gradient shape mismatch for {n}: {np.shape(g)} vs {shape}")
            out[off:off + size] = np.ravel(g)
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __deepcopy__(self, memo):
        return self.copy()

    def names(self) -> list[str]:
        return list(self.entries)

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {k: v.copy() for k, v in self.entries.items()},
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            self.step_count,
        )

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(
            {k: v.astype(dtype) for k, v in self.entries.items()},
            {k: v.astype(dtype) for k, v in self.adam_m.items()},
            {k: v.astype(dtype) for k, v in self.adam_v.items()},
            self.step_count,
        )

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    cosine_decay: bool = False
    total_steps: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")


def expectile_loss(u, kappa: float):
    """Asymmetric squared loss ``|kappa - 1{u<0}| * u**2`` (elementwise)."""
    if not 0.5 <= kappa < 1.0:
        raise ValueError(f"kappa must lie in [0.5, 1), got {kappa}")
    u = np.asarray(u, dtype=np.float64)
    out = np.abs(kappa - (u < 0)) * u * u
    return float(out) if out.ndim == 0 else out


def expectile_grad(u: np.ndarray, kappa: float) -> np.ndarray:
    """Derivative of :func:`expectile_loss` with respect to ``u``."""
    weight = np.where(u < 0, 1.0 - kappa, kappa).astype(u.dtype)
    return 2.0 * weight * u


def layer_names(spec: MlpSpec) -> list[str]:
    return [f"l{i}" for i in range(len(spec.hidden))] + ["out"]


def init_params(spec: MlpSpec, rng: np.random.Generator, dtype=np.float32) -> ParameterSet:
    """Glorot-uniform weights, zero biases, N(0, 0.02^2) label embeddings."""
    entries: dict[str, np.ndarray] = {}
    if spec.conditioned:
        entries["embed"] = (0.02 * rng.standard_normal((spec.num_labels, spec.label_embedding_dim))).astype(dtype)
    dims = [spec.first_layer_dim, *spec.hidden, spec.output_dim]
    for i, name in enumerate(layer_names(spec)):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        entries[f"{name}.w"] = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
        entries[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)
        if spec.use_layer_norm and name != "out":
            entries[f"{name}.ln_g"] = np.ones(fan_out, dtype=dtype)
            entries[f"{name}.ln_b"] = np.zeros(fan_out, dtype=dtype)
    return ParameterSet(entries)


def embed_label(params: ParameterSet, z) -> np.ndarray:
    """Row(s) ``z`` of the label embedding matrix."""
    table = params.entries["embed"]
    z_arr = np.asarray(z)
    if z_arr.size and (z_arr.min() < 0 or z_arr.max() >= table.shape[0]):
        raise ValueError(f"label index out of range [0, {table.shape[0]})")
    return table[z_arr]


def _check_input(spec: MlpSpec, x: np.ndarray, labels) -> None:
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input of shape (N, {spec.input_dim}), got {x.shape}")
    if spec.conditioned:
        if labels is None:
            raise ValueError("conditioned network needs labels")
        if np.shape(labels) != (x.shape[0],):
            raise ValueError(f"labels must have shape ({x.shape[0]},), got {np.shape(labels)}")
    elif labels is not None:
        raise ValueError("network is not label-conditioned")


def mlp_forward_cached(spec: MlpSpec, params: ParameterSet, x: np.ndarray, labels=None):
    """Forward pass returning ``(output, cache)`` for :func:`backward`."""
    _check_input(spec, x, labels)
    p = params.entries
    h = x
    if spec.conditioned:
        h = np.concatenate([x, embed_label(params, labels).astype(x.dtype, copy=False)], axis=1)
    cache = {"labels": labels, "inputs": [], "ln": [], "pre": []}
    n_hidden = len(spec.hidden)
    for i in range(n_hidden):
        cache["inputs"].append(h)
        a = h @ p[f"l{i}.w"]
        a += p[f"l{i}.b"]
        if spec.use_layer_norm:
            mu = a.mean(axis=1, keepdims=True)
            a -= mu
            inv_std = 1.0 / np.sqrt((a * a).mean(axis=1, keepdims=True) + LN_EPS)
            a *= inv_std
            cache["ln"].append((a.copy(), inv_std))
            a *= p[f"l{i}.ln_g"]
            a += p[f"l{i}.ln_b"]
        cache["pre"].append(a)
        h = np.maximum(a, 0)
    cache["inputs"].append(h)
    out = h @ p["out.w"]
    out += p["out.b"]
    return out, cache


def mlp_forward(spec: MlpSpec, params: ParameterSet, x: np.ndarray, labels=None) -> np.ndarray:
    return mlp_forward_cached(spec, params, x, labels)[0]


def backward(spec: MlpSpec, params: ParameterSet, x: np.ndarray, output_grad: np.ndarray,
             labels=None, cache=None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``sum(output * output_grad)`` w.r.t. every entry.

    Pass the ``cache`` from :func:`mlp_forward_cached` to skip the recomputation.
    Entries the network does not own (e.g. a policy's log-std) are left out.
    """
    if cache is None:
        _, cache = mlp_forward_cached(spec, params, x, labels)
    if output_grad.shape != (x.shape[0], spec.output_dim):
        raise ValueError(f"output_grad must have shape ({x.shape[0]}, {spec.output_dim})")
    p = params.entries
    grads: dict[str, np.ndarray] = {}
    h = cache["inputs"][-1]
    grads["out.w"] = h.T @ output_grad
    grads["out.b"] = output_grad.sum(axis=0)
    g = output_grad @ p["out.w"].T
    for i in reversed(range(len(spec.hidden))):
        g = g * (cache["pre"][i] > 0)
        if spec.use_layer_norm:
            xhat, inv_std = cache["ln"][i]
            grads[f"l{i}.ln_g"] = (g * xhat).sum(axis=0)
            grads[f"l{i}.ln_b"] = g.sum(axis=0)
            gx = g * p[f"l{i}.ln_g"]
            g = inv_std * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        inp = cache["inputs"][i]
        grads[f"l{i}.w"] = inp.T @ g
        grads[f"l{i}.b"] = g.sum(axis=0)
        if i > 0 or spec.conditioned:
            g = g @ p[f"l{i}.w"].T
    if spec.conditioned:
        labels = np.asarray(cache["labels"])
        onehot = (labels[:, None] == np.arange(spec.num_labels)).astype(g.dtype)
        grads["embed"] = onehot.T @ g[:, spec.input_dim:]
    return grads


def cosine_factor(step: int, total: int) -> float:
    """Cosine decay multiplier, 1 at step 0 down to 0 at ``total`` (0 afterwards)."""
    if step >= total:
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * step / total))


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], config: OptimizerConfig) -> ParameterSet:
    """In-place bias-corrected Adam update; returns ``params`` for chaining."""
    b1, b2 = config.betas
    g = params.flatten_grads(grads)
    params.step_count += 1
    t = params.step_count
    lr = config.learning_rate
    if config.cosine_decay:
        lr *= cosine_factor(t - 1, config.total_steps)
    m, v = params.flat_m, params.flat_v
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    step_size = lr / (1.0 - b1 ** t)
    denom = np.sqrt(v / (1.0 - b2 ** t))
    denom += config.eps
    params.flat -= (step_size * m / denom).astype(params.flat.dtype, copy=False)
    if not np.isfinite(params.flat).all():
        bad = [n for n, arr in params.entries.items() if not np.isfinite(arr).all()]
        raise FloatingPointError(f"non-finite parameter(s) {bad} after Adam step {t}")
    return params


def polyak_update(target: ParameterSet, online: ParameterSet, upsilon: float) -> ParameterSet:
    """``target <- (1 - upsilon) * target + upsilon * online`` in place."""
    if not 0.0 <= upsilon <= 1.0:
        raise ValueError("upsilon must lie in [0, 1]")
    if target._layout != online._layout:
        raise ValueError("parameter layouts differ")
    if upsilon == 1.0:
        target.flat[...] = online.flat
    elif upsilon > 0.0:
        target.flat *= 1.0 - upsilon
        target.flat += upsilon * online.flat
    return target


def save_parameters(params: ParameterSet, path: str | Path, extra: dict[str, str] | None = None) -> None:
    """Write ``<path>.manifest`` (key: value text) and ``<path>.bin`` (little-endian f32).

    The blob holds entries, then Adam first moments, then second moments, each
    in manifest order.
    """
    path = Path(path)
    lines = [f"format: {MANIFEST_FORMAT}", f"step_count: {params.step_count}", "dtype: float32"]
    for key, value in (extra or {}).items():
        lines.append(f"meta.{key}: {value}")
    chunks = []
    offset = 0
    for name in params.names():
        arr = params.entries[name]
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"entry: {name} {shape} {offset}")
        offset += arr.size
    for group in (params.entries, params.adam_m, params.adam_v):
        for name in params.names():
            chunks.append(np.ascontiguousarray(group[name], dtype="<f4").tobytes())
    lines.append(f"total_floats: {3 * offset}")
    Path(f"{path}.manifest").write_text("\n".join(lines) + "\n")
    Path(f"{path}.bin").write_bytes(b"".join(chunks))


def load_parameters(path: str | Path) -> tuple[ParameterSet, dict[str, str]]:
    path = Path(path)
    text = Path(f"{path}.manifest").read_text()
    meta: dict[str, str] = {}
    layout: list[tuple[str, tuple[int, ...], int]] = []
    step_count = None
    total = None
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(": ")
        if key == "format":
            if value != MANIFEST_FORMAT:
                raise ValueError(f"unknown parameter format {value!r}")
        elif key == "step_count":
            step_count = int(value)
        elif key == "entry":
            name, shape, offset = value.split(" ")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            layout.append((name, dims, int(offset)))
        elif key == "total_floats":
            total = int(value)
        elif key.startswith("meta."):
            meta[key[5:]] = value
    if step_count is None or total is None:
        raise ValueError(f"{path}.manifest: missing step_count/total_floats")
    blob = np.frombuffer(Path(f"{path}.bin").read_bytes(), dtype="<f4")
    if blob.size != total:
        raise ValueError(f"{path}.bin: expected {total} floats, found {blob.size}")
    n = total // 3
    groups = []
    for g in range(3):
        part = {}
        for name, dims, offset in layout:
            size = int(np.prod(dims)) if dims else 1
            start = g * n + offset
            part[name] = blob[start:start + size].reshape(dims).astype(np.float32)
        groups.append(part)
    return ParameterSet(groups[0], groups[1], groups[2], step_count), meta

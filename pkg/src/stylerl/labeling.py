"""Programmatic labeling functions for Circle2d and the annotated-dataset view.

A criterion maps the window ``[t - w + 1, t + w)`` around each transition to a
discrete label. Windows shrink at episode boundaries. Per-step quantities are
forward differences, so transition ``t`` of an episode with ``T`` transitions
owns ``p[t+1] - p[t]`` and ``theta[t+1] - theta[t]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .env import wrap_angle

CRITERIA = (
    "position",
    "movement_direction",
    "turn_direction",
    "radius_category",
    "speed_category",
    "curvature_noise",
)


@dataclass(frozen=True)
class StyleCriterion:
    id: str
    window_radius: int
    num_labels: int
    promptable: tuple[int, ...]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.id not in CRITERIA:
            raise ValueError(f"unknown criterion {self.id!r}")
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if not all(0 <= z < self.num_labels for z in self.promptable):
            raise ValueError("promptable labels must lie in [0, num_labels)")

    @property
    def window_size(self) -> int:
        return 2 * self.window_radius - 1

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "window_radius": self.window_radius,
            "num_labels": self.num_labels,
            "promptable": list(self.promptable),
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StyleCriterion":
        return cls(d["id"], int(d["window_radius"]), int(d["num_labels"]),
                   tuple(int(z) for z in d["promptable"]), dict(d.get("params", {})))


def make_criterion(name: str, **overrides) -> StyleCriterion:
    """Default Circle2d criteria. ``overrides`` replace entries of ``params``."""
    if name == "position":
        params = {"x_range": [-30.0, 30.0], "x_bins": 4, "y_split": 0.0}
        c = StyleCriterion(name, 1, 8, tuple(range(8)), params)
    elif name == "movement_direction":
        params = {"bins": 8, "min_displacement": 0.1}
        c = StyleCriterion(name, 1, 9, tuple(range(8)), params)
    elif name == "turn_direction":
        params = {"threshold": 0.1}
        c = StyleCriterion(name, 6, 3, (0, 1), params)
    elif name == "radius_category":
        params = {"range": [2.0, 11.0], "bins": 3, "straight_threshold": 0.1, "straight_window_radius": 6}
        c = StyleCriterion(name, 26, 4, (0, 1, 2), params)
    elif name == "speed_category":
        params = {"range": [0.5, 3.0], "bins": 3}
        c = StyleCriterion(name, 1, 3, (0, 1, 2), params)
    elif name == "curvature_noise":
        params = {"range": [0.0, 0.8], "bins": 3}
        c = StyleCriterion(name, 26, 3, (0, 1, 2), params)
    else:
        raise ValueError(f"unknown criterion {name!r}; expected one of {CRITERIA}")
    if overrides:
        unknown = set(overrides) - set(c.params) - {"window_radius"}
        if unknown:
            raise ValueError(f"unknown params for {name}: {sorted(unknown)}")
        params = {**c.params, **{k: v for k, v in overrides.items() if k != "window_radius"}}
        c = StyleCriterion(name, int(overrides.get("window_radius", c.window_radius)), c.num_labels, c.promptable, params)
    return c


EDGE_TOL = 1e-9


def uniform_bin(values, lo: float, hi: float, k: int) -> np.ndarray:
    """Left-to-right uniform bins on ``[lo, hi]``; outside values clamp to the edges.

    Values within ``EDGE_TOL`` bin widths below an edge count as on the edge.
    """
    idx = np.floor((np.asarray(values, dtype=np.float64) - lo) / (hi - lo) * k + EDGE_TOL)
    return np.clip(idx, 0, k - 1).astype(np.int64)


# -- window helpers ---------------------------------------------------------


def _window_bounds(n: int, length: int, w: int):
    t = np.arange(n)
    return np.maximum(t - w + 1, 0), np.minimum(t + w, length)


def window_majority(labels: np.ndarray, n: int, w: int, num_labels: int) -> np.ndarray:
    """Majority over truncated windows; ties go to the smallest label."""
    labels = np.asarray(labels, dtype=np.int64)
    if w == 1:
        return labels[:n].copy()
    onehot = np.zeros((len(labels) + 1, num_labels), dtype=np.int64)
    onehot[1:][np.arange(len(labels)), labels] = 1
    csum = np.cumsum(onehot, axis=0)
    lo, hi = _window_bounds(n, len(labels), w)
    return np.argmax(csum[hi] - csum[lo], axis=1)


def _window_stat(values: np.ndarray, n: int, w: int, fn) -> np.ndarray:
    """Apply ``fn(array, axis=-1)`` on truncated windows; empty windows give 0."""
    out = np.zeros(n)
    length = len(values)
    size = 2 * w - 1
    lo, hi = _window_bounds(n, length, w)
    full = (hi - lo) == size
    if length >= size and full.any():
        views = sliding_window_view(values, size)
        idx = np.nonzero(full)[0]
        out[idx] = fn(views[lo[idx]], axis=-1)
    for t in np.nonzero(~full)[0]:
        if hi[t] > lo[t]:
            out[t] = fn(values[lo[t]:hi[t]])
    return out


# -- circle fit -------------------------------------------------------------


def kasa_fit(xy: np.ndarray):
    """Algebraic least-squares circle fit. Returns ``(center, radius)``.

    Raises ``ValueError`` for fewer than three points or collinear input.
    """
    xy = np.asarray(xy, dtype=np.float64)
    if len(xy) < 3:
        raise ValueError("need at least 3 points")
    c, r, ok = _kasa_batched(xy[None])
    if not ok[0]:
        raise ValueError("degenerate (collinear) points")
    return c[0], float(r[0])


def _kasa_batched(windows: np.ndarray):
    # windows: (m, k, 2); solve on centered coordinates for conditioning
    mean = windows.mean(axis=1, keepdims=True)
    uv = windows - mean
    u, v = uv[..., 0], uv[..., 1]
    suu, svv, suv = (u * u).sum(1), (v * v).sum(1), (u * v).sum(1)
    suuu, svvv = (u ** 3).sum(1), (v ** 3).sum(1)
    suvv, svuu = (u * v * v).sum(1), (v * u * u).sum(1)
    det = suu * svv - suv * suv
    ok = det > 1e-10 * (suu + svv) ** 2
    safe = np.where(ok, det, 1.0)
    bu = 0.5 * (suuu + suvv)
    bv = 0.5 * (svvv + svuu)
    uc = (bu * svv - bv * suv) / safe
    vc = (suu * bv - suv * bu) / safe
    k = windows.shape[1]
    r = np.sqrt(uc ** 2 + vc ** 2 + (suu + svv) / k)
    center = np.stack([uc, vc], axis=-1) + mean[:, 0]
    return center, np.where(ok, r, np.inf), ok


# -- labeling functions on one episode ----------------------------------------
# Each takes positions (T+1, 2) and headings (T+1,) and returns T labels.


def _headings_delta(theta):
    return wrap_angle(np.diff(theta))


def label_position(positions, headings, criterion: StyleCriterion) -> np.ndarray:
    p = criterion.params
    n = len(positions) - 1
    lo, hi = p["x_range"]
    xb = uniform_bin(positions[:n, 0], lo, hi, p["x_bins"])
    yb = (positions[:n, 1] >= p["y_split"]).astype(np.int64)
    return window_majority(yb * p["x_bins"] + xb, n, criterion.window_radius, criterion.num_labels)


def label_movement_direction(positions, headings, criterion: StyleCriterion) -> np.ndarray:
    p = criterion.params
    n = len(positions) - 1
    d = np.diff(positions, axis=0)
    ang = np.arctan2(d[:, 1], d[:, 0])
    k = p["bins"]
    b = np.floor((ang + np.pi) / (2 * np.pi) * k).astype(np.int64) % k
    b = np.where(np.hypot(d[:, 0], d[:, 1]) < p["min_displacement"], k, b)
    return window_majority(b, n, criterion.window_radius, criterion.num_labels)


def label_turn_direction(positions, headings, criterion: StyleCriterion) -> np.ndarray:
    n = len(positions) - 1
    omega = _window_stat(_headings_delta(headings), n, criterion.window_radius, np.mean)
    thr = criterion.params["threshold"]
    return np.where(np.abs(omega) < thr, 2, np.where(omega > 0, 1, 0)).astype(np.int64)


def label_radius_category(positions, headings, criterion: StyleCriterion) -> np.ndarray:
    p = criterion.params
    n = len(positions) - 1
    k = p["bins"]
    straight_idx = k
    mabs = _window_stat(np.abs(_headings_delta(headings)), n, p["straight_window_radius"], np.mean)
    labels = np.full(n, straight_idx, dtype=np.int64)
    curved = np.nonzero(mabs >= p["straight_threshold"])[0]
    if len(curved) == 0:
        return labels
    w = criterion.window_radius
    lo, hi = _window_bounds(n, len(positions), w)
    size = 2 * w - 1
    radius = np.full(n, np.inf)
    ok = np.zeros(n, dtype=bool)
    full = curved[(hi[curved] - lo[curved]) == size]
    if len(full):
        views = sliding_window_view(positions, size, axis=0).transpose(0, 2, 1)
        _, r, good = _kasa_batched(views[lo[full]])
        radius[full], ok[full] = r, good
    for t in curved[(hi[curved] - lo[curved]) != size]:
        if hi[t] - lo[t] >= 3:
            _, r, good = _kasa_batched(positions[None, lo[t]:hi[t]])
            radius[t], ok[t] = r[0], good[0]
    lo_r, hi_r = p["range"]
    labels[ok] = uniform_bin(radius[ok], lo_r, hi_r, k)
    return labels


def label_speed_category(positions, headings, criterion: StyleCriterion) -> np.ndarray:
    p = criterion.params
    n = len(positions) - 1
    d = np.diff(positions, axis=0)
    b = uniform_bin(np.hypot(d[:, 0], d[:, 1]), *p["range"], p["bins"])
    return window_majority(b, n, criterion.window_radius, criterion.num_labels)


def label_curvature_noise(positions, headings, criterion: StyleCriterion) -> np.ndarray:
    p = criterion.params
    n = len(positions) - 1
    d2 = np.diff(_headings_delta(headings))
    sigma = _window_stat(d2, n, criterion.window_radius, np.std)
    return uniform_bin(sigma, *p["range"], p["bins"])


LABELERS = {
    "position": label_position,
    "movement_direction": label_movement_direction,
    "turn_direction": label_turn_direction,
    "radius_category": label_radius_category,
    "speed_category": label_speed_category,
    "curvature_noise": label_curvature_noise,
}


def label_episode(positions, headings, criterion: StyleCriterion) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    headings = np.asarray(headings, dtype=np.float64)
    if len(positions) < 2:
        raise ValueError("an episode needs at least one transition")
    return LABELERS[criterion.id](positions, headings, criterion)


# -- annotated datasets -------------------------------------------------------


@dataclass(frozen=True)
class StyleSamplingSpec:
    mode: str = "random"  # current | future | random | mixture
    mixture_weights: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.mode not in ("current", "future", "random", "mixture"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        w = np.asarray(self.mixture_weights, dtype=np.float64)
        if w.shape != (3,) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture_weights must be 3 nonnegative reals summing to 1")


SAMPLING_ALIASES = {"p_c": "current", "p_f": "future", "p_r": "random", "p_m": "mixture"}


def sampling_spec(name: str) -> StyleSamplingSpec:
    return StyleSamplingSpec(SAMPLING_ALIASES.get(name, name))


@dataclass
class LabeledDataset:
    base: object  # datastore.Dataset
    criterion: StyleCriterion
    labels: np.ndarray  # (N,) uint8
    zeta: float = 0.0
    pollution_seed: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if len(self.labels) != self.base.num_transitions:
            raise ValueError("labels length must equal the transition count")
        if len(self.labels) and int(self.labels.max()) >= self.criterion.num_labels:
            raise ValueError("label index out of range")
        # last transition index of the episode owning each transition
        self.episode_last = self.base.episode_ends[self.base.episode_id] - 1

    @property
    def global_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.criterion.num_labels)

    def future_counts(self, t_index: int) -> np.ndarray:
        """Label counts over ``[t_index, end of episode]``."""
        seg = self.labels[t_index:self.episode_last[t_index] + 1]
        return np.bincount(seg, minlength=self.criterion.num_labels)


def annotate(dataset, criterion: StyleCriterion) -> LabeledDataset:
    if dataset.num_transitions == 0:
        raise ValueError("dataset is empty")
    out = np.empty(dataset.num_transitions, dtype=np.uint8)
    for e in range(dataset.num_episodes):
        obs = dataset.episode_observations(e)
        lab = label_episode(obs[:, -3:-1], obs[:, -1], criterion)
        out[dataset.episode_starts[e]:dataset.episode_ends[e]] = lab
    return LabeledDataset(dataset, criterion, out)


def pollute_labels(labels, num_labels: int, zeta: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each label w.p. ``zeta`` by a uniform draw over the other labels."""
    if num_labels < 2:
        raise ValueError("pollution needs at least 2 labels")
    if not 0.0 <= zeta <= 1.0:
        raise ValueError("zeta must be in [0, 1]")
    labels = np.asarray(labels)
    flip = rng.random(len(labels)) < zeta
    shift = rng.integers(1, num_labels, size=len(labels))
    return np.where(flip, (labels.astype(np.int64) + shift) % num_labels, labels).astype(labels.dtype)


def pollute(labeled: LabeledDataset, zeta: float, seed) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    new = pollute_labels(labeled.labels, labeled.criterion.num_labels, zeta, rng)
    return LabeledDataset(labeled.base, labeled.criterion, new, zeta=float(zeta),
                          pollution_seed=None if seed is None else int(seed))


def noise_threshold(num_labels: int) -> float:
    """Largest pollution rate at which the true label stays the per-step mode."""
    return (num_labels - 1) / num_labels


def sample_style_indices(labeled: LabeledDataset, idx: np.ndarray, spec: StyleSamplingSpec,
                         rng: np.random.Generator) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    mode = spec.mode
    if mode == "mixture":
        choice = rng.choice(3, size=len(idx), p=np.asarray(spec.mixture_weights))
        out = np.empty(len(idx), dtype=np.int64)
        for k, m in enumerate(("current", "future", "random")):
            sel = choice == k
            if sel.any():
                out[sel] = sample_style_indices(labeled, idx[sel], StyleSamplingSpec(m), rng)
        return out
    if mode == "current":
        return labeled.labels[idx].astype(np.int64)
    if mode == "future":
        # uniform over the future multiset == label at a uniform future step
        span = labeled.episode_last[idx] - idx + 1
        off = np.floor(rng.random(len(idx)) * span).astype(np.int64)
        return labeled.labels[idx + off].astype(np.int64)
    pick = rng.integers(0, len(labeled.labels), size=len(idx))
    return labeled.labels[pick].astype(np.int64)


def sample_style(labeled: LabeledDataset, t_index: int, spec: StyleSamplingSpec, rng) -> int:
    if not 0 <= t_index < len(labeled.labels):
        raise IndexError("t_index out of range")
    return int(sample_style_indices(labeled, np.array([t_index]), spec, rng)[0])


# -- sidecar IO -------------------------------------------------------------

SIDECAR_FORMAT = "stylerl-labels/1"


class LabelFormatError(ValueError):
    pass


def write_labels(labeled: LabeledDataset, path) -> None:
    path = Path(path)
    manifest = {
        "format": SIDECAR_FORMAT,
        "criterion": labeled.criterion.to_dict(),
        "count": int(len(labeled.labels)),
        "zeta": labeled.zeta,
        "pollution_seed": labeled.pollution_seed,
        "histogram": labeled.global_histogram.tolist(),
        "dtype": "uint8",
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    path.with_suffix(".bin").write_bytes(labeled.labels.astype(np.uint8).tobytes())


def read_labels(path, dataset) -> LabeledDataset:
    path = Path(path)
    try:
        manifest = json.loads(path.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LabelFormatError(f"{path.with_suffix('.json')}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != SIDECAR_FORMAT:
        raise LabelFormatError(f"{path}: field 'format' is {manifest.get('format')!r}")
    raw = path.with_suffix(".bin").read_bytes()
    if len(raw) != manifest.get("count"):
        raise LabelFormatError(f"{path}: field 'count' says {manifest.get('count')} but blob holds {len(raw)}")
    if manifest["count"] != dataset.num_transitions:
        raise LabelFormatError(f"{path}: field 'count' does not match dataset transitions {dataset.num_transitions}")
    criterion = StyleCriterion.from_dict(manifest["criterion"])
    labels = np.frombuffer(raw, dtype=np.uint8).copy()
    return LabeledDataset(dataset, criterion, labels, zeta=float(manifest.get("zeta", 0.0)),
                          pollution_seed=manifest.get("pollution_seed"))

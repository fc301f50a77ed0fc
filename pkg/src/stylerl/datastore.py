"""Trajectory storage and minibatch assembly.

On disk a dataset is ``<stem>.json`` (manifest) plus ``<stem>.bin`` holding
little-endian float32 arrays in manifest order: observations, actions,
rewards. Observations are stored per episode with one extra terminal row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labeling import sample_style_indices

DATASET_FORMAT = "stylerl-dataset/1"
FIELD_ORDER = ("observations", "actions", "rewards")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    observations: np.ndarray  # (N + E, obs_dim) float32
    actions: np.ndarray  # (N, act_dim) float32
    rewards: np.ndarray  # (N,) float32
    episode_lengths: np.ndarray  # (E,) transitions per episode
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.ascontiguousarray(self.observations, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        self.rewards = np.ascontiguousarray(self.rewards, dtype=np.float32)
        self.episode_lengths = np.asarray(self.episode_lengths, dtype=np.int64)
        n = int(self.episode_lengths.sum())
        if len(self.actions) != n or len(self.rewards) != n:
            raise DatasetFormatError("actions/rewards length does not match episode_lengths")
        if len(self.observations) != n + len(self.episode_lengths):
            raise DatasetFormatError("observations must hold one extra row per episode")
        if (self.episode_lengths < 1).any():
            raise DatasetFormatError("every episode needs at least one transition")
        self.episode_ends = np.cumsum(self.episode_lengths)
        self.episode_starts = self.episode_ends - self.episode_lengths
        self.episode_id = np.repeat(np.arange(len(self.episode_lengths)), self.episode_lengths)
        self.t = np.arange(n) - self.episode_starts[self.episode_id]
        self.obs_index = np.arange(n) + self.episode_id
        self.dones = (self.t == self.episode_lengths[self.episode_id] - 1)

    @classmethod
    def from_trajectories(cls, trajectories, header=None) -> "Dataset":
        if not trajectories:
            raise ValueError("need at least one trajectory")
        return cls(
            observations=np.concatenate([tr.observations for tr in trajectories]),
            actions=np.concatenate([tr.actions for tr in trajectories]),
            rewards=np.concatenate([tr.rewards for tr in trajectories]),
            episode_lengths=np.array([len(tr) for tr in trajectories]),
            header=dict(header or {}),
        )

    @property
    def num_transitions(self) -> int:
        return len(self.actions)

    @property
    def num_episodes(self) -> int:
        return len(self.episode_lengths)

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    def episode_observations(self, e: int) -> np.ndarray:
        s = self.episode_starts[e] + e
        return self.observations[s:s + self.episode_lengths[e] + 1]

    def episode_returns(self) -> np.ndarray:
        return np.add.reduceat(self.rewards.astype(np.float64), self.episode_starts)

    @property
    def s(self) -> np.ndarray:
        return self.observations[self.obs_index]

    @property
    def s_next(self) -> np.ndarray:
        return self.observations[self.obs_index + 1]


def _paths(path):
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".bin")


def write_dataset(dataset: Dataset, path) -> Path:
    """Write manifest and blob. Returns the manifest path."""
    mpath, bpath = _paths(path)
    fields, offset = [], 0
    for name in FIELD_ORDER:
        arr = getattr(dataset, name)
        fields.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = {
        "format": DATASET_FORMAT,
        "dtype": "<f4",
        "header": dataset.header,
        "episode_count": dataset.num_episodes,
        "episode_lengths": dataset.episode_lengths.tolist(),
        "transition_count": dataset.num_transitions,
        "fields": fields,
        "total_floats": offset,
    }
    try:
        mpath.parent.mkdir(parents=True, exist_ok=True)
        with open(bpath, "wb") as f:
            for name in FIELD_ORDER:
                f.write(getattr(dataset, name).astype("<f4").tobytes())
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write dataset at {mpath}: {exc}") from exc
    return mpath


def read_dataset(path) -> Dataset:
    mpath, bpath = _paths(path)
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}: manifest is not valid JSON ({exc})") from exc
    for key in ("format", "dtype", "episode_lengths", "fields", "total_floats", "episode_count", "transition_count"):
        if key not in manifest:
            raise DatasetFormatError(f"{mpath}: missing field '{key}'")
    if manifest["format"] != DATASET_FORMAT:
        raise DatasetFormatError(f"{mpath}: field 'format' is {manifest['format']!r}")
    if manifest["dtype"] != "<f4":
        raise DatasetFormatError(f"{mpath}: field 'dtype' is {manifest['dtype']!r}")
    lengths = manifest["episode_lengths"]
    if len(lengths) != manifest["episode_count"]:
        raise DatasetFormatError(f"{mpath}: field 'episode_count' disagrees with episode_lengths")
    if sum(lengths) != manifest["transition_count"]:
        raise DatasetFormatError(f"{mpath}: field 'transition_count' disagrees with episode_lengths")
    raw = bpath.read_bytes()
    total = manifest["total_floats"]
    if len(raw) != 4 * total:
        raise DatasetFormatError(f"{bpath}: field 'total_floats' expects {4 * total} bytes, blob has {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4")
    arrays = {}
    for spec in manifest["fields"]:
        size = int(np.prod(spec["shape"]))
        if spec["offset"] + size > total:
            raise DatasetFormatError(f"{mpath}: field '{spec['name']}' overruns the blob")
        arrays[spec["name"]] = flat[spec["offset"]:spec["offset"] + size].reshape(spec["shape"]).astype(np.float32)
    missing = set(FIELD_ORDER) - set(arrays)
    if missing:
        raise DatasetFormatError(f"{mpath}: missing field '{sorted(missing)[0]}'")
    try:
        return Dataset(**arrays, episode_lengths=np.array(lengths), header=manifest.get("header", {}))
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{mpath}: {exc}") from exc


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    z: np.ndarray | None
    z_center: np.ndarray | None
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


def sample_batch(labeled, spec, size: int, rng: np.random.Generator, dataset: Dataset | None = None) -> Batch:
    """Uniform transitions with replacement; ``z`` drawn per ``spec``.

    ``labeled`` may be None for unconditioned training, then ``dataset`` is used.
    """
    if size < 1:
        raise ValueError("batch size must be >= 1")
    ds = dataset if labeled is None else labeled.base
    idx = rng.integers(0, ds.num_transitions, size=size)
    oi = ds.obs_index[idx]
    z = zc = None
    if labeled is not None:
        zc = labeled.labels[idx].astype(np.int64)
        z = zc.copy() if spec.mode == "current" else sample_style_indices(labeled, idx, spec, rng)
    return Batch(
        s=ds.observations[oi],
        a=ds.actions[idx],
        r=ds.rewards[idx],
        s_next=ds.observations[oi + 1],
        done=ds.dones[idx],
        z=z,
        z_center=zc,
        index=idx,
    )

"""Rollouts, style alignment, normalized return, aggregation and hypervolume."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as envmod
from .labeling import StyleCriterion, annotate, label_episode, noise_threshold, pollute


@dataclass
class EpisodeResult:
    alignment: float
    raw_return: float
    normalized_return: float


@dataclass
class RolloutReport:
    criterion: str
    z: int
    seed: int
    episodes: list[EpisodeResult]
    variant: str = ""

    @property
    def alignment(self) -> float:
        return float(np.mean([e.alignment for e in self.episodes]))

    @property
    def normalized_return(self) -> float:
        return float(np.mean([e.normalized_return for e in self.episodes]))

    @property
    def raw_return(self) -> float:
        return float(np.mean([e.raw_return for e in self.episodes]))


@dataclass(frozen=True)
class ParetoPoint:
    style: float
    task: float
    variant: str = ""

    def __post_init__(self):
        if not (0.0 <= self.style <= 100.0 and 0.0 <= self.task <= 100.0):
            raise ValueError("pareto coordinates must lie in [0, 100]")


def alignment(labels, z: int) -> float:
    """Fraction of steps whose label equals ``z``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty label sequence")
    return float(np.mean(labels == z))


def normalized_return(raw: float, bounds) -> float:
    lo, hi = bounds
    if not hi > lo:
        raise ValueError("normalization bounds need hi > lo")
    return float(min(max((raw - lo) / (hi - lo), 0.0), 1.0))


def env_config_from_header(header: dict) -> envmod.EnvConfig:
    tgt = header.get("target", {})
    target = envmod.TaskTarget(tuple(tgt.get("center", (0.0, 0.0))), float(tgt.get("radius", 10.0)))
    return envmod.EnvConfig(target=target, reward_mode=header.get("reward_mode", "distance"),
                            horizon=int(header.get("horizon", envmod.HORIZON)))


def check_promptable(criterion: StyleCriterion, labels) -> None:
    bad = [z for z in labels if z not in criterion.promptable]
    if bad:
        raise ValueError(f"label(s) {bad} are not promptable for {criterion.id}; "
                         f"promptable set is {list(criterion.promptable)}")


def run_policy(act, zs, n_episodes: int, seed: int, config: envmod.EnvConfig):
    """Roll out ``act(obs, z)`` for every ``z`` and episode in lock-step.

    Episode ``j`` uses the same start state for every label.
    """
    zs = np.asarray(zs, dtype=np.int64)
    starts = [envmod.reset(np.random.SeedSequence([seed, j])) for j in range(n_episodes)]
    hist = np.stack([s.history for s in starts])
    hist = np.tile(hist, (len(zs), 1, 1))
    z_all = np.repeat(zs, n_episodes)
    state = envmod.EnvState(history=hist, t=0)
    T = config.horizon
    obs = np.empty((len(z_all), T + 1, envmod.OBS_DIM), dtype=np.float32)
    rew = np.empty((len(z_all), T))
    obs[:, 0] = state.observation()
    for t in range(T):
        a = act(obs[:, t], z_all)
        state, r, _ = envmod.step(state, a, config)
        obs[:, t + 1] = state.observation()
        rew[:, t] = r
    return z_all, obs, rew


def rollout_labels(agent, criterion: StyleCriterion, labels, n_episodes: int, seed: int, bounds,
                   config: envmod.EnvConfig = envmod.EnvConfig(), variant: str = "") -> list[RolloutReport]:
    labels = [int(z) for z in labels]
    check_promptable(criterion, labels)
    z_all, obs, rew = run_policy(agent.act, labels, n_episodes, seed, config)
    reports = []
    for k, z in enumerate(labels):
        eps = []
        for j in range(n_episodes):
            i = k * n_episodes + j
            lab = label_episode(obs[i, :, -3:-1].astype(np.float64), obs[i, :, -1].astype(np.float64), criterion)
            raw = float(rew[i].sum())
            eps.append(EpisodeResult(alignment(lab, z), raw, normalized_return(raw, bounds)))
        reports.append(RolloutReport(criterion.id, z, seed, eps, variant))
    return reports


def rollout(agent, criterion: StyleCriterion, z: int, n_episodes: int = 10, seed: int = 0, bounds=(0.0, 1.0),
            config: envmod.EnvConfig = envmod.EnvConfig()) -> RolloutReport:
    return rollout_labels(agent, criterion, [z], n_episodes, seed, bounds, config)[0]


def evaluate_agent(agent, dataset_header: dict, n_episodes: int = 10, seed: int = 0, labels=None,
                   variant: str | None = None) -> list[RolloutReport]:
    crit = agent.criterion
    if crit is None:
        raise ValueError("agent has no criterion to evaluate against")
    labels = list(crit.promptable) if labels is None else labels
    return rollout_labels(agent, crit, labels, n_episodes, seed, tuple(dataset_header["return_bounds"]),
                          env_config_from_header(dataset_header),
                          agent.config.variant if variant is None else variant)


@dataclass
class AggregateRow:
    variant: str
    criterion: str
    alignment_mean: float
    alignment_std: float
    return_mean: float
    return_std: float
    n_cells: int
    missing: list = field(default_factory=list)


def aggregate(reports: list[RolloutReport], expected: dict[str, list[int]] | None = None) -> list[AggregateRow]:
    """Mean over labels then criteria; std is the across-seed spread averaged over cells.

    ``expected`` maps criterion id to the label set that should be present;
    absent cells are listed in ``missing`` and make the means NaN.
    """
    cells: dict = {}
    for r in reports:
        cells.setdefault((r.variant, r.criterion, r.z), []).append(r)
    rows = []
    variants = sorted({k[0] for k in cells})
    for v in variants:
        crits = sorted({k[1] for k in cells if k[0] == v} | set(expected or {}))
        per_crit = []
        for c in crits:
            zs = sorted({k[2] for k in cells if k[0] == v and k[1] == c})
            want = sorted(expected[c]) if expected and c in expected else zs
            missing = [z for z in want if z not in zs]
            stats = []
            for z in want:
                if z in missing:
                    continue
                al = np.array([r.alignment for r in cells[(v, c, z)]])
                rt = np.array([r.normalized_return for r in cells[(v, c, z)]])
                stats.append((al.mean(), al.std(), rt.mean(), rt.std()))
            if missing or not stats:
                row = AggregateRow(v, c, math.nan, math.nan, math.nan, math.nan, len(stats), missing)
            else:
                s = np.array(stats)
                row = AggregateRow(v, c, *map(float, s.mean(axis=0)), len(stats), [])
            per_crit.append((row, stats))
            rows.append(row)
        all_stats = [st for _, sts in per_crit for st in sts]
        any_missing = any(r.missing for r, _ in per_crit)
        if len(crits) > 1:
            if any_missing:
                rows.append(AggregateRow(v, "all", math.nan, math.nan, math.nan, math.nan, len(all_stats),
                                         [f"{r.criterion}:{z}" for r, _ in per_crit for z in r.missing]))
            else:
                crit_means = np.array([[r.alignment_mean, r.return_mean] for r, _ in per_crit])
                s = np.array(all_stats)
                rows.append(AggregateRow(v, "all", float(crit_means[:, 0].mean()), float(s[:, 1].mean()),
                                         float(crit_means[:, 1].mean()), float(s[:, 3].mean()), len(all_stats), []))
    return rows


def hypervolume(points, ref=(0.0, 0.0)) -> float:
    """Area dominated by ``points`` (maximization) relative to ``ref``."""
    rx, ry = ref
    pts = sorted(((float(p.style), float(p.task)) if isinstance(p, ParetoPoint) else (float(p[0]), float(p[1]))
                  for p in points), reverse=True)
    pts = [(x, y) for x, y in pts if x > rx and y > ry]
    area, best_y = 0.0, ry
    for i, (x, y) in enumerate(pts):
        best_y = max(best_y, y)
        x_next = pts[i + 1][0] if i + 1 < len(pts) else rx
        area += (x - x_next) * (best_y - ry)
    return area


def pareto_point(rows: list[AggregateRow], variant: str, criterion: str = "all") -> ParetoPoint:
    for r in rows:
        if r.variant == variant and r.criterion == criterion:
            return ParetoPoint(100.0 * r.alignment_mean, 100.0 * r.return_mean, variant)
    raise KeyError(f"no aggregate row for {variant}/{criterion}")


def noise_sweep(train_fn, dataset, criterion: StyleCriterion, zetas, seeds, n_episodes: int = 5,
                eval_seed: int = 0, pollution_seed: int = 0) -> list[dict]:
    """For each zeta and seed: pollute, retrain via ``train_fn(labeled, seed)``, evaluate."""
    if any(not 0.0 <= z <= 1.0 for z in zetas):
        raise ValueError("zetas must lie in [0, 1]")
    clean = annotate(dataset, criterion)
    thr = noise_threshold(criterion.num_labels)
    rows = []
    for zeta in zetas:
        labeled = pollute(clean, zeta, pollution_seed)
        for seed in seeds:
            agent = train_fn(labeled, seed)
            reps = evaluate_agent(agent, dataset.header, n_episodes, eval_seed)
            rows.append({
                "zeta": float(zeta),
                "seed": int(seed),
                "alignment": float(np.mean([r.alignment for r in reps])),
                "normalized_return": float(np.mean([r.normalized_return for r in reps])),
                "threshold": thr,
                "beyond_threshold": bool(zeta > thr),
            })
    return rows


# -- CSV ----------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    if isinstance(v, list):
        return ";".join(str(x) for x in v)
    return str(v)


def write_rows(rows: list[dict], path, header_comment: str | None = None) -> Path:
    path = Path(path)
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        if header_comment:
            for line in header_comment.splitlines():
                f.write(f"# {line}\n")
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in keys])
    return path


def report_rows(reports: list[RolloutReport]) -> list[dict]:
    rows = []
    for r in reports:
        for j, e in enumerate(r.episodes):
            rows.append({"variant": r.variant, "criterion": r.criterion, "z": r.z, "seed": r.seed, "episode": j,
                         "alignment": e.alignment, "raw_return": e.raw_return,
                         "normalized_return": e.normalized_return})
    return rows


def aggregate_rows(rows: list[AggregateRow]) -> list[dict]:
    return [{"variant": r.variant, "criterion": r.criterion, "alignment_mean": r.alignment_mean,
             "alignment_std": r.alignment_std, "return_mean": r.return_mean, "return_std": r.return_std,
             "n_cells": r.n_cells, "missing": r.missing} for r in rows]

"""Offline training: IQL value heads, style value heads, chi estimators and
advantage-weighted policy extraction for SCIQL and its baselines.

All networks are numpy MLPs from :mod:`numcore` fed with :func:`featurize`d
observations.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datastore import sample_batch
from .labeling import LabeledDataset, StyleCriterion, StyleSamplingSpec, sample_style_indices, sampling_spec

ALGOS = ("bc", "cbc", "scbc", "bcpmi", "sorl", "sciql")
GAWR_MODES = ("none", "style_first", "task_first")
CHI_STRATEGIES = ("ind", "mine", "sigmoid", "softmax")
CHECKPOINT_FORMAT = "stylerl-checkpoint/1"
T_CLAMP = 20.0
LOG2PI = math.log(2.0 * math.pi)


class InvalidStateError(RuntimeError):
    pass


class TrainingDivergence(RuntimeError):
    """Raised when a loss blows up; ``checkpoint`` holds the last good agent."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class HyperParams:
    gamma: float = 0.99
    kappa: float = 0.7
    beta_r: float = 3.0
    beta_lambda: float = 3.0
    beta_r_given_lambda: float = 3.0
    polyak_upsilon: float = 0.005
    steps_chi: int = 100_000
    steps_value: int = 1_000_000
    steps_policy: int = 1_000_000
    batch: int = 256
    awr_weight_clip: float = 100.0
    adv_norm_ema: float = 0.995
    normalize_advantages: bool = True
    learning_rate: float = 3e-3
    hidden: tuple[int, ...] = (256, 256)
    embed_dim: int = 16
    reward_scale: float = 0.01  # task reward only; chi rewards are used as is
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    action_eps: float = 1e-3
    mine_ema: float = 0.99
    divergence_threshold: float = 1e6
    log_every: int = 1000

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.5 <= self.kappa < 1.0:
            raise ValueError("kappa must lie in [0.5, 1)")
        if min(self.beta_r, self.beta_lambda, self.beta_r_given_lambda) <= 0:
            raise ValueError("betas must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AgentConfig:
    algo: str = "sciql"
    gawr: str = "none"
    chi_strategy: str | None = None
    sampling: str | None = None
    sorl_beta: float = 3.0
    schedule: str = "joint"

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algo {self.algo!r}; expected one of {ALGOS}")
        if self.gawr not in GAWR_MODES:
            raise ValueError(f"unknown gawr mode {self.gawr!r}; expected one of {GAWR_MODES}")
        if self.gawr != "none" and self.algo != "sciql":
            raise ValueError("gawr applies to sciql only")
        if self.chi_strategy is None:
            self.chi_strategy = {"sorl": "softmax", "bcpmi": "mine"}.get(self.algo, "ind")
        if self.chi_strategy not in CHI_STRATEGIES:
            raise ValueError(f"unknown chi strategy {self.chi_strategy!r}")
        if self.algo == "bcpmi" and self.chi_strategy != "mine":
            raise ValueError("bcpmi weights by the MINE critic")
        if self.sampling is None:
            self.sampling = {"cbc": "current", "scbc": "future", "bcpmi": "current"}.get(self.algo, "random")
        self.sampling = sampling_spec(self.sampling).mode
        if self.sorl_beta < 0:
            raise ValueError("sorl_beta must be >= 0")
        if self.schedule not in ("joint", "sequential"):
            raise ValueError("schedule must be 'joint' or 'sequential'")

    @property
    def conditioned(self) -> bool:
        return self.algo != "bc"

    @property
    def needs_task(self) -> bool:
        return self.algo == "sorl" or (self.algo == "sciql" and self.gawr != "none")

    @property
    def needs_style(self) -> bool:
        return self.algo == "sciql"

    @property
    def needs_chi_net(self) -> bool:
        return self.algo == "bcpmi" or (self.algo in ("sciql", "sorl") and self.chi_strategy != "ind")

    @property
    def variant(self) -> str:
        if self.algo == "sciql":
            return {"none": "sciql_lambda", "style_first": "sciql_lambda>r", "task_first": "sciql_r>lambda"}[self.gawr]
        if self.algo == "sorl":
            return f"sorl_beta{self.sorl_beta:g}"
        return self.algo


def featurize(obs) -> np.ndarray:
    """(..., 12) history observation -> (..., 13) network features.

    Current position / 50, current heading as (cos, sin), the three most
    recent displacements / 3 and heading increments / pi. This is an
    invertible re-encoding of the history that makes speed and turning
    directly visible to the networks.
    """
    obs = np.asarray(obs, dtype=np.float32)
    trip = obs.reshape(*obs.shape[:-1], -1, 3)
    xy, th = trip[..., :2], trip[..., 2]
    disp = (xy[..., 1:, :] - xy[..., :-1, :]) / 3.0
    dth = (th[..., 1:] - th[..., :-1] + np.pi) % (2 * np.pi) - np.pi
    f = np.concatenate([
        xy[..., -1, :] / 50.0,
        np.cos(th[..., -1:]),
        np.sin(th[..., -1:]),
        disp.reshape(*disp.shape[:-2], -1),
        dth / np.pi,
    ], axis=-1)
    return f.astype(np.float32)


FEAT_DIM = 13
ACT_DIM = 2


# -- networks -----------------------------------------------------------------


@dataclass
class GaussianPolicy:
    """Tanh-squashed diagonal Gaussian with state-independent log-std."""

    spec: nc.MlpSpec
    params: nc.ParameterSet

    @classmethod
    def create(cls, hp: HyperParams, num_labels: int | None, rng) -> "GaussianPolicy":
        spec = nc.MlpSpec(FEAT_DIM, hp.hidden, ACT_DIM, label_embedding_dim=hp.embed_dim if num_labels else None,
                          num_labels=num_labels)
        net = nc.init_params(spec, rng)
        entries = dict(net.entries)
        entries["log_std"] = np.zeros(ACT_DIM, dtype=np.float32)
        return cls(spec, nc.ParameterSet(entries))

    def _labels(self, z):
        return z if self.spec.conditioned else None

    def mean(self, s_feat, z=None) -> np.ndarray:
        return nc.mlp_forward(self.spec, self.params, s_feat, self._labels(z))

    def act(self, s_feat, z=None) -> np.ndarray:
        """Deterministic evaluation action ``tanh(mean)``."""
        return np.tanh(self.mean(s_feat, z))

    def log_std(self, hp: HyperParams) -> np.ndarray:
        return np.clip(self.params.entries["log_std"], hp.log_std_min, hp.log_std_max)

    def log_prob(self, s_feat, a, z, hp: HyperParams) -> np.ndarray:
        u = np.arctanh(np.clip(a, -1 + hp.action_eps, 1 - hp.action_eps))
        mu = self.mean(s_feat, z)
        ls = self.log_std(hp)
        lp = -0.5 * ((u - mu) / np.exp(ls)) ** 2 - ls - 0.5 * LOG2PI
        return (lp - np.log(1.0 - np.tanh(u) ** 2 + 1e-6)).sum(axis=1)


@dataclass
class ValueHeads:
    """V(s[, z]) with layer norm, Q(s, a[, z]) and its Polyak target."""

    v_spec: nc.MlpSpec
    q_spec: nc.MlpSpec
    v: nc.ParameterSet
    q: nc.ParameterSet
    q_target: nc.ParameterSet

    @classmethod
    def create(cls, hp: HyperParams, num_labels: int | None, rng) -> "ValueHeads":
        emb = hp.embed_dim if num_labels else None
        v_spec = nc.MlpSpec(FEAT_DIM, hp.hidden, 1, use_layer_norm=True, label_embedding_dim=emb, num_labels=num_labels)
        q_spec = nc.MlpSpec(FEAT_DIM + ACT_DIM, hp.hidden, 1, label_embedding_dim=emb, num_labels=num_labels)
        v = nc.init_params(v_spec, rng)
        q = nc.init_params(q_spec, rng)
        return cls(v_spec, q_spec, v, q, q.copy())

    def value(self, s_feat, z=None) -> np.ndarray:
        return nc.mlp_forward(self.v_spec, self.v, s_feat, z)[:, 0]

    def q_value(self, s_feat, a, z=None, target=True) -> np.ndarray:
        p = self.q_target if target else self.q
        return nc.mlp_forward(self.q_spec, p, np.concatenate([s_feat, a], axis=1), z)[:, 0]

    def advantage(self, s_feat, a, z=None) -> np.ndarray:
        return self.q_value(s_feat, a, z) - self.value(s_feat, z)


@dataclass
class ChiEstimator:
    """chi(s, a, z): indicator, MINE critic, or a sigmoid/softmax classifier.

    Learned strategies use one MLP over ``(s, a)`` with one output per label.
    """

    strategy: str
    num_labels: int
    p_r: np.ndarray
    spec: nc.MlpSpec | None = None
    params: nc.ParameterSet | None = None
    ema_denominator: float | None = None
    trained_steps: int = 0

    @classmethod
    def create(cls, strategy: str, labeled: LabeledDataset, hp: HyperParams, rng) -> "ChiEstimator":
        if strategy not in CHI_STRATEGIES:
            raise ValueError(f"unknown chi strategy {strategy!r}")
        hist = labeled.global_histogram.astype(np.float64)
        p_r = hist / hist.sum()
        n = labeled.criterion.num_labels
        if strategy == "ind":
            return cls(strategy, n, p_r)
        spec = nc.MlpSpec(FEAT_DIM + ACT_DIM, hp.hidden, n)
        return cls(strategy, n, p_r, spec, nc.init_params(spec, rng))

    @property
    def learned(self) -> bool:
        return self.strategy != "ind"

    def logits(self, s_feat, a):
        return nc.mlp_forward_cached(self.spec, self.params, np.concatenate([s_feat, a], axis=1))

    def critic_table(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``T(s, a, z)`` for every label and ``dT/dout`` (same shape, diagonal part).

        For softmax the Jacobian is not diagonal; callers handle it separately.
        """
        log_pr = np.log(np.maximum(self.p_r, 1e-12)).astype(np.float32)
        if self.strategy == "mine":
            raw = out
        elif self.strategy == "sigmoid":
            raw = -np.logaddexp(0.0, -out) - log_pr
        else:
            raw = out - np.logaddexp.reduce(out, axis=1, keepdims=True) - log_pr
        return np.clip(raw, -T_CLAMP, T_CLAMP), (np.abs(raw) < T_CLAMP)

    def table(self, s_feat, a) -> np.ndarray:
        """chi for every label, shape (B, |labels|)."""
        if not self.learned:
            raise InvalidStateError("the indicator strategy needs z_center; use chi_evaluate")
        out, _ = self.logits(s_feat, a)
        if self.strategy == "mine":
            return self.p_r[None, :].astype(np.float32) * np.exp(np.clip(out, -T_CLAMP, T_CLAMP))
        if self.strategy == "sigmoid":
            return 1.0 / (1.0 + np.exp(-out))
        e = np.exp(out - out.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def critic(self, s_feat, a, z) -> np.ndarray:
        out, _ = self.logits(s_feat, a)
        t, _ = self.critic_table(out)
        return t[np.arange(len(z)), z]


def chi_evaluate(chi: ChiEstimator, s_feat, a, z, z_center) -> np.ndarray:
    z = np.asarray(z)
    if chi.strategy == "ind":
        return (z == np.asarray(z_center)).astype(np.float32)
    return chi.table(s_feat, a)[np.arange(len(z)), z].astype(np.float32)


def gated_advantage(a_style, a_task):
    """``a_style + sigmoid(a_style) * a_task``; swap the arguments for the task-first gate."""
    a_style = np.asarray(a_style, dtype=np.float64)
    gate = 0.5 * (1.0 + np.tanh(0.5 * a_style))
    return a_style + gate * np.asarray(a_task, dtype=np.float64)


@dataclass
class EmaNormalizer:
    """Running scale of an advantage stream; dividing by it keeps signs and order."""

    coef: float = 0.995
    mean: float = 0.0
    sq: float = 0.0
    count: int = 0

    def update(self, x: np.ndarray) -> None:
        m, s = float(np.mean(x)), float(np.mean(np.square(x, dtype=np.float64)))
        if self.count == 0:
            self.mean, self.sq = m, s
        else:
            self.mean = self.coef * self.mean + (1 - self.coef) * m
            self.sq = self.coef * self.sq + (1 - self.coef) * s
        self.count += 1

    @property
    def std(self) -> float:
        return math.sqrt(max(self.sq - self.mean * self.mean, 0.0))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return x / (self.std + 1e-6)


# -- single gradient steps ------------------------------------------------------


def _opt(hp: HyperParams, policy_total: int | None = None) -> nc.OptimizerConfig:
    if policy_total is None:
        return nc.OptimizerConfig(learning_rate=hp.learning_rate)
    return nc.OptimizerConfig(learning_rate=hp.learning_rate, cosine_decay=True, total_steps=policy_total)


def iql_value_step(heads: ValueHeads, s, a, r, s_next, hp: HyperParams, z=None) -> dict:
    """One expectile step on V, one TD step on Q, then Polyak on the target.

    Returns losses and the advantage ``Q_target(s, a) - V(s)`` computed before
    the updates.
    """
    n = len(s)
    sa = np.concatenate([s, a], axis=1)
    q_bar = nc.mlp_forward(heads.q_spec, heads.q_target, sa, z)[:, 0]
    v_out, v_cache = nc.mlp_forward_cached(heads.v_spec, heads.v, s, z)
    u = q_bar - v_out[:, 0]
    v_loss = float(np.mean(nc.expectile_loss(u, hp.kappa)))
    g = (-nc.expectile_grad(u, hp.kappa) / n)[:, None].astype(v_out.dtype)
    nc.adam_step(heads.v, nc.backward(heads.v_spec, heads.v, s, g, z, v_cache), _opt(hp))

    v_next = nc.mlp_forward(heads.v_spec, heads.v, s_next, z)[:, 0]
    target = r + hp.gamma * v_next
    q_out, q_cache = nc.mlp_forward_cached(heads.q_spec, heads.q, sa, z)
    diff = q_out[:, 0] - target
    q_loss = float(np.mean(np.square(diff, dtype=np.float64)))
    g = (2.0 * diff / n)[:, None].astype(q_out.dtype)
    nc.adam_step(heads.q, nc.backward(heads.q_spec, heads.q, sa, g, z, q_cache), _opt(hp))
    nc.polyak_update(heads.q_target, heads.q, hp.polyak_upsilon)
    return {"v_loss": v_loss, "q_loss": q_loss, "advantage": u}


def style_value_step(heads: ValueHeads, s, a, s_next, z, z_center, chi: ChiEstimator, hp: HyperParams) -> dict:
    """IQL step on the style heads with reward ``chi(s, a, z)``."""
    reward = chi_evaluate(chi, s, a, z, z_center)
    out = iql_value_step(heads, s, a, reward, s_next, hp, z=z)
    out["reward"] = reward
    return out


def mine_step(chi: ChiEstimator, s, a, z_joint, z_marginal, hp: HyperParams) -> float:
    """One ascent step on ``E_joint[T] - log E_marg[exp T]``; returns the bound.

    The log-partition gradient uses an EMA of the marginal denominator.
    """
    if not chi.learned:
        raise InvalidStateError("the indicator strategy has nothing to train")
    n = len(s)
    x = np.concatenate([s, a], axis=1)
    out, cache = nc.mlp_forward_cached(chi.spec, chi.params, x)
    t_all, live = chi.critic_table(out)
    rows = np.arange(n)
    t_j = t_all[rows, z_joint].astype(np.float64)
    t_m = t_all[rows, z_marginal].astype(np.float64)
    exp_m = np.exp(t_m)
    mean_exp = float(exp_m.mean())
    if chi.ema_denominator is None:
        chi.ema_denominator = mean_exp
    else:
        chi.ema_denominator = hp.mine_ema * chi.ema_denominator + (1 - hp.mine_ema) * mean_exp
    bound = float(t_j.mean() - math.log(mean_exp))
    # d(-J)/dT for the selected entries
    g_t = np.zeros_like(t_all, dtype=np.float64)
    np.add.at(g_t, (rows, z_joint), -1.0 / n)
    np.add.at(g_t, (rows, z_marginal), exp_m / (n * chi.ema_denominator))
    g_t *= live
    if chi.strategy == "mine":
        g_out = g_t
    elif chi.strategy == "sigmoid":
        g_out = g_t * (1.0 / (1.0 + np.exp(out)))
    else:
        e = np.exp(out - out.max(axis=1, keepdims=True))
        sm = e / e.sum(axis=1, keepdims=True)
        g_out = g_t - sm * g_t.sum(axis=1, keepdims=True)
    nc.adam_step(chi.params, nc.backward(chi.spec, chi.params, x, g_out.astype(out.dtype), cache=cache), _opt(hp))
    chi.trained_steps += 1
    return bound


def awr_weights(scores, hp: HyperParams) -> np.ndarray:
    return np.minimum(np.exp(np.minimum(scores, 50.0)), hp.awr_weight_clip).astype(np.float32)


def policy_step(policy: GaussianPolicy, s, a, z, weights, hp: HyperParams, total_steps: int,
                normalizer: int | None = None) -> float:
    """Minimize ``-sum(weights * log pi(a | s, z)) / normalizer`` with one Adam step."""
    n = normalizer or len(s)
    labels = policy._labels(z)
    mu, cache = nc.mlp_forward_cached(policy.spec, policy.params, s, labels)
    u = np.arctanh(np.clip(a, -1 + hp.action_eps, 1 - hp.action_eps))
    raw_ls = policy.params.entries["log_std"]
    ls = np.clip(raw_ls, hp.log_std_min, hp.log_std_max)
    inv_var = np.exp(-2.0 * ls)
    diff = u - mu
    lp = (-0.5 * diff * diff * inv_var - ls - 0.5 * LOG2PI).sum(axis=1) - np.log(1.0 - np.tanh(u) ** 2 + 1e-6).sum(axis=1)
    w = np.asarray(weights, dtype=np.float32)
    loss = -float(np.dot(w.astype(np.float64), lp.astype(np.float64))) / n
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite policy log-density")
    g_mu = (-(w[:, None] * diff * inv_var) / n).astype(mu.dtype)
    grads = nc.backward(policy.spec, policy.params, s, g_mu, labels, cache)
    g_ls = -(w[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) / n
    inside = (raw_ls > hp.log_std_min) & (raw_ls < hp.log_std_max)
    grads["log_std"] = (g_ls * inside).astype(raw_ls.dtype)
    nc.adam_step(policy.params, grads, _opt(hp, total_steps))
    return loss


# -- agent --------------------------------------------------------------------


@dataclass
class Agent:
    config: AgentConfig
    hp: HyperParams
    criterion: StyleCriterion | None
    policy: GaussianPolicy
    task: ValueHeads | None = None
    style: ValueHeads | None = None
    chi: ChiEstimator | None = None
    norm_task: EmaNormalizer = field(default_factory=EmaNormalizer)
    norm_style: EmaNormalizer = field(default_factory=EmaNormalizer)
    steps: dict = field(default_factory=lambda: {"value": 0, "chi": 0, "policy": 0})
    meta: dict = field(default_factory=dict)

    def act(self, obs, z=None) -> np.ndarray:
        s = featurize(obs)
        if self.config.conditioned:
            if z is None:
                raise ValueError("conditioned policy needs z")
            z = np.broadcast_to(np.asarray(z, dtype=np.int64), (len(s),))
        return self.policy.act(s, z if self.config.conditioned else None)


def build_training_score(agent: Agent, s, a, z, z_center, adv_task=None, adv_style=None) -> np.ndarray:
    """Per-sample exponent of the AWR weight (SORL handled in :func:`_sorl_weights`)."""
    cfg, hp = agent.config, agent.hp
    n = len(s)
    if cfg.algo in ("bc", "cbc", "scbc"):
        return np.zeros(n)
    if cfg.algo == "bcpmi":
        if agent.chi is None or not agent.chi.trained_steps:
            raise InvalidStateError("bcpmi needs a trained MINE critic")
        return agent.chi.critic(s, a, z_center).astype(np.float64)
    if cfg.algo == "sorl":
        raise InvalidStateError("sorl weights depend on every label; use _sorl_weights")
    if adv_style is None:
        if agent.style is None:
            raise InvalidStateError("style heads are missing")
        adv_style = agent.style.advantage(s, a, z)
    if cfg.gawr == "none":
        # plain style AWR uses the raw advantage; normalization only feeds the gate
        return hp.beta_lambda * np.asarray(adv_style, dtype=np.float64)
    a_l = agent.norm_style.normalize(adv_style) if hp.normalize_advantages else adv_style
    if adv_task is None:
        if agent.task is None:
            raise InvalidStateError("task heads are missing")
        adv_task = agent.task.advantage(s, a)
    a_r = agent.norm_task.normalize(adv_task) if hp.normalize_advantages else adv_task
    if cfg.gawr == "style_first":
        return hp.beta_r_given_lambda * gated_advantage(a_l, a_r)
    return hp.beta_r_given_lambda * gated_advantage(a_r, a_l)


def _sorl_weights(agent: Agent, s, a, z_center, adv_task, chi_rows=None) -> np.ndarray:
    """(B, |labels|) weights ``chi(s, a, z) * exp(beta * A_r) / |labels|``."""
    hp = agent.hp
    n_lab = agent.criterion.num_labels
    if chi_rows is not None:
        chi = chi_rows
    elif agent.chi.strategy == "ind":
        chi = np.zeros((len(s), n_lab), dtype=np.float32)
        chi[np.arange(len(s)), z_center] = 1.0
    else:
        chi = agent.chi.table(s, a)
    a_r = agent.norm_task.normalize(adv_task) if hp.normalize_advantages else adv_task
    w = awr_weights(agent.config.sorl_beta * np.asarray(a_r, dtype=np.float64), hp)
    return chi * w[:, None] / n_lab


def create_agent(config: AgentConfig, hp: HyperParams, labeled: LabeledDataset | None, rng) -> Agent:
    n_lab = labeled.criterion.num_labels if (labeled is not None and config.conditioned) else None
    if config.conditioned and labeled is None:
        raise ValueError(f"{config.algo} needs an annotated dataset")
    policy = GaussianPolicy.create(hp, n_lab, rng)
    task = ValueHeads.create(hp, None, rng) if config.needs_task else None
    style = ValueHeads.create(hp, n_lab, rng) if config.needs_style else None
    chi = None
    if config.needs_style or config.needs_chi_net or config.algo == "sorl":
        chi = ChiEstimator.create(config.chi_strategy, labeled, hp, rng)
    return Agent(config, hp, labeled.criterion if labeled is not None else None, policy, task, style, chi,
                 EmaNormalizer(hp.adv_norm_ema), EmaNormalizer(hp.adv_norm_ema))


def _check_losses(losses: dict, hp: HyperParams, step: int, last_good):
    for k, v in losses.items():
        if not math.isfinite(v) or abs(v) > hp.divergence_threshold:
            raise TrainingDivergence(f"{k}={v!r} at step {step}", checkpoint=last_good)


def train_agent(config: AgentConfig, labeled: LabeledDataset | None, hp: HyperParams, seed: int,
                dataset=None, log_path=None, reuse: Agent | None = None, progress=None) -> Agent:
    """Run value, chi and policy phases; joint interleaving or one after the other.

    ``reuse`` supplies already-trained value heads and chi, which are then kept
    frozen and only the policy is trained.
    """
    ss = np.random.SeedSequence(seed)
    init_ss, sample_ss = ss.spawn(2)
    agent = create_agent(config, hp, labeled, np.random.default_rng(init_ss))
    rng = np.random.default_rng(sample_ss)
    ds = labeled.base if labeled is not None else dataset
    if ds is None:
        raise ValueError("need a dataset")
    feats = featurize(ds.observations)
    rewards = ds.rewards.astype(np.float32) * np.float32(hp.reward_scale)
    spec = StyleSamplingSpec(config.sampling)
    p_r_spec = StyleSamplingSpec("random")

    frozen = reuse is not None
    if frozen:
        for name in ("task", "style", "chi"):
            mine_part, theirs = getattr(agent, name), getattr(reuse, name)
            if mine_part is None:
                continue
            if theirs is None:
                raise InvalidStateError(f"reused agent lacks {name} heads")
            if name == "chi" and theirs.strategy != mine_part.strategy:
                raise InvalidStateError("reused chi strategy differs")
            setattr(agent, name, copy.deepcopy(theirs))
        agent.steps["value"] = reuse.steps["value"]
        agent.steps["chi"] = reuse.steps["chi"]

    has_values = agent.task is not None or agent.style is not None
    chi_net = agent.chi is not None and agent.chi.learned
    v_steps = 0 if (frozen or not has_values) else hp.steps_value
    c_steps = 0 if (frozen or not chi_net) else hp.steps_chi
    p_steps = hp.steps_policy
    if config.schedule == "joint":
        plan = [(max(v_steps, c_steps, p_steps), v_steps, c_steps, p_steps)]
    else:
        plan = [(c_steps, 0, c_steps, 0), (v_steps, v_steps, 0, 0), (p_steps, 0, 0, p_steps)]

    log_rows = []
    last_good = copy.deepcopy(agent)
    global_step = 0
    tables = None
    for length, nv, ncs, npol in plan:
        if npol and not nv and not ncs and config.algo not in ("bc", "cbc", "scbc"):
            # values are frozen from here on: look advantages up instead of recomputing
            tables = advantage_tables(agent, feats, ds)
        for i in range(length):
            do_v, do_c, do_p = i < nv, i < ncs, i < npol
            batch = sample_batch(labeled, spec, hp.batch, rng, dataset=ds)
            oi = ds.obs_index[batch.index]
            s, a = feats[oi], batch.a
            losses: dict = {}
            adv_task = adv_style = None
            try:
                if do_c:
                    z_m = sample_style_indices(labeled, batch.index, p_r_spec, rng)
                    losses["mine_bound"] = mine_step(agent.chi, s, a, batch.z_center, z_m, hp)
                    agent.steps["chi"] += 1
                if do_v:
                    s2, r = feats[oi + 1], rewards[batch.index]
                    if agent.task is not None:
                        out = iql_value_step(agent.task, s, a, r, s2, hp)
                        losses["task_v_loss"], losses["task_q_loss"] = out["v_loss"], out["q_loss"]
                        adv_task = out["advantage"]
                    if agent.style is not None:
                        out = style_value_step(agent.style, s, a, s2, batch.z, batch.z_center, agent.chi, hp)
                        losses["style_v_loss"], losses["style_q_loss"] = out["v_loss"], out["q_loss"]
                        adv_style = out["advantage"]
                    agent.steps["value"] += 1
                if do_p:
                    if tables is not None:
                        adv_task, adv_style = _lookup(tables, batch)
                    losses["policy_loss"] = _policy_update(agent, s, a, batch, adv_task, adv_style, p_steps, tables)
                    agent.steps["policy"] += 1
            except FloatingPointError as exc:
                raise TrainingDivergence(f"{exc} at step {global_step}", checkpoint=last_good) from exc
            _check_losses(losses, hp, global_step, last_good)
            global_step += 1
            if global_step % hp.log_every == 0 or i == length - 1:
                row = {"step": global_step, **{k: float(v) for k, v in losses.items()}}
                if agent.task is not None:
                    row["task_adv_std"] = agent.norm_task.std
                if agent.style is not None:
                    row["style_adv_std"] = agent.norm_style.std
                log_rows.append(row)
                last_good = copy.deepcopy(agent)
                if progress is not None:
                    progress(row)
    if log_path is not None:
        write_log(log_rows, log_path)
    agent.meta["log"] = log_rows
    return agent


def advantage_tables(agent: Agent, feats: np.ndarray, ds, chunk: int = 8192) -> dict:
    """Per-transition advantages (and chi / critic rows) of frozen heads."""
    out: dict = {}
    n = ds.num_transitions
    n_lab = agent.criterion.num_labels if agent.criterion is not None else 0
    if agent.task is not None:
        out["task"] = np.empty(n, dtype=np.float32)
    if agent.style is not None:
        out["style"] = np.empty((n, n_lab), dtype=np.float32)
    if agent.chi is not None and agent.chi.learned:
        out["chi"] = np.empty((n, n_lab), dtype=np.float32)
    for lo in range(0, n, chunk):
        idx = np.arange(lo, min(lo + chunk, n))
        oi = ds.obs_index[idx]
        s, a = feats[oi], ds.actions[idx]
        if "task" in out:
            out["task"][idx] = agent.task.advantage(s, a)
        if "style" in out:
            for z in range(n_lab):
                out["style"][idx, z] = agent.style.advantage(s, a, np.full(len(idx), z))
        if "chi" in out:
            if agent.config.algo == "bcpmi":
                o, _ = agent.chi.logits(s, a)
                out["chi"][idx] = agent.chi.critic_table(o)[0]
            else:
                out["chi"][idx] = agent.chi.table(s, a)
    return out


def _lookup(tables: dict, batch):
    adv_task = tables["task"][batch.index] if "task" in tables else None
    adv_style = tables["style"][batch.index, batch.z] if "style" in tables else None
    return adv_task, adv_style


def _policy_update(agent: Agent, s, a, batch, adv_task, adv_style, total: int, tables=None) -> float:
    cfg, hp = agent.config, agent.hp
    if agent.task is not None:
        if adv_task is None:
            adv_task = agent.task.advantage(s, a)
        agent.norm_task.update(adv_task)
    if agent.style is not None:
        if adv_style is None:
            adv_style = agent.style.advantage(s, a, batch.z)
        agent.norm_style.update(adv_style)
    chi_rows = tables["chi"][batch.index] if tables is not None and "chi" in tables else None
    if cfg.algo == "sorl":
        w = _sorl_weights(agent, s, a, batch.z_center, adv_task, chi_rows)
        n_lab = w.shape[1]
        s_rep = np.repeat(s, n_lab, axis=0)
        a_rep = np.repeat(a, n_lab, axis=0)
        z_rep = np.tile(np.arange(n_lab), len(s))
        return policy_step(agent.policy, s_rep, a_rep, z_rep, w.reshape(-1), hp, total, normalizer=len(s))
    if cfg.algo == "bcpmi":
        z = batch.z_center
        if chi_rows is not None:
            score = chi_rows[np.arange(len(z)), z].astype(np.float64)
        else:
            score = build_training_score(agent, s, a, z, batch.z_center)
    else:
        z = batch.z
        score = build_training_score(agent, s, a, z, batch.z_center, adv_task, adv_style)
    return policy_step(agent.policy, s, a, z, awr_weights(score, hp), hp, total)


# -- persistence ----------------------------------------------------------------


def write_log(rows: list[dict], path) -> None:
    keys = ["step"] + sorted({k for r in rows for k in r} - {"step"})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow([r["step"]] + [("" if k not in r else f"{r[k]:.9g}") for k in keys[1:]])


def _networks(agent: Agent) -> dict:
    nets = {"policy": (agent.policy.spec, agent.policy.params)}
    for name in ("task", "style"):
        h = getattr(agent, name)
        if h is not None:
            nets[f"{name}_v"] = (h.v_spec, h.v)
            nets[f"{name}_q"] = (h.q_spec, h.q)
            nets[f"{name}_q_target"] = (h.q_spec, h.q_target)
    if agent.chi is not None and agent.chi.learned:
        nets["chi"] = (agent.chi.spec, agent.chi.params)
    return nets


def save_checkpoint(agent: Agent, directory, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nets = _networks(agent)
    record = {
        "format": CHECKPOINT_FORMAT,
        "agent": asdict(agent.config),
        "hyperparameters": agent.hp.to_dict(),
        "criterion": agent.criterion.to_dict() if agent.criterion else None,
        "steps": agent.steps,
        "normalizers": {"task": asdict(agent.norm_task), "style": asdict(agent.norm_style)},
        "chi": None if agent.chi is None else {
            "strategy": agent.chi.strategy,
            "num_labels": agent.chi.num_labels,
            "p_r": agent.chi.p_r.tolist(),
            "ema_denominator": agent.chi.ema_denominator,
            "trained_steps": agent.chi.trained_steps,
        },
        "networks": {k: spec.to_dict() for k, (spec, _) in nets.items()},
        "extra": extra or {},
    }
    (d / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    for name, (_, params) in nets.items():
        nc.save_parameters(params, d / name)
    return d


def load_checkpoint(directory) -> Agent:
    d = Path(directory)
    try:
        record = json.loads((d / "config.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{d}: unreadable checkpoint ({exc})") from exc
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{d}: not a checkpoint (format={record.get('format')!r})")
    cfg = AgentConfig(**record["agent"])
    hp = HyperParams.from_dict(record["hyperparameters"])
    crit = StyleCriterion.from_dict(record["criterion"]) if record["criterion"] else None
    specs = {k: nc.MlpSpec.from_dict(v) for k, v in record["networks"].items()}
    loaded = {k: nc.load_parameters(d / k)[0] for k in specs}
    policy = GaussianPolicy(specs["policy"], loaded["policy"])
    heads = {}
    for name in ("task", "style"):
        if f"{name}_v" in specs:
            heads[name] = ValueHeads(specs[f"{name}_v"], specs[f"{name}_q"], loaded[f"{name}_v"],
                                     loaded[f"{name}_q"], loaded[f"{name}_q_target"])
    chi = None
    if record["chi"] is not None:
        c = record["chi"]
        chi = ChiEstimator(c["strategy"], c["num_labels"], np.asarray(c["p_r"]), specs.get("chi"), loaded.get("chi"),
                           c["ema_denominator"], c["trained_steps"])
    agent = Agent(cfg, hp, crit, policy, heads.get("task"), heads.get("style"), chi,
                  EmaNormalizer(**record["normalizers"]["task"]), EmaNormalizer(**record["normalizers"]["style"]),
                  dict(record["steps"]), {"extra": record.get("extra", {})})
    return agent

"""Command line entry point: ``stylerl <command> [options]``.

Commands: generate, annotate, histogram, train, eval, sweep. Every command
writes into a fresh run directory (``--out`` or a numbered directory under
``$STYLERL_OUTPUT_ROOT``) and echoes its fully materialized config there as
``run_config.json``.

Exit codes: 0 success, 1 usage, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import functools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from . import eval as ev
from .agents import AgentConfig, HyperParams, TrainingDivergence, load_checkpoint, save_checkpoint, train_agent
from .datastore import DatasetFormatError, read_dataset
from .env import ENV_IDS, EnvConfig, generate_dataset
from .labeling import CRITERIA, LabelFormatError, annotate, make_criterion, pollute, read_labels, write_labels

OUTPUT_ROOT_ENV = "STYLERL_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

# training scale presets; "full" is the HyperParams default
PRESETS = {
    "smoke": {"steps_chi": 1000, "steps_value": 1000, "steps_policy": 1000, "hidden": [64, 64], "log_every": 250},
    "desk": {"steps_chi": 20000, "steps_value": 20000, "steps_policy": 20000, "hidden": [64, 64],
             "log_every": 2000},
    "full": {},
}

SWEEP_KINDS = ("chi_strategy", "relabel_dist", "noise", "pareto")
PARETO_VARIANTS = (
    {"algo": "sorl", "sorl_beta": 0.0},
    {"algo": "sorl", "sorl_beta": 1.0},
    {"algo": "sorl", "sorl_beta": 3.0},
    {"algo": "sciql", "gawr": "none"},
    {"algo": "sciql", "gawr": "style_first"},
    {"algo": "sciql", "gawr": "task_first"},
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config handling ------------------------------------------------------------

DEFAULTS = {
    "generate": {"variant": "inplace", "episodes": 1000, "seed": 0, "reward_mode": "distance"},
    "annotate": {"dataset": None, "criterion": None, "zeta": 0.0, "seed": 0},
    "histogram": {"dataset": None, "criterion": None},
    "train": {"dataset": None, "labels": None, "criterion": None, "zeta": 0.0, "pollution_seed": 0,
              "algo": "sciql", "gawr": "none", "chi_strategy": None, "sampling": None, "sorl_beta": 3.0,
              "schedule": "joint", "preset": "desk", "seed": 0, "hyperparameters": {}},
    "eval": {"checkpoint": None, "dataset": None, "labels": None, "episodes": 10, "seeds": [0]},
    "sweep": {"kind": None, "dataset": None, "criteria": ["speed_category"], "seeds": [0, 1, 2],
              "preset": "desk", "hyperparameters": {}, "episodes": 5, "eval_seed": 100, "workers": 1,
              "algo": "sciql", "zetas": [0.0, 0.2, 0.4, 0.6, 0.8, 0.9], "pollution_seed": 0},
}


def materialize(command: str, file_config: dict | None, overrides: dict) -> dict:
    """Defaults, then the config file, then explicit flags. Unknown keys are rejected."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    for source in (file_config or {}, overrides):
        unknown = set(source) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        for k, v in source.items():
            if v is None:
                continue
            if k == "hyperparameters":
                cfg[k] = {**cfg[k], **v}
            else:
                cfg[k] = v
    if "preset" in cfg and cfg["preset"] not in PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}; expected one of {sorted(PRESETS)}")
    return cfg


def hyperparams(preset: str, overrides: dict) -> HyperParams:
    try:
        return HyperParams.from_dict({**PRESETS[preset], **overrides})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _parse_kv(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"expected key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def fresh_run_dir(out, command: str) -> Path:
    if out is not None:
        d = Path(out)
        if d.exists() and any(d.iterdir()):
            raise UsageError(f"output directory {d} is not empty")
        d.mkdir(parents=True, exist_ok=True)
        return d
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    root.mkdir(parents=True, exist_ok=True)
    n = 1
    while True:
        d = root / f"{command}-{n:04d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            n += 1


def _echo(run_dir: Path, command: str, cfg: dict) -> None:
    record = {"command": command, "version": __version__, "config": cfg}
    (run_dir / "run_config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# -- data access ------------------------------------------------------------------


def _criterion(name):
    if name is None:
        raise UsageError("a criterion is required")
    try:
        return make_criterion(name)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"unknown criterion {name!r}; expected one of {list(CRITERIA)}") from exc


def _dataset(path):
    if path is None:
        raise UsageError("a dataset path is required")
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {exc.filename}") from exc
    except DatasetFormatError as exc:
        raise DataError(str(exc)) from exc


def _labeled(cfg: dict, dataset):
    if cfg.get("labels"):
        try:
            labeled = read_labels(cfg["labels"], dataset)
        except FileNotFoundError as exc:
            raise DataError(f"label sidecar not found: {exc.filename}") from exc
        except LabelFormatError as exc:
            raise DataError(str(exc)) from exc
    elif cfg.get("criterion"):
        labeled = annotate(dataset, _criterion(cfg["criterion"]))
    else:
        return None
    if cfg.get("zeta"):
        labeled = pollute(labeled, cfg["zeta"], cfg.get("pollution_seed", 0))
    return labeled


# -- one train + evaluate job -----------------------------------------------------


@functools.lru_cache(maxsize=4)
def _cached_dataset(path: str):
    return _dataset(path)


def run_job(job: dict) -> list[ev.RolloutReport]:
    """Train one agent and evaluate it on every promptable label.

    ``job`` keys: dataset, criterion, agent (AgentConfig kwargs), preset,
    hyperparameters, seed, episodes, eval_seed, and optionally zeta,
    pollution_seed, variant.
    """
    ds = _cached_dataset(str(job["dataset"]))
    labeled = annotate(ds, _criterion(job["criterion"]))
    if job.get("zeta"):
        labeled = pollute(labeled, job["zeta"], job.get("pollution_seed", 0))
    cfg = AgentConfig(**job["agent"])
    hp = hyperparams(job.get("preset", "desk"), job.get("hyperparameters", {}))
    agent = train_agent(cfg, labeled, hp, job["seed"])
    return ev.evaluate_agent(agent, ds.header, job["episodes"], job["eval_seed"] + job["seed"],
                             variant=job.get("variant"))


def run_jobs(jobs: list[dict], workers: int = 1) -> list[ev.RolloutReport]:
    if workers <= 1:
        return [r for job in jobs for r in run_job(job)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [r for reps in pool.map(run_job, jobs) for r in reps]


# -- commands -----------------------------------------------------------------------


def cmd_generate(cfg: dict, run_dir: Path) -> int:
    if cfg["variant"] not in ENV_IDS:
        raise UsageError(f"unknown variant {cfg['variant']!r}; expected one of {sorted(ENV_IDS)}")
    if int(cfg["episodes"]) < 1:
        raise UsageError("episodes must be >= 1")
    if cfg["reward_mode"] not in ("distance", "literal"):
        raise UsageError("reward_mode must be 'distance' or 'literal'")
    ds = generate_dataset(cfg["variant"], int(cfg["episodes"]), int(cfg["seed"]), run_dir / "dataset.json",
                          EnvConfig(reward_mode=cfg["reward_mode"]))
    print(f"wrote {run_dir / 'dataset.json'} ({ds.num_episodes} episodes, {ds.num_transitions} transitions)")
    return EXIT_OK


def _histogram_lines(labeled) -> list[str]:
    hist = labeled.global_histogram
    total = max(int(hist.sum()), 1)
    return [f"{labeled.criterion.id} label {z}: {int(c)} ({c / total:.3f})" for z, c in enumerate(hist)]


def cmd_annotate(cfg: dict, run_dir: Path) -> int:
    ds = _dataset(cfg["dataset"])
    labeled = annotate(ds, _criterion(cfg["criterion"]))
    if not 0.0 <= float(cfg["zeta"]) <= 1.0:
        raise UsageError("zeta must lie in [0, 1]")
    if cfg["zeta"]:
        labeled = pollute(labeled, float(cfg["zeta"]), int(cfg["seed"]))
    write_labels(labeled, run_dir / "labels.json")
    print("\n".join(_histogram_lines(labeled)))
    print(f"wrote {run_dir / 'labels.json'}")
    return EXIT_OK


def cmd_histogram(cfg: dict, run_dir: Path) -> int:
    ds = _dataset(cfg["dataset"])
    names = [cfg["criterion"]] if cfg["criterion"] else list(CRITERIA)
    rows = []
    for name in names:
        labeled = annotate(ds, _criterion(name))
        print("\n".join(_histogram_lines(labeled)))
        hist = labeled.global_histogram
        rows += [{"criterion": name, "label": z, "count": int(c), "fraction": float(c / hist.sum())}
                 for z, c in enumerate(hist)]
    ev.write_rows(rows, run_dir / "histogram.csv")
    return EXIT_OK


def cmd_train(cfg: dict, run_dir: Path) -> int:
    ds = _dataset(cfg["dataset"])
    try:
        agent_cfg = AgentConfig(cfg["algo"], cfg["gawr"], cfg["chi_strategy"], cfg["sampling"],
                                float(cfg["sorl_beta"]), cfg["schedule"])
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    labeled = _labeled(cfg, ds)
    if agent_cfg.conditioned and labeled is None:
        raise UsageError(f"{agent_cfg.algo} needs --labels or --criterion")
    hp = hyperparams(cfg["preset"], cfg["hyperparameters"])
    cfg["algo"], cfg["chi_strategy"], cfg["sampling"] = agent_cfg.algo, agent_cfg.chi_strategy, agent_cfg.sampling
    cfg["hyperparameters"] = hp.to_dict()
    _echo(run_dir, "train", cfg)
    try:
        agent = train_agent(agent_cfg, labeled, hp, int(cfg["seed"]), dataset=ds,
                            log_path=run_dir / "train_log.csv")
    except TrainingDivergence as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, run_dir / "last_good", {"dataset_header": ds.header})
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(agent, run_dir / "checkpoint", {"dataset_header": ds.header, "seed": int(cfg["seed"])})
    print(f"wrote {run_dir / 'checkpoint'} ({agent.config.variant}, steps {agent.steps})")
    return EXIT_OK


def cmd_eval(cfg: dict, run_dir: Path) -> int:
    if cfg["checkpoint"] is None:
        raise UsageError("a checkpoint directory is required")
    try:
        agent = load_checkpoint(cfg["checkpoint"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    header = _dataset(cfg["dataset"]).header if cfg["dataset"] else agent.meta["extra"].get("dataset_header")
    if not header:
        raise DataError("checkpoint carries no dataset header; pass --dataset")
    if agent.criterion is None:
        raise UsageError("unconditioned checkpoints have no style to evaluate")
    labels = cfg["labels"] if cfg["labels"] is not None else list(agent.criterion.promptable)
    try:
        ev.check_promptable(agent.criterion, labels)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    reports = []
    for seed in cfg["seeds"]:
        reports += ev.evaluate_agent(agent, header, int(cfg["episodes"]), int(seed), labels)
    ev.write_rows(ev.report_rows(reports), run_dir / "eval.csv")
    rows = ev.aggregate(reports)
    ev.write_rows(ev.aggregate_rows(rows), run_dir / "aggregate.csv")
    for r in rows:
        print(f"{r.variant} {r.criterion}: alignment {r.alignment_mean:.3f} return {r.return_mean:.3f}")
    return EXIT_OK


def sweep_jobs(cfg: dict) -> list[dict]:
    kind = cfg["kind"]
    base = {"dataset": cfg["dataset"], "preset": cfg["preset"], "hyperparameters": cfg["hyperparameters"],
            "episodes": int(cfg["episodes"]), "eval_seed": int(cfg["eval_seed"])}
    if kind == "relabel_dist":
        agents = [({"algo": "sciql", "sampling": s}, f"sciql_{s}") for s in ("current", "random")]
    elif kind == "chi_strategy":
        agents = [({"algo": a, "chi_strategy": c}, f"{a}_{c}") for a in ("sorl", "sciql")
                  for c in ("ind", "mine", "sigmoid", "softmax")]
    elif kind == "pareto":
        agents = [(dict(v), AgentConfig(**v).variant) for v in PARETO_VARIANTS]
    elif kind == "noise":
        agents = [({"algo": cfg["algo"]}, f"{cfg['algo']}_zeta{z:g}", z) for z in cfg["zetas"]]
    else:
        raise UsageError(f"unknown sweep kind {kind!r}; expected one of {list(SWEEP_KINDS)}")
    jobs = []
    for entry in agents:
        agent, variant = entry[0], entry[1]
        zeta = entry[2] if len(entry) > 2 else 0.0
        for crit in cfg["criteria"]:
            for seed in cfg["seeds"]:
                jobs.append({**base, "agent": agent, "variant": variant, "criterion": crit, "seed": int(seed),
                             "zeta": float(zeta), "pollution_seed": int(cfg["pollution_seed"])})
    return jobs


def cmd_sweep(cfg: dict, run_dir: Path) -> int:
    _dataset(cfg["dataset"])
    for c in cfg["criteria"]:
        _criterion(c)
    jobs = sweep_jobs(cfg)
    _echo(run_dir, "sweep", cfg)
    try:
        reports = run_jobs(jobs, int(cfg["workers"]))
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    ev.write_rows(ev.report_rows(reports), run_dir / "episodes.csv")
    rows = ev.aggregate(reports)
    ev.write_rows(ev.aggregate_rows(rows), run_dir / "aggregate.csv")
    top = "all" if len(cfg["criteria"]) > 1 else cfg["criteria"][0]
    for r in rows:
        if r.criterion == top:
            print(f"{r.variant}: alignment {r.alignment_mean:.3f} ± {r.alignment_std:.3f} "
                  f"return {r.return_mean:.3f} ± {r.return_std:.3f}")
    if cfg["kind"] == "pareto":
        points = {v: ev.pareto_point(rows, v, top) for v in sorted({r.variant for r in rows})}
        families = {"sciql": [p for v, p in points.items() if v.startswith("sciql")],
                    "sorl": [p for v, p in points.items() if v.startswith("sorl")]}
        out = [{"variant": v, "style": p.style, "task": p.task} for v, p in points.items()]
        out += [{"variant": f"hypervolume_{fam}", "style": ev.hypervolume(pts), "task": float("nan")}
                for fam, pts in families.items()]
        ev.write_rows(out, run_dir / "pareto.csv")
        for fam, pts in families.items():
            print(f"hypervolume {fam}: {ev.hypervolume(pts):.1f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "annotate": cmd_annotate, "histogram": cmd_histogram,
            "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stylerl", description="Style-conditioned offline RL on Circle2d.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--out", help="run directory (default: numbered directory under $%s)" % OUTPUT_ROOT_ENV)

    g = sub.add_parser("generate", help="roll out the scripted agent into a dataset")
    common(g)
    g.add_argument("--variant", choices=sorted(ENV_IDS), default=None)
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--reward-mode", dest="reward_mode", choices=("distance", "literal"))

    a = sub.add_parser("annotate", help="label a dataset and write a sidecar")
    common(a)
    a.add_argument("--dataset")
    a.add_argument("--criterion")
    a.add_argument("--zeta", type=float, help="label pollution rate")
    a.add_argument("--seed", type=int, help="pollution seed")

    h = sub.add_parser("histogram", help="label counts per criterion")
    common(h)
    h.add_argument("--dataset")
    h.add_argument("--criterion", help="default: every criterion")

    t = sub.add_parser("train", help="train one agent")
    common(t)
    t.add_argument("--dataset")
    t.add_argument("--labels", help="label sidecar from annotate")
    t.add_argument("--criterion", help="annotate on the fly instead of --labels")
    t.add_argument("--zeta", type=float)
    t.add_argument("--algo")
    t.add_argument("--gawr", choices=("none", "style_first", "task_first"))
    t.add_argument("--chi", dest="chi_strategy")
    t.add_argument("--sampling", help="current|future|random|mixture or p_c|p_f|p_r|p_m")
    t.add_argument("--sorl-beta", dest="sorl_beta", type=float)
    t.add_argument("--schedule", choices=("joint", "sequential"))
    t.add_argument("--preset")
    t.add_argument("--seed", type=int)
    t.add_argument("--hp", action="append", metavar="KEY=VALUE", help="hyperparameter override, repeatable")

    e = sub.add_parser("eval", help="roll out a checkpoint and write CSV reports")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--dataset", help="take return bounds from this dataset instead of the checkpoint")
    e.add_argument("--labels", type=_int_list)
    e.add_argument("--episodes", type=int)
    e.add_argument("--seeds", type=_int_list)

    s = sub.add_parser("sweep", help="ablation sweeps with aggregate CSV output")
    common(s)
    s.add_argument("kind", choices=SWEEP_KINDS)
    s.add_argument("--dataset")
    s.add_argument("--criterion", dest="criteria", action="append")
    s.add_argument("--seeds", type=_int_list)
    s.add_argument("--preset")
    s.add_argument("--episodes", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--algo", help="algorithm for the noise sweep")
    s.add_argument("--zetas", type=_float_list)
    s.add_argument("--hp", action="append", metavar="KEY=VALUE")
    return p


def _overrides(args) -> dict:
    skip = {"command", "config", "out", "hp"}
    out = {k: v for k, v in vars(args).items() if k not in skip and v is not None}
    if getattr(args, "hp", None):
        out["hyperparameters"] = _parse_kv(args.hp)
    return out


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = materialize(args.command, _load_config_file(args.config), _overrides(args))
        run_dir = fresh_run_dir(args.out, args.command)
        if args.command not in ("train", "sweep"):
            _echo(run_dir, args.command, cfg)
        return COMMANDS[args.command](cfg, run_dir)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

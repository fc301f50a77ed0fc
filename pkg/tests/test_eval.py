import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylerl import agents as ag
from stylerl import env
from stylerl import eval as ev
from stylerl.env import EnvConfig, generate_dataset
from stylerl.labeling import annotate, make_criterion


class ConstantPolicy:
    """Same raw action every step, whatever the label: a circler for a turning action."""

    def __init__(self, criterion, raw):
        self.criterion = criterion
        self.raw = np.asarray(raw, dtype=np.float64)
        self.config = SimpleNamespace(variant="constant")

    def act(self, obs, z=None):
        return np.tile(self.raw, (len(obs), 1))


def test_alignment_examples():
    assert ev.alignment([2, 2, 2, 2], 2) == 1.0
    assert ev.alignment([1, 0, 1, 0], 1) == 0.5
    assert ev.alignment([0, 0], 1) == 0.0
    with pytest.raises(ValueError):
        ev.alignment([], 0)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=50), st.integers(0, 5), st.permutations(range(6)))
def test_alignment_ignores_non_target_relabeling(labels, z, perm):
    # remap every label except z; alignment must not change
    others = [x for x in perm if x != z]
    mapping = {old: new for old, new in zip([x for x in range(6) if x != z], others)}
    mapping[z] = z
    assert ev.alignment([mapping[x] for x in labels], z) == ev.alignment(labels, z)


@pytest.mark.parametrize("raw,expected", [(-5.0, 0.0), (5.0, 1.0), (0.0, 0.5), (-9.0, 0.0), (9.0, 1.0)])
def test_normalized_return(raw, expected):
    assert ev.normalized_return(raw, (-5.0, 5.0)) == pytest.approx(expected)


def test_normalized_return_needs_ordered_bounds():
    with pytest.raises(ValueError):
        ev.normalized_return(0.0, (1.0, 1.0))


def test_ccw_circler_aligns_with_left_turns():
    crit = make_criterion("turn_direction")
    policy = ConstantPolicy(crit, env.encode_action(0.3, 1.5))
    rep = ev.rollout(policy, crit, 1, n_episodes=3, seed=0, bounds=(-1e4, 0.0))
    assert rep.alignment >= 0.9
    assert len(rep.episodes) == 3
    assert all(0.0 <= e.alignment <= 1.0 and 0.0 <= e.normalized_return <= 1.0 for e in rep.episodes)


def test_rollout_rejects_non_promptable_label():
    crit = make_criterion("turn_direction")
    policy = ConstantPolicy(crit, [0.0, 0.0])
    with pytest.raises(ValueError, match=r"promptable set is \[0, 1\]"):
        ev.rollout(policy, crit, 2, n_episodes=1)


def test_rollout_is_deterministic():
    crit = make_criterion("speed_category")
    hp = ag.HyperParams(hidden=(16, 16), embed_dim=4)
    ds = generate_dataset("inplace", 1, 0, config=EnvConfig(horizon=60))
    agent = ag.create_agent(ag.AgentConfig("cbc"), hp, annotate(ds, crit), np.random.default_rng(0))
    a = ev.evaluate_agent(agent, ds.header, n_episodes=2, seed=4)
    b = ev.evaluate_agent(agent, ds.header, n_episodes=2, seed=4)
    assert ev.report_rows(a) == ev.report_rows(b)
    assert [r.z for r in a] == [0, 1, 2]
    assert a[0].variant == "cbc"


@pytest.fixture(scope="module")
def position_data():
    ds = generate_dataset("inplace", 1, 0, config=EnvConfig(horizon=200))
    return annotate(ds, make_criterion("position"))


def test_untrained_cbc_position_is_chance(position_data):
    hp = ag.HyperParams(hidden=(64, 64))
    scores = []
    for seed in range(3):
        agent = ag.create_agent(ag.AgentConfig("cbc"), hp, position_data, np.random.default_rng(seed))
        scores += [r.alignment for r in ev.evaluate_agent(agent, position_data.base.header, n_episodes=5, seed=seed)]
    assert abs(np.mean(scores) - 1 / 8) <= 0.1


def test_label_blind_policy_averages_exactly_to_chance(position_data):
    # identical trajectories for every label, and each step carries exactly one label
    hp = ag.HyperParams(hidden=(16, 16))
    agent = ag.create_agent(ag.AgentConfig("bc"), hp, position_data, np.random.default_rng(0))
    reps = ev.evaluate_agent(agent, position_data.base.header, n_episodes=3, seed=1)
    assert np.mean([r.alignment for r in reps]) == pytest.approx(1 / 8, abs=1e-12)


# -- aggregation -----------------------------------------------------------------


def report(variant, crit, z, seed, alignments, returns):
    eps = [ev.EpisodeResult(a, 0.0, r) for a, r in zip(alignments, returns)]
    return ev.RolloutReport(crit, z, seed, eps, variant)


def reference_aggregate(reports):
    """Spreadsheet-style: pivot (variant, criterion, z) x seed, then average."""
    table = {}
    for r in reports:
        al = sum(e.alignment for e in r.episodes) / len(r.episodes)
        rt = sum(e.normalized_return for e in r.episodes) / len(r.episodes)
        table.setdefault(r.variant, {}).setdefault(r.criterion, {}).setdefault(r.z, []).append((al, rt))

    def pstd(xs):
        m = sum(xs) / len(xs)
        return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))

    out = {}
    for v, crits in table.items():
        crit_means, all_std_al, all_std_rt = [], [], []
        for c, zs in crits.items():
            cell_al = [sum(x for x, _ in seeds) / len(seeds) for seeds in zs.values()]
            cell_rt = [sum(y for _, y in seeds) / len(seeds) for seeds in zs.values()]
            sd_al = [pstd([x for x, _ in seeds]) for seeds in zs.values()]
            sd_rt = [pstd([y for _, y in seeds]) for seeds in zs.values()]
            row = (sum(cell_al) / len(cell_al), sum(sd_al) / len(sd_al), sum(cell_rt) / len(cell_rt),
                   sum(sd_rt) / len(sd_rt))
            out[(v, c)] = row
            crit_means.append(row)
            all_std_al += sd_al
            all_std_rt += sd_rt
        if len(crits) > 1:
            out[(v, "all")] = (sum(r[0] for r in crit_means) / len(crit_means), sum(all_std_al) / len(all_std_al),
                               sum(r[2] for r in crit_means) / len(crit_means), sum(all_std_rt) / len(all_std_rt))
    return out


def test_two_label_mean():
    rows = ev.aggregate([report("v", "speed_category", 0, 0, [0.4], [0.1]),
                         report("v", "speed_category", 1, 0, [0.8], [0.3])])
    assert rows[0].alignment_mean == pytest.approx(0.6)
    assert rows[0].return_mean == pytest.approx(0.2)


def test_identical_reports_have_zero_std():
    reps = [report("v", "position", z, s, [0.5, 0.7], [0.2, 0.2]) for z in range(3) for s in range(4)]
    row = ev.aggregate(reps)[0]
    assert row.alignment_std == 0.0 and row.return_std == 0.0


def test_aggregate_matches_reference():
    rng = np.random.default_rng(0)
    labels = {"position": range(8), "speed_category": range(3), "turn_direction": range(2)}
    reps = [report(v, c, z, s, rng.uniform(0, 1, 5), rng.uniform(0, 1, 5))
            for v in ("a", "b") for c, zs in labels.items() for z in zs for s in range(5)]
    ref = reference_aggregate(reps)
    rows = ev.aggregate(reps)
    assert len(rows) == len(ref)
    for r in rows:
        np.testing.assert_allclose([r.alignment_mean, r.alignment_std, r.return_mean, r.return_std],
                                   ref[(r.variant, r.criterion)], rtol=1e-12)


def test_missing_cells_are_reported():
    reps = [report("v", "speed_category", z, 0, [0.5], [0.5]) for z in (0, 2)]
    reps.append(report("v", "turn_direction", 0, 0, [0.5], [0.5]))
    rows = {r.criterion: r for r in ev.aggregate(reps, expected={"speed_category": [0, 1, 2], "turn_direction": [0, 1]})}
    assert rows["speed_category"].missing == [1]
    assert math.isnan(rows["speed_category"].alignment_mean)
    assert rows["turn_direction"].missing == [1]
    assert rows["all"].missing == ["speed_category:1", "turn_direction:1"]
    assert math.isnan(rows["all"].alignment_mean)


def test_aggregate_csv_marks_gaps(tmp_path):
    reps = [report("v", "speed_category", 0, 0, [0.5], [0.5])]
    rows = ev.aggregate_rows(ev.aggregate(reps, expected={"speed_category": [0, 1]}))
    path = ev.write_rows(rows, tmp_path / "agg.csv", "bounds: dataset")
    text = path.read_text().splitlines()
    assert text[0] == "# bounds: dataset"
    assert text[2].split(",")[2] == "nan" and text[2].endswith(",1")


# -- hypervolume -----------------------------------------------------------------------


def grid_hypervolume(points):
    """Unit-cell count of the dominated region; exact for integer points."""
    covered = np.zeros((100, 100), dtype=bool)
    for x, y in points:
        covered[:x, :y] = True
    return float(covered.sum())


@pytest.mark.parametrize("points,expected", [([(100, 100)], 10000.0), ([(50, 50)], 2500.0),
                                             ([(80, 20), (20, 80)], 2800.0), ([], 0.0)])
def test_hypervolume_examples(points, expected):
    assert ev.hypervolume([ev.ParetoPoint(x, y) for x, y in points]) == pytest.approx(expected)


points_st = st.lists(st.tuples(st.integers(0, 100), st.integers(0, 100)), max_size=8)


@settings(max_examples=100)
@given(points_st)
def test_hypervolume_matches_grid_oracle(points):
    assert ev.hypervolume(points) == pytest.approx(grid_hypervolume(points))


@settings(max_examples=100)
@given(points_st, st.tuples(st.integers(0, 100), st.integers(0, 100)))
def test_hypervolume_is_monotone(points, extra):
    before = ev.hypervolume(points)
    assert ev.hypervolume(points + [extra]) >= before
    if any(x >= extra[0] and y >= extra[1] for x, y in points):
        assert ev.hypervolume(points + [extra]) == before


@pytest.mark.parametrize("style,task", [(-1, 5), (101, 5), (5, -0.1), (5, 100.5)])
def test_pareto_point_bounds(style, task):
    with pytest.raises(ValueError):
        ev.ParetoPoint(style, task)


def test_pareto_point_from_aggregate():
    rows = ev.aggregate([report("sciql", "speed_category", 0, 0, [0.9], [0.3])])
    p = ev.pareto_point(rows, "sciql", "speed_category")
    assert (p.style, p.task, p.variant) == (pytest.approx(90.0), pytest.approx(30.0), "sciql")
    with pytest.raises(KeyError):
        ev.pareto_point(rows, "sorl")


# -- noise sweep -------------------------------------------------------------------------


def test_noise_sweep_marks_threshold():
    ds = generate_dataset("inplace", 1, 0, config=EnvConfig(horizon=40))
    crit = make_criterion("speed_category")
    hp = ag.HyperParams(hidden=(8,), embed_dim=2)
    seen = []

    def train_fn(labeled, seed):
        seen.append((labeled.zeta, seed))
        return ag.create_agent(ag.AgentConfig("cbc"), hp, labeled, np.random.default_rng(seed))

    rows = ev.noise_sweep(train_fn, ds, crit, [0.0, 0.9], [0, 1], n_episodes=1)
    assert seen == [(0.0, 0), (0.0, 1), (0.9, 0), (0.9, 1)]
    assert all(r["threshold"] == pytest.approx(2 / 3) for r in rows)
    assert [r["beyond_threshold"] for r in rows] == [False, False, True, True]
    with pytest.raises(ValueError):
        ev.noise_sweep(train_fn, ds, crit, [1.5], [0])

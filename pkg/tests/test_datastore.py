import json

import numpy as np
import pytest
from scipy import stats

from stylerl import datastore as dst
from stylerl.env import EnvConfig, generate_dataset
from stylerl.labeling import StyleSamplingSpec, annotate, make_criterion


@pytest.fixture(scope="module")
def small():
    return generate_dataset("navigate", 4, 3, config=EnvConfig(horizon=50))


def test_roundtrip_is_exact(tmp_path, small):
    path = dst.write_dataset(small, tmp_path / "ds.json")
    back = dst.read_dataset(path)
    for name in dst.FIELD_ORDER:
        np.testing.assert_array_equal(getattr(back, name), getattr(small, name))
    np.testing.assert_array_equal(back.episode_lengths, small.episode_lengths)
    assert back.header == small.header


def test_header_provenance(tmp_path):
    ds = generate_dataset("inplace", 3, 7, path=tmp_path / "d.json")
    h = dst.read_dataset(tmp_path / "d.json").header
    assert h["env_id"] == "circle2d-inplace-v0"
    assert h["seed"] == 7
    assert h["target"] == {"center": [0.0, 0.0], "radius": 10.0}
    assert h["episode_count"] * 1000 == ds.num_transitions


def test_truncated_blob_is_rejected(tmp_path, small):
    dst.write_dataset(small, tmp_path / "ds.json")
    blob = tmp_path / "ds.bin"
    blob.write_bytes(blob.read_bytes()[:-12])
    with pytest.raises(dst.DatasetFormatError, match="total_floats"):
        dst.read_dataset(tmp_path / "ds.json")


@pytest.mark.parametrize("field,value", [("episode_count", 99), ("transition_count", 7), ("format", "nope"),
                                         ("dtype", "<f8")])
def test_corrupt_manifest_names_field(tmp_path, small, field, value):
    dst.write_dataset(small, tmp_path / "ds.json")
    m = json.loads((tmp_path / "ds.json").read_text())
    m[field] = value
    (tmp_path / "ds.json").write_text(json.dumps(m))
    with pytest.raises(dst.DatasetFormatError, match=field):
        dst.read_dataset(tmp_path / "ds.json")


def test_missing_manifest_key(tmp_path, small):
    dst.write_dataset(small, tmp_path / "ds.json")
    m = json.loads((tmp_path / "ds.json").read_text())
    del m["fields"]
    (tmp_path / "ds.json").write_text(json.dumps(m))
    with pytest.raises(dst.DatasetFormatError, match="fields"):
        dst.read_dataset(tmp_path / "ds.json")


def test_transition_views_respect_episodes(small):
    assert small.num_transitions == 200
    last = small.episode_ends - 1
    assert np.all(small.dones[last])
    assert small.dones.sum() == small.num_episodes
    for e in range(small.num_episodes):
        obs = small.episode_observations(e)
        sl = slice(small.episode_starts[e], small.episode_ends[e])
        np.testing.assert_array_equal(small.s[sl], obs[:-1])
        np.testing.assert_array_equal(small.s_next[sl], obs[1:])
        np.testing.assert_array_equal(small.t[sl], np.arange(50))


def test_constructor_validates_lengths(small):
    with pytest.raises(dst.DatasetFormatError):
        dst.Dataset(small.observations[:-1], small.actions, small.rewards, small.episode_lengths)
    with pytest.raises(dst.DatasetFormatError):
        dst.Dataset(small.observations, small.actions[:-1], small.rewards, small.episode_lengths)


def test_batch_current_equals_center(small):
    L = annotate(small, make_criterion("speed_category"))
    b = dst.sample_batch(L, StyleSamplingSpec("current"), 256, np.random.default_rng(0))
    assert len(b) == 256
    np.testing.assert_array_equal(b.z, b.z_center)
    for arr in (b.s, b.a, b.r, b.s_next, b.done, b.z):
        assert len(arr) == 256


def test_batch_terminal_next_state(small):
    L = annotate(small, make_criterion("position"))
    b = dst.sample_batch(L, StyleSamplingSpec("random"), 4000, np.random.default_rng(1))
    terminal = b.done
    assert terminal.any()
    ends = small.episode_ends[small.episode_id[b.index[terminal]]]
    final_obs = small.observations[ends + small.episode_id[b.index[terminal]]]
    np.testing.assert_array_equal(b.s_next[terminal], final_obs)


def test_batch_random_matches_histogram(small):
    L = annotate(small, make_criterion("position"))
    b = dst.sample_batch(L, StyleSamplingSpec("random"), 100_000, np.random.default_rng(2))
    hist = L.global_histogram
    keep = hist > 0
    observed = np.bincount(b.z, minlength=len(hist))[keep]
    expected = hist[keep] / hist.sum() * 100_000
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_batch_is_deterministic(small):
    L = annotate(small, make_criterion("turn_direction"))
    a = dst.sample_batch(L, StyleSamplingSpec("future"), 64, np.random.default_rng(5))
    b = dst.sample_batch(L, StyleSamplingSpec("future"), 64, np.random.default_rng(5))
    np.testing.assert_array_equal(a.index, b.index)
    np.testing.assert_array_equal(a.z, b.z)


def test_uniform_over_transitions(small):
    rng = np.random.default_rng(3)
    counts = np.zeros(small.num_transitions)
    for _ in range(10):
        b = dst.sample_batch(None, None, 100_000, rng, dataset=small)
        counts += np.bincount(b.index, minlength=small.num_transitions)
    mean = 1e6 / small.num_transitions
    sigma = np.sqrt(1e6 * (1 / small.num_transitions) * (1 - 1 / small.num_transitions))
    # 0.27% of cells are expected beyond 3 sigma, so check the fraction plus a global test
    assert np.mean(np.abs(counts - mean) < 3 * sigma) >= 0.99
    assert stats.chisquare(counts).pvalue > 0.01


def test_unconditioned_batch_has_no_style(small):
    b = dst.sample_batch(None, None, 8, np.random.default_rng(0), dataset=small)
    assert b.z is None and b.z_center is None


def test_batch_size_validated(small):
    with pytest.raises(ValueError):
        dst.sample_batch(None, None, 0, np.random.default_rng(0), dataset=small)

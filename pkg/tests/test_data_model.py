import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atm.data_model import (
    DatasetManifest,
    Episode,
    EpisodeValidationError,
    PointTrack,
    denormalize_coords,
    hash_directory,
    normalize_coords,
    read_episode,
    read_manifest,
    scan_dataset,
    write_episode,
    write_manifest,
)


def make_episode(T=2, with_actions=False, rng=None):
    rng = rng or np.random.default_rng(0)
    frames = rng.integers(0, 256, (T, 8, 8, 3), dtype=np.uint8)
    track = PointTrack(0, np.full((T, 2), 0.25), np.ones(T, bool))
    return Episode(
        views={"agentview": frames},
        instruction="reach the red disc",
        tracks={"agentview": [track]},
        actions=rng.normal(size=(T, 4)).astype(np.float32) if with_actions else None,
    )


def test_round_trip_static_track(tmp_path):
    ep = make_episode(T=2)
    write_episode(ep, tmp_path / "ep")
    back = read_episode(tmp_path / "ep")
    assert back == ep
    assert back.tracks["agentview"][0].coords.dtype == np.dtype("<f4")


def test_missing_actions_is_video(tmp_path):
    write_episode(make_episode(), tmp_path / "ep")
    back = read_episode(tmp_path / "ep")
    assert back.actions is None
    assert back.kind == "video" and not back.is_demo


def test_actions_make_demo(tmp_path):
    write_episode(make_episode(with_actions=True), tmp_path / "ep")
    assert read_episode(tmp_path / "ep").kind == "demo"


def test_out_of_range_coords_rejected(tmp_path):
    ep = make_episode()
    ep.tracks["agentview"][0].coords[0, 0] = 1.2
    with pytest.raises(EpisodeValidationError, match="coords"):
        write_episode(ep, tmp_path / "ep")
    assert not (tmp_path / "ep" / "meta.json").exists()


def test_mismatched_view_lengths_rejected():
    ep = make_episode(T=3)
    ep.views["wrist"] = ep.views["agentview"][:2]
    with pytest.raises(EpisodeValidationError, match=r"views\[wrist\]"):
        ep.validate()


def test_visibility_length_named():
    tr = PointTrack(0, np.zeros((3, 2)), np.ones(2, bool))
    with pytest.raises(EpisodeValidationError, match="visibility"):
        tr.validate()


def test_action_length_named():
    ep = make_episode(T=3, with_actions=True)
    ep.actions = ep.actions[:2]
    with pytest.raises(EpisodeValidationError, match="actions"):
        ep.validate()


@pytest.mark.parametrize(
    "pixel, size, expected",
    [((64, 64), 128, (0.5, 0.5)), ((0, 0), 128, (0.0, 0.0)), ((96, 32), 128, (0.75, 0.25)), ((10, 30), (20, 60), (0.5, 0.5))],
)
def test_normalize_examples(pixel, size, expected):
    np.testing.assert_allclose(normalize_coords(pixel, size), expected)


def test_zero_dimension_errors():
    with pytest.raises(ValueError):
        normalize_coords((1, 1), 0)
    with pytest.raises(ValueError):
        denormalize_coords((0.5, 0.5), (0, 10))


@given(
    st.integers(1, 512),
    st.integers(1, 512),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_denormalize_inverts_normalize(w, h, fx, fy):
    p = np.array([fx * w, fy * h])
    np.testing.assert_allclose(denormalize_coords(normalize_coords(p, (w, h)), (w, h)), p, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(
    T=st.integers(1, 5),
    K=st.integers(0, 3),
    demo=st.booleans(),
    proprio=st.booleans(),
    seed=st.integers(0, 2**16),
)
def test_round_trip_random_episodes(tmp_path_factory, T, K, demo, proprio, seed):
    rng = np.random.default_rng(seed)
    tracks = [PointTrack(k, rng.uniform(0, 1, (T, 2)), rng.integers(0, 2, T).astype(bool)) for k in range(K)]
    ep = Episode(
        views={"a": rng.integers(0, 256, (T, 4, 6, 3), dtype=np.uint8), "b": rng.integers(0, 256, (T, 2, 2, 3), dtype=np.uint8)},
        instruction="push the blue disc",
        tracks={"a": tracks} if K else {},
        actions=rng.normal(size=(T, 4)) if demo else None,
        proprioception=rng.normal(size=(T, 3)) if proprio else None,
        states=rng.normal(size=(T, 7)),
        metadata={"seed": seed, "nested": {"x": [1, 2]}},
    )
    path = tmp_path_factory.mktemp("ep")
    write_episode(ep, path)
    back = read_episode(path)
    assert back == ep
    if K:
        np.testing.assert_array_equal(back.track_arrays("a")[0], ep.track_arrays("a")[0])


def _small_dataset(root, n_video=3, n_demo=2):
    records = []
    for i in range(n_video + n_demo):
        demo = i >= n_video
        rel = f"episodes/{'demo' if demo else 'video'}_{i:02d}"
        write_episode(make_episode(T=3, with_actions=demo, rng=np.random.default_rng(i)), root / rel)
        records.append({"path": rel, "kind": "demo" if demo else "video", "instruction": "reach the red disc", "embodiment_tag": "cursor"})
    m = DatasetManifest(records, {"agentview": [8, 8]}, 4, None, root=root)
    write_manifest(m, root)
    return m


def test_manifest_counts_match_rescan(tmp_path):
    m = _small_dataset(tmp_path)
    back = read_manifest(tmp_path)
    scan = scan_dataset(tmp_path)
    assert (back.num_videos, back.num_demos) == (3, 2)
    assert (scan.num_videos, scan.num_demos) == (m.num_videos, m.num_demos)
    assert scan.action_dim == 4


def test_manifest_with_bad_counts_rejected(tmp_path):
    _small_dataset(tmp_path)
    d = json.loads((tmp_path / "manifest.json").read_text())
    d["num_videos"] = 7
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(ValueError, match="counts"):
        read_manifest(tmp_path)


def test_hash_directory_tracks_content(tmp_path):
    _small_dataset(tmp_path / "a")
    _small_dataset(tmp_path / "b")
    assert hash_directory(tmp_path / "a") == hash_directory(tmp_path / "b")
    (tmp_path / "b" / "extra.txt").write_text("x")
    assert hash_directory(tmp_path / "a") != hash_directory(tmp_path / "b")

from __future__ import annotations

import json
import math
import random

import pytest

from conftest import make_episode
from vlnbench.episode import Action, SceneClass, load_episode
from vlnbench.kinematics import goal_pose
from vlnbench.synth import (
    GeneratorSpec,
    compute_stats,
    generate,
    load_dataset,
    manifest_paths,
    render_stats,
    validate_dataset,
    write_dataset,
)


def test_same_spec_same_bytes(tmp_path):
    spec = GeneratorSpec(seed=9, n_episodes=12)
    a = write_dataset(generate(spec), tmp_path / "a", spec).parent
    b = write_dataset(generate(spec), tmp_path / "b", spec).parent
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_fixed_subtask_count():
    episodes = generate(GeneratorSpec(seed=1, n_episodes=50, subtask_count_range=(2, 2)))
    assert all(len(ep.subtask_boundaries) == 2 for ep in episodes)


def test_single_scene_mix():
    episodes = generate(GeneratorSpec(seed=1, n_episodes=30, scene_mix={"farm": 1}))
    assert {ep.scene_class for ep in episodes} == {SceneClass.FARM}


def test_episodes_do_not_depend_on_batch_size():
    small = generate(GeneratorSpec(seed=3, n_episodes=5))
    large = generate(GeneratorSpec(seed=3, n_episodes=20))
    assert small == large[:5]


def test_different_seeds_differ():
    assert generate(GeneratorSpec(seed=1, n_episodes=5)) != generate(GeneratorSpec(seed=2, n_episodes=5))


def test_noisy_style_is_longer():
    concise = compute_stats(generate(GeneratorSpec(seed=4, n_episodes=60)))
    noisy = compute_stats(generate(GeneratorSpec(seed=4, n_episodes=60, instruction_style="noisy")))
    assert noisy.mean_length > concise.mean_length


def test_spec_validation():
    for bad in (
        {"scene_mix": {"farm": 0}},
        {"scene_mix": {"desert": 1}},
        {"subtask_count_range": (0, 3)},
        {"subtask_count_range": (4, 3)},
        {"segment_duration_range": (5, 2)},
        {"instruction_style": "florid"},
        {"n_episodes": -1},
    ):
        with pytest.raises(ValueError):
            GeneratorSpec(**bad)
    spec = GeneratorSpec(seed=5, scene_mix={"forest": 2, "garden": 1})
    assert GeneratorSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


def _random_spec(rng: random.Random) -> GeneratorSpec:
    lo = rng.randint(1, 8)
    seg_lo = rng.randint(1, 10)
    rot_lo = rng.randint(1, 4)
    scenes = rng.sample([s.value for s in SceneClass], rng.randint(1, 6))
    return GeneratorSpec(
        seed=rng.randrange(2**31),
        n_episodes=rng.randint(1, 3),
        scene_mix={s: rng.uniform(0.1, 5) for s in scenes},
        subtask_count_range=(lo, rng.randint(lo, 8)),
        segment_duration_range=(seg_lo, seg_lo + rng.randint(0, 10)),
        rotation_duration_range=(rot_lo, rot_lo + rng.randint(0, 4)),
        instruction_style=rng.choice(["concise", "noisy"]),
        count_decay=rng.uniform(0.05, 1.0),
    )


def test_generator_fuzz_over_many_specs(config):
    rng = random.Random(2024)
    for _ in range(1000):
        spec = _random_spec(rng)
        for ep in generate(spec, config):
            ann = ep.annotation
            assert math.isclose(sum(iv.duration for iv in ann.intervals), ann.duration, abs_tol=1e-9)
            assert all(a.action is not b.action for a, b in zip(ann.intervals, ann.intervals[1:]))
            assert ep.scene_class.value in spec.scene_mix
            lo, hi = spec.subtask_count_range
            assert lo <= len(ep.subtask_boundaries) <= hi
            assert ep.subtask_boundaries[-1][1] <= ann.duration
            assert ann.ends_with_stop


def test_goals_are_not_degenerate(synthetic_episodes, config):
    for ep in synthetic_episodes:
        forward = sum(iv.duration for iv in ep.annotation.intervals if iv.action is Action.FORWARD)
        goal = goal_pose(ep.annotation, config)
        if forward >= 2.0:
            assert math.hypot(goal.x, goal.y) >= 0.5


def test_default_distribution_resembles_the_benchmark(synthetic_episodes):
    stats = compute_stats(synthetic_episodes)
    assert 2.0 <= stats.mean_subtasks <= 3.2
    assert min(stats.subtask_histogram) >= 2 and max(stats.subtask_histogram) <= 8
    assert all(stats.scene_counts[s.value] > 0 for s in SceneClass)


def test_mean_length_of_two_instructions():
    eps = [
        make_episode([(Action.STOP, 1.0)], episode_id="a", instruction=" ".join(["go"] * 10)),
        make_episode([(Action.STOP, 1.0)], episode_id="b", instruction=" ".join(["walk"] * 20)),
    ]
    stats = compute_stats(eps)
    assert stats.mean_length == 15.0
    assert stats.length_histogram == {10: 1, 20: 1}
    assert stats.word_frequencies == (("walk", 20), ("go", 10))


def test_scene_counts_match_the_episodes(synthetic_episodes):
    stats = compute_stats(synthetic_episodes)
    for scene in SceneClass:
        assert stats.scene_counts[scene.value] == sum(ep.scene_class is scene for ep in synthetic_episodes)
    assert sum(stats.scene_counts.values()) == stats.n_episodes
    assert sum(stats.length_histogram.values()) == stats.n_episodes


def test_benchmark_scene_counts_are_reported():
    counts = {"farm": 372, "greenhouse": 258, "forest": 384, "mountain": 198, "garden": 258, "village": 90}
    eps = [
        make_episode([(Action.STOP, 1.0)], episode_id=f"{scene}-{i}", scene=scene)
        for scene, n in counts.items()
        for i in range(n)
    ]
    stats = compute_stats(eps, [2] * len(eps))
    assert stats.scene_counts == counts and stats.n_episodes == 1560


def test_stats_ignore_episode_order(synthetic_episodes):
    shuffled = list(synthetic_episodes)
    random.Random(0).shuffle(shuffled)
    assert compute_stats(shuffled) == compute_stats(synthetic_episodes)


def test_stats_need_episodes():
    with pytest.raises(ValueError):
        compute_stats([])


def test_stats_render_in_every_format(synthetic_episodes):
    stats = compute_stats(synthetic_episodes[:10])
    assert json.loads(render_stats(stats, "structured"))["n_episodes"] == 10
    assert render_stats(stats, "csv").startswith("section,key,value\n")
    assert "episodes" in render_stats(stats, "table_text")


def test_dataset_files_round_trip(tmp_path, synthetic_episodes):
    index = write_dataset(synthetic_episodes[:8], tmp_path / "ds", GeneratorSpec())
    assert index.name == "index.json"
    assert len(manifest_paths(tmp_path / "ds")) == 8
    assert load_dataset(tmp_path / "ds") == synthetic_episodes[:8]
    assert all(err is None for _, err in validate_dataset(tmp_path / "ds"))
    reloaded = load_episode(manifest_paths(tmp_path / "ds")[0])
    assert reloaded.reference_subtasks == synthetic_episodes[0].reference_subtasks

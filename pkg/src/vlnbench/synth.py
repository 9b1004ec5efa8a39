"""Seeded synthetic episodes and dataset statistics."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from vlnbench.episode import (
    Action,
    Episode,
    EpisodeError,
    AnnotationError,
    FrameSourceRef,
    InstructionText,
    ReferenceSubtask,
    SceneClass,
    cluster_actions,
    episode_manifest,
    load_episode,
    serialize_annotation,
)
from vlnbench.kinematics import KinematicsConfig, goal_pose
from vlnbench.subtasks import tokenize

INDEX_FILE = "index.json"
MIN_GOAL_DISTANCE = 0.5

LANDMARKS: dict[SceneClass, tuple[str, ...]] = {
    SceneClass.FARM: ("barn", "tractor", "haystack", "water trough", "silo", "scarecrow", "feed shed", "fence gate"),
    SceneClass.GREENHOUSE: ("seedling rack", "tomato row", "potting bench", "glass door", "watering cans", "heater", "trellis", "pepper plants"),
    SceneClass.FOREST: ("oak tree", "fallen log", "mossy rock", "stream", "woodpile", "trail marker", "pine stump", "mushroom patch"),
    SceneClass.MOUNTAIN: ("terrace wall", "tea bushes", "stone steps", "boulder", "shelter hut", "water tank", "orchard", "signpost"),
    SceneClass.GARDEN: ("flower bed", "bench", "fountain", "rose bush", "tool shed", "birdbath", "hedge", "compost bin"),
    SceneClass.VILLAGE: ("well", "red door", "stone bridge", "courtyard", "bicycle", "noodle shop", "village gate", "electric pole"),
}

_MOVES = (
    "walk forward to the {lm}",
    "go straight until you reach the {lm}",
    "keep going ahead to the {lm}",
    "head forward toward the {lm}",
)
_CONNECTIVES = ("then", "after that", "next", "and then")
_FILLERS = (
    "you know, the ground is a little muddy today",
    "don't mind the chickens over there",
    "I think the camera view is fine",
    "just take it easy",
    "my uncle planted all of this last spring",
    "it might rain later so be quick",
    "honestly it is not far at all",
)


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int = 42
    n_episodes: int = 100
    scene_mix: dict[str, float] = field(default_factory=lambda: {s.value: 1.0 for s in SceneClass})
    subtask_count_range: tuple[int, int] = (2, 8)
    segment_duration_range: tuple[int, int] = (4, 12)
    rotation_duration_range: tuple[int, int] = (1, 3)
    instruction_style: str = "concise"
    # weight of k subtasks is count_decay ** (k - min); 0.4 keeps the mean near 2.6
    count_decay: float = 0.4

    def __post_init__(self) -> None:
        object.__setattr__(self, "scene_mix", {SceneClass(k).value: float(v) for k, v in self.scene_mix.items()})
        for name in ("subtask_count_range", "segment_duration_range", "rotation_duration_range"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.n_episodes < 0:
            raise ValueError("n_episodes must be >= 0")
        if not self.scene_mix or any(w <= 0 for w in self.scene_mix.values()):
            raise ValueError("scene weights must be positive")
        lo, hi = self.subtask_count_range
        if not 1 <= lo <= hi <= 8:
            raise ValueError("subtask_count_range must satisfy 1 <= min <= max <= 8")
        lo, hi = self.segment_duration_range
        if not 1 <= lo <= hi:
            raise ValueError("segment_duration_range must satisfy 1 <= min <= max")
        lo, hi = self.rotation_duration_range
        if not 1 <= lo <= hi:
            raise ValueError("rotation_duration_range must satisfy 1 <= min <= max")
        if self.instruction_style not in ("concise", "noisy"):
            raise ValueError("instruction_style must be 'concise' or 'noisy'")
        if not 0 < self.count_decay <= 1:
            raise ValueError("count_decay must be in (0, 1]")

    def to_json(self) -> dict[str, Any]:
        data = asdict(self)
        for name in ("subtask_count_range", "segment_duration_range", "rotation_duration_range"):
            data[name] = list(data[name])
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> GeneratorSpec:
        return cls(**data)


def _turn_phrase(action: Action, seconds: int, config: KinematicsConfig) -> str:
    side = "left" if action is Action.LEFT_ROTATE else "right"
    degrees = round(math.degrees(config.rotation_rate * seconds))
    return f"turn {side} about {degrees} degrees"


def _draw_episode(spec: GeneratorSpec, index: int, config: KinematicsConfig) -> Episode:
    rng = random.Random(f"{spec.seed}/{index}")
    scenes = sorted(spec.scene_mix)
    scene = SceneClass(rng.choices(scenes, weights=[spec.scene_mix[s] for s in scenes])[0])
    lo, hi = spec.subtask_count_range
    counts = list(range(lo, hi + 1))
    k = rng.choices(counts, weights=[spec.count_decay ** (c - lo) for c in counts])[0]

    # redraw motions until the goal is clear of the start; the scene and count stay fixed
    for _ in range(1000):
        landmarks = rng.sample(LANDMARKS[scene], k)
        segments: list[tuple[Action, float]] = []
        clauses: list[str] = []
        boundaries: list[tuple[int, float]] = []
        t = 0.0
        for i, lm in enumerate(landmarks, start=1):
            move = rng.choice(_MOVES).format(lm=lm)
            if rng.random() < 0.6:
                turn = rng.choice((Action.LEFT_ROTATE, Action.RIGHT_ROTATE))
                turn_s = rng.randint(*spec.rotation_duration_range)
                segments.append((turn, float(turn_s)))
                clause = f"{_turn_phrase(turn, turn_s, config)} and {move}"
                t += turn_s
            else:
                clause = move
            fwd_s = rng.randint(*spec.segment_duration_range)
            segments.append((Action.FORWARD, float(fwd_s)))
            t += fwd_s
            if i == k:
                clause += " and stop there"
            clauses.append(clause)
            boundaries.append((i, t))
        segments.append((Action.STOP, 1.0))
        annotation = cluster_actions(segments)
        goal = goal_pose(annotation, config)
        if math.hypot(goal.x, goal.y) >= MIN_GOAL_DISTANCE:
            break
    else:  # pragma: no cover - needs an absurd spec
        raise RuntimeError(f"could not draw a non-degenerate goal for episode {index}")

    parts = []
    for i, clause in enumerate(clauses):
        if spec.instruction_style == "noisy" and rng.random() < 0.5:
            parts.append(rng.choice(_FILLERS) + ",")
        lead = "First" if i == 0 else rng.choice(_CONNECTIVES)
        parts.append(f"{lead} {clause}" + ("." if i == len(clauses) - 1 else ","))
    text = " ".join(parts)
    text = text[0].upper() + text[1:]

    reference = tuple(
        ReferenceSubtask(
            description=clause,
            start_condition="at the starting point" if i == 0 else f"at the {landmarks[i - 1]}",
            end_condition=f"reach the {landmarks[i]}",
        )
        for i, clause in enumerate(clauses)
    )
    return Episode(
        id=f"{scene.value}_{index:05d}",
        scene_class=scene,
        instruction=InstructionText(text),
        annotation=annotation,
        frame_source=FrameSourceRef.null(),
        subtask_boundaries=tuple(boundaries),
        reference_subtasks=reference,
    )


def generate(spec: GeneratorSpec, config: KinematicsConfig | None = None) -> list[Episode]:
    """Episodes are pure functions of (seed, index), so any slice can be generated independently."""
    config = config or KinematicsConfig()
    return [_draw_episode(spec, i, config) for i in range(spec.n_episodes)]


def write_dataset(episodes: Sequence[Episode], out_dir: str | os.PathLike[str], spec: GeneratorSpec | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for ep in episodes:
        annotation_name = f"{ep.id}.annotation.json"
        (out / annotation_name).write_bytes(serialize_annotation(ep.annotation))
        manifest_name = f"{ep.id}.json"
        (out / manifest_name).write_text(json.dumps(episode_manifest(ep, annotation_name), indent=2) + "\n")
        names.append(manifest_name)
    index = {"generator": spec.to_json() if spec else None, "episodes": names}
    (out / INDEX_FILE).write_text(json.dumps(index, indent=2) + "\n")
    return out / INDEX_FILE


def manifest_paths(dataset_dir: str | os.PathLike[str]) -> list[Path]:
    """Manifests listed by the index file, else every non-annotation JSON file."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise EpisodeError(f"dataset directory not found: {root}")
    index = root / INDEX_FILE
    if index.exists():
        return [root / name for name in json.loads(index.read_text())["episodes"]]
    return sorted(
        p for p in root.glob("*.json") if not p.name.endswith(".annotation.json") and p.name != INDEX_FILE
    )


def load_dataset(dataset_dir: str | os.PathLike[str]) -> list[Episode]:
    return [load_episode(p) for p in manifest_paths(dataset_dir)]


def validate_dataset(dataset_dir: str | os.PathLike[str]) -> list[tuple[Path, str | None]]:
    """(manifest, error message or None) for every manifest in the directory."""
    verdicts = []
    for path in manifest_paths(dataset_dir):
        try:
            load_episode(path)
        except (EpisodeError, AnnotationError, KeyError, TypeError, ValueError) as exc:
            verdicts.append((path, str(exc)))
        else:
            verdicts.append((path, None))
    return verdicts


@dataclass(frozen=True)
class DatasetStats:
    n_episodes: int
    scene_counts: dict[str, int]
    length_histogram: dict[int, int]
    mean_length: float
    subtask_histogram: dict[int, int]
    mean_subtasks: float | None
    word_frequencies: tuple[tuple[str, int], ...]

    @property
    def vocabulary_size(self) -> int:
        return len(self.word_frequencies)

    def to_json(self) -> dict[str, Any]:
        return {
            "n_episodes": self.n_episodes,
            "scene_counts": self.scene_counts,
            "length_histogram": {str(k): v for k, v in self.length_histogram.items()},
            "mean_length": self.mean_length,
            "subtask_histogram": {str(k): v for k, v in self.subtask_histogram.items()},
            "mean_subtasks": self.mean_subtasks,
            "vocabulary_size": self.vocabulary_size,
            "word_frequencies": [list(p) for p in self.word_frequencies],
        }


def compute_stats(episodes: Iterable[Episode], subtask_counts: Sequence[int] | None = None) -> DatasetStats:
    """Scene counts, length and subtask-count distributions, and word frequencies.

    ``subtask_counts`` defaults to each episode's reference count; episodes
    without one are left out of the subtask histogram.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("cannot compute statistics of an empty dataset")
    if subtask_counts is None:
        subtask_counts = [c for c in (e.reference_subtask_count for e in episodes) if c is not None]
    elif len(subtask_counts) != len(episodes):
        raise ValueError("subtask_counts must align with episodes")

    scenes = Counter(e.scene_class.value for e in episodes)
    lengths = Counter(e.instruction.word_count for e in episodes)
    subtasks = Counter(subtask_counts)
    words = Counter(tok for e in episodes for tok in tokenize(e.instruction.text))
    return DatasetStats(
        n_episodes=len(episodes),
        scene_counts={s.value: scenes.get(s.value, 0) for s in SceneClass},
        length_histogram=dict(sorted(lengths.items())),
        mean_length=math.fsum(e.instruction.word_count for e in episodes) / len(episodes),
        subtask_histogram=dict(sorted(subtasks.items())),
        mean_subtasks=math.fsum(subtask_counts) / len(subtask_counts) if subtask_counts else None,
        word_frequencies=tuple(sorted(words.items(), key=lambda kv: (-kv[1], kv[0]))),
    )


def render_stats(stats: DatasetStats, fmt: str = "table_text", top_words: int = 20) -> str:
    if fmt == "structured":
        return json.dumps(stats.to_json(), indent=2) + "\n"
    rows: list[tuple[str, str, str]] = [("section", "key", "value"), ("total", "episodes", str(stats.n_episodes))]
    rows += [("scene", k, str(v)) for k, v in stats.scene_counts.items()]
    rows.append(("length", "mean", f"{stats.mean_length:.2f}"))
    rows += [("length", str(k), str(v)) for k, v in stats.length_histogram.items()]
    rows.append(("subtasks", "mean", "-" if stats.mean_subtasks is None else f"{stats.mean_subtasks:.2f}"))
    rows += [("subtasks", str(k), str(v)) for k, v in stats.subtask_histogram.items()]
    rows.append(("words", "vocabulary", str(stats.vocabulary_size)))
    rows += [("words", w, str(c)) for w, c in stats.word_frequencies[:top_words]]
    if fmt == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        return buf.getvalue()
    if fmt == "table_text":
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        return "\n".join(f"{a.ljust(w0)}  {b.ljust(w1)}  {c}" for a, b, c in rows) + "\n"
    raise ValueError(f"unknown stats format {fmt!r}")

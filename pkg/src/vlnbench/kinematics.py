"""Planar dead reckoning for the four-action space."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from vlnbench.episode import Action, EpisodeAnnotation

_TIME_EPS = 1e-9


def normalize_heading(heading: float) -> float:
    """Wrap to (-pi, pi]; -pi maps to +pi."""
    wrapped = math.remainder(heading, 2.0 * math.pi)
    return math.pi if wrapped <= -math.pi else wrapped


@dataclass(frozen=True, slots=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading", normalize_heading(float(self.heading)))

    def distance_to(self, other: Pose) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def to_json(self) -> list[float]:
        return [self.x, self.y, self.heading]


ORIGIN = Pose(0.0, 0.0, 0.0)


@dataclass(frozen=True, slots=True)
class KinematicsConfig:
    forward_speed: float = 0.5
    rotation_rate: float = math.pi / 6
    decision_period: float = 1.0
    success_threshold: float = 3.0
    max_step_factor: float = 2.0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise ValueError(f"{f.name} must be a positive number, got {value!r}")
            object.__setattr__(self, f.name, float(value))
        if not self.max_step_factor > 1:
            raise ValueError("max_step_factor must be > 1")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> KinematicsConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown kinematics keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict[str, float]:
        return asdict(self)


def load_config(path: str | os.PathLike[str] | None) -> KinematicsConfig:
    if path is None:
        return KinematicsConfig()
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: kinematics config must be a JSON object")
    return KinematicsConfig.from_mapping(data)


def step_pose(pose: Pose, action: Action, dt: float, config: KinematicsConfig) -> Pose:
    """Advance ``pose`` by holding ``action`` for ``dt`` seconds."""
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    if action is Action.FORWARD:
        dist = config.forward_speed * dt
        return Pose(pose.x + dist * math.cos(pose.heading), pose.y + dist * math.sin(pose.heading), pose.heading)
    if action is Action.LEFT_ROTATE:
        return Pose(pose.x, pose.y, pose.heading + config.rotation_rate * dt)
    if action is Action.RIGHT_ROTATE:
        return Pose(pose.x, pose.y, pose.heading - config.rotation_rate * dt)
    return pose


@dataclass(frozen=True, slots=True)
class Trajectory:
    points: tuple[tuple[float, Pose], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple(self.points))
        if not self.points:
            raise ValueError("trajectory must contain at least the start pose")
        t0, p0 = self.points[0]
        if t0 != 0 or p0 != ORIGIN:
            raise ValueError("trajectory must start at time 0 at the origin")
        times = [t for t, _ in self.points]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def final_pose(self) -> Pose:
        return self.points[-1][1]

    @property
    def final_time(self) -> float:
        return self.points[-1][0]

    def to_json(self) -> list[list[float]]:
        return [[t, *p.to_json()] for t, p in self.points]


def _sample_times(duration: float, period: float) -> list[float]:
    n = math.ceil(round(duration / period, 9))
    times = [round(k * period, 9) for k in range(n)]
    times.append(duration)
    return times


def _integrate(annotation: EpisodeAnnotation, times: list[float], config: KinematicsConfig) -> list[Pose]:
    """Poses at increasing ``times``, integrating exactly across interval edges."""
    poses = []
    pose, t = ORIGIN, 0.0
    intervals = annotation.intervals
    k = 0
    for target in times:
        while t < target - _TIME_EPS:
            while k < len(intervals) and intervals[k].t_end <= t + _TIME_EPS:
                k += 1
            if k == len(intervals):
                t = target
                break
            seg_end = min(intervals[k].t_end, target)
            pose = step_pose(pose, intervals[k].action, seg_end - t, config)
            t = seg_end
        poses.append(pose)
    return poses


def ground_truth_trajectory(annotation: EpisodeAnnotation, config: KinematicsConfig) -> Trajectory:
    """Expert path sampled every ``decision_period`` plus the annotation end."""
    times = _sample_times(annotation.duration, config.decision_period)
    poses = _integrate(annotation, times, config)
    return Trajectory(tuple(zip(times, poses)))


def pose_at_time(annotation: EpisodeAnnotation, t: float, config: KinematicsConfig) -> Pose:
    """Ground-truth pose at ``t`` on the same sampling grid as the trajectory."""
    grid = [s for s in _sample_times(annotation.duration, config.decision_period) if s < t - _TIME_EPS]
    grid.append(min(t, annotation.duration))
    return _integrate(annotation, grid, config)[-1]


def goal_pose(annotation: EpisodeAnnotation, config: KinematicsConfig) -> Pose:
    return ground_truth_trajectory(annotation, config).final_pose

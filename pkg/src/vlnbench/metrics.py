"""Success Rate, Navigation Error and Independent Success Rate, with table buckets."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Sequence

from vlnbench.episode import Episode, SceneClass
from vlnbench.kinematics import KinematicsConfig, goal_pose, pose_at_time
from vlnbench.runner import EpisodeRun, Termination
from vlnbench.subtasks import SubtaskState

SCENE = "scene"
SUBTASK = "subtask"
SUBTASK_SPLIT = "subtask_split"
DEFAULT_PARTITIONS = (SCENE, SUBTASK, SUBTASK_SPLIT)

FORMATS = ("table_text", "csv", "structured")


@dataclass(frozen=True, slots=True)
class EpisodeResult:
    episode_id: str
    success: bool
    ne: float
    sq: int | None
    tq: int
    scene_class: str
    subtask_count: int
    termination: str

    def __post_init__(self) -> None:
        if self.ne < 0 or math.isnan(self.ne):
            raise ValueError("ne must be non-negative")
        if self.tq < 1 or self.subtask_count < 1:
            raise ValueError("tq and subtask_count must be positive")
        if self.sq is not None and not 0 <= self.sq <= self.tq:
            raise ValueError(f"sq={self.sq} outside [0, tq={self.tq}]")
        object.__setattr__(self, "scene_class", SceneClass(self.scene_class).value)
        object.__setattr__(self, "termination", Termination(self.termination).value)

    @property
    def scored(self) -> bool:
        return self.sq is not None

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> EpisodeResult:
        return cls(**data)


def score_episode(run: EpisodeRun, episode: Episode, config: KinematicsConfig) -> EpisodeResult:
    """Score one finished run.

    A subtask counts towards ``sq`` when its completion was accepted while the
    agent stood within the success threshold of the expert's pose at that
    subtask's boundary time. Without boundaries, or when the agent's list
    length differs from the boundary count, ``sq`` is left unscored.
    """
    if run.episode_id != episode.id:
        raise ValueError(f"run {run.episode_id!r} does not belong to episode {episode.id!r}")
    goal = goal_pose(episode.annotation, config)
    ne = run.final_pose.distance_to(goal)
    success = ne <= config.success_threshold and run.termination is not Termination.ABORTED

    subtasks = run.final_subtasks
    tq = len(subtasks) if subtasks is not None else (episode.reference_subtask_count or 1)
    bounds = episode.subtask_boundaries
    sq = None
    if bounds and subtasks is not None and len(subtasks) == len(bounds):
        sq = 0
        for rec in run.decisions:
            tr = rec.decision.transition
            if not rec.transition_accepted or tr is None or tr.to_state is not SubtaskState.DONE:
                continue
            expert = pose_at_time(episode.annotation, bounds[tr.subtask_id - 1][1], config)
            if rec.agent_pose_before.distance_to(expert) <= config.success_threshold:
                sq += 1

    return EpisodeResult(
        episode_id=episode.id,
        success=success,
        ne=ne,
        sq=sq,
        tq=tq,
        scene_class=episode.scene_class.value,
        subtask_count=episode.reference_subtask_count or tq,
        termination=run.termination.value,
    )


def _subtask_class(count: int) -> str:
    if count < 2:
        return "subtask<2"
    if count == 2:
        return "subtask=2"
    if count == 3:
        return "subtask=3"
    return "subtask>=4"


def _subtask_split_class(count: int) -> str:
    if count < 2:
        return "subtask<2"
    return "subtask=2" if count == 2 else "subtask>=3"


@dataclass(frozen=True)
class _Partition:
    classify: Callable[[EpisodeResult], str]
    standard_keys: tuple[str, ...]


PARTITIONS: dict[str, _Partition] = {
    SCENE: _Partition(lambda r: f"scene={r.scene_class}", tuple(f"scene={s.value}" for s in SceneClass)),
    SUBTASK: _Partition(lambda r: _subtask_class(r.subtask_count), ("subtask=2", "subtask=3", "subtask>=4")),
    SUBTASK_SPLIT: _Partition(lambda r: _subtask_split_class(r.subtask_count), ("subtask=2", "subtask>=3")),
}


@dataclass(frozen=True)
class AggregateReport:
    n_episodes: int
    sr: float
    ne_mean: float
    n_scored: int
    sq_mean: float | None
    tq_mean: float | None
    isr: float | None
    buckets: dict[str, AggregateReport | None] = field(default_factory=dict)
    partitions: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def isr_cell(self) -> str:
        if self.sq_mean is None or self.tq_mean is None:
            return "-"
        return f"{self.sq_mean:.2f} / {self.tq_mean:.2f}"

    def to_json(self) -> dict[str, Any]:
        return {
            "n_episodes": self.n_episodes,
            "sr": self.sr,
            "ne_mean": self.ne_mean,
            "n_scored": self.n_scored,
            "sq_mean": self.sq_mean,
            "tq_mean": self.tq_mean,
            "isr": self.isr,
            "buckets": {k: (v.to_json() if v else None) for k, v in sorted(self.buckets.items())},
            "partitions": {k: list(v) for k, v in sorted(self.partitions.items())},
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> AggregateReport:
        return cls(
            n_episodes=data["n_episodes"],
            sr=data["sr"],
            ne_mean=data["ne_mean"],
            n_scored=data["n_scored"],
            sq_mean=data["sq_mean"],
            tq_mean=data["tq_mean"],
            isr=data["isr"],
            buckets={k: (cls.from_json(v) if v else None) for k, v in data.get("buckets", {}).items()},
            partitions={k: tuple(v) for k, v in data.get("partitions", {}).items()},
        )


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def _summarize(results: Sequence[EpisodeResult]) -> AggregateReport:
    scored = [r for r in results if r.sq is not None]
    sq_mean = _mean([r.sq for r in scored]) if scored else None
    tq_mean = _mean([r.tq for r in scored]) if scored else None
    return AggregateReport(
        n_episodes=len(results),
        sr=_mean([1.0 if r.success else 0.0 for r in results]),
        ne_mean=_mean([r.ne for r in results]),
        n_scored=len(scored),
        sq_mean=sq_mean,
        tq_mean=tq_mean,
        isr=sq_mean / tq_mean if scored else None,
    )


def aggregate(results: Iterable[EpisodeResult], partitions: Sequence[str] = DEFAULT_PARTITIONS) -> AggregateReport:
    """Aggregate results; ISR is mean(sq) / mean(tq) over episodes with a scored sq."""
    results = list(results)
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    overall = _summarize(results)
    buckets: dict[str, AggregateReport | None] = {}
    layout: dict[str, tuple[str, ...]] = {}
    for name in partitions:
        part = PARTITIONS[name]
        groups: dict[str, list[EpisodeResult]] = {}
        for r in results:
            groups.setdefault(part.classify(r), []).append(r)
        keys = sorted(set(part.standard_keys) | groups.keys())
        layout[name] = tuple(keys)
        for key in keys:
            buckets[key] = _summarize(groups[key]) if key in groups else None
    return AggregateReport(
        overall.n_episodes, overall.sr, overall.ne_mean, overall.n_scored,
        overall.sq_mean, overall.tq_mean, overall.isr, buckets, layout,
    )


_CSV_COLUMNS = ("bucket", "n_episodes", "n_scored", "sr", "ne_mean", "sq_mean", "tq_mean", "isr")


def _rows(report: AggregateReport) -> list[tuple[str, AggregateReport | None]]:
    return [("all", report), *sorted(report.buckets.items())]


def render_report(report: AggregateReport, fmt: str = "table_text") -> bytes:
    """Render deterministically as an aligned text table, CSV, or JSON."""
    if fmt == "structured":
        return (json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for key, rep in _rows(report):
            if rep is None:
                writer.writerow([key, 0, 0, "-", "-", "-", "-", "-"])
                continue
            writer.writerow(
                [key, rep.n_episodes, rep.n_scored]
                + ["-" if v is None else repr(float(v)) for v in (rep.sr, rep.ne_mean, rep.sq_mean, rep.tq_mean, rep.isr)]
            )
        return buf.getvalue().encode("utf-8")
    if fmt == "table_text":
        header = ("Bucket", "N", "SR", "NE", "ISR")
        rows = [header]
        for key, rep in _rows(report):
            if rep is None:
                rows.append((key, "0", "-", "-", "-"))
            else:
                rows.append((key, str(rep.n_episodes), f"{rep.sr:.2f}", f"{rep.ne_mean:.2f}", rep.isr_cell()))
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = []
        for i, row in enumerate(rows):
            cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}; choose from {FORMATS}")


def parse_report_csv(data: bytes) -> dict[str, dict[str, Any]]:
    """Inverse of the CSV rendering: bucket -> column values (``None`` for "-")."""
    out: dict[str, dict[str, Any]] = {}
    for row in csv.DictReader(io.StringIO(data.decode("utf-8"))):
        key = row.pop("bucket")
        out[key] = {
            col: (None if val == "-" else int(val) if col in ("n_episodes", "n_scored") else float(val))
            for col, val in row.items()
        }
    return out

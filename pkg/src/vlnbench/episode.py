"""Episode domain types, the interval annotation format, and manifest loading."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from vlnbench.model_client import ImagePayload

logger = logging.getLogger(__name__)

TIME_RANGE_KEY = "time range"
_TIME_RANGE_ALIASES = (TIME_RANGE_KEY, "time_range")
_TIME_DECIMALS = 3


class Action(str, Enum):
    FORWARD = "FORWARD"
    LEFT_ROTATE = "LEFT ROTATE"
    RIGHT_ROTATE = "RIGHT ROTATE"
    STOP = "STOP"

    @classmethod
    def parse(cls, token: object) -> Action:
        """Parse a wire token ("LEFT ROTATE"); the underscore spelling is tolerated."""
        if not isinstance(token, str):
            raise ValueError(f"action token must be a string, got {token!r}")
        norm = " ".join(token.strip().upper().replace("_", " ").split())
        for action in cls:
            if action.value == norm:
                return action
        raise ValueError(f"unknown action token {token!r}")


ACTION_MENU: tuple[Action, ...] = tuple(Action)


class SceneClass(str, Enum):
    FARM = "farm"
    GREENHOUSE = "greenhouse"
    FOREST = "forest"
    MOUNTAIN = "mountain"
    GARDEN = "garden"
    VILLAGE = "village"


class AnnotationError(ValueError):
    """Invalid annotation document.

    ``category`` is one of ``malformed``, ``empty``, ``unknown_action``,
    ``invalid_interval``, ``gap``, ``overlap`` or ``unclustered``.
    """

    def __init__(self, category: str, message: str, index: int | None = None) -> None:
        super().__init__(f"[{category}] {message}")
        self.category = category
        self.index = index


class EpisodeError(ValueError):
    pass


def _round_time(value: float) -> float:
    return round(float(value), _TIME_DECIMALS)


@dataclass(frozen=True, slots=True)
class ActionInterval:
    action: Action
    t_start: float
    t_end: float

    def __post_init__(self) -> None:
        if not isinstance(self.action, Action):
            raise AnnotationError("unknown_action", f"not an Action: {self.action!r}")
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise AnnotationError("invalid_interval", "interval bounds must be finite")
        if self.t_start < 0:
            raise AnnotationError("invalid_interval", f"negative start time {self.t_start}")
        if not self.t_start < self.t_end:
            raise AnnotationError(
                "invalid_interval", f"empty or reversed interval [{self.t_start}, {self.t_end}]"
            )

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def contains(self, t: float) -> bool:
        return self.t_start <= t < self.t_end


@dataclass(frozen=True, slots=True)
class EpisodeAnnotation:
    intervals: tuple[ActionInterval, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "intervals", tuple(self.intervals))
        if not self.intervals:
            raise AnnotationError("empty", "annotation has no intervals")
        for k in range(1, len(self.intervals)):
            prev, cur = self.intervals[k - 1], self.intervals[k]
            if cur.t_start < prev.t_end:
                raise AnnotationError(
                    "overlap",
                    f"interval {k} starts at {cur.t_start} before interval {k - 1} ends at {prev.t_end}",
                    index=k,
                )
            if cur.t_start > prev.t_end:
                raise AnnotationError(
                    "gap",
                    f"gap between {prev.t_end} and {cur.t_start} before interval {k}",
                    index=k,
                )
            if cur.action is prev.action:
                raise AnnotationError(
                    "unclustered",
                    f"intervals {k - 1} and {k} repeat action {cur.action.value}",
                    index=k,
                )

    @property
    def duration(self) -> float:
        return self.intervals[-1].t_end

    @property
    def ends_with_stop(self) -> bool:
        return self.intervals[-1].action is Action.STOP

    def action_at(self, t: float) -> Action:
        """Annotated action at playback time ``t``; STOP once the annotation has ended."""
        for interval in self.intervals:
            if interval.contains(t):
                return interval.action
        return Action.STOP


def parse_annotation(document: bytes | str) -> EpisodeAnnotation:
    """Parse and validate a JSON interval annotation document."""
    try:
        data = json.loads(document)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise AnnotationError("malformed", f"not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise AnnotationError("malformed", "annotation must be a JSON array")
    if not data:
        raise AnnotationError("empty", "annotation has no intervals")

    intervals = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or "action" not in item:
            raise AnnotationError("malformed", f"entry {i} is not an action object", index=i)
        span = next((item[k] for k in _TIME_RANGE_ALIASES if k in item), None)
        if (
            not isinstance(span, list)
            or len(span) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in span)
        ):
            raise AnnotationError("malformed", f"entry {i} has no valid time range", index=i)
        try:
            action = Action.parse(item["action"])
        except ValueError as exc:
            raise AnnotationError("unknown_action", str(exc), index=i) from exc
        intervals.append(ActionInterval(action, _round_time(span[0]), _round_time(span[1])))

    annotation = EpisodeAnnotation(tuple(intervals))
    if not annotation.ends_with_stop:
        logger.warning("annotation does not end in STOP; end of time is treated as stop")
    return annotation


def annotation_to_json(annotation: EpisodeAnnotation) -> list[dict[str, Any]]:
    return [
        {"action": iv.action.value, TIME_RANGE_KEY: [iv.t_start, iv.t_end]}
        for iv in annotation.intervals
    ]


def serialize_annotation(annotation: EpisodeAnnotation) -> bytes:
    return json.dumps(annotation_to_json(annotation), indent=2).encode("utf-8")


def cluster_actions(segments: Iterable[tuple[Action, float]], start: float = 0.0) -> EpisodeAnnotation:
    """Build an annotation from (action, duration) runs, merging adjacent repeats."""
    intervals: list[ActionInterval] = []
    t = start
    for action, duration in segments:
        if duration <= 0:
            continue
        t_end = _round_time(t + duration)
        if intervals and intervals[-1].action is action:
            intervals[-1] = ActionInterval(action, intervals[-1].t_start, t_end)
        else:
            intervals.append(ActionInterval(action, _round_time(t), t_end))
        t = t_end
    return EpisodeAnnotation(tuple(intervals))


@dataclass(frozen=True, slots=True)
class InstructionText:
    text: str
    word_count: int = field(default=-1)

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text.strip():
            raise EpisodeError("instruction text must be a non-empty string")
        count = len(self.text.split())
        if self.word_count == -1:
            object.__setattr__(self, "word_count", count)
        elif self.word_count != count:
            raise EpisodeError(f"word_count {self.word_count} != whitespace token count {count}")


class FrameKind(str, Enum):
    DIRECTORY_OF_IMAGES = "directory_of_images"
    NULL = "null"


@dataclass(frozen=True, slots=True)
class FrameSourceRef:
    kind: FrameKind
    uri: str = ""
    nominal_fps: float = 14.0

    def __post_init__(self) -> None:
        if not self.nominal_fps > 0:
            raise EpisodeError(f"nominal_fps must be positive, got {self.nominal_fps}")

    @classmethod
    def null(cls) -> FrameSourceRef:
        return cls(FrameKind.NULL, "", 14.0)


_MEDIA_TYPES = {".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".png": "image/png", ".webp": "image/webp"}


class FrameSource:
    """Random access to pre-extracted frames named by frame index (``000123.jpg``)."""

    def __init__(self, ref: FrameSourceRef) -> None:
        self.ref = ref
        self._frames: dict[int, Path] = {}
        if ref.kind is FrameKind.DIRECTORY_OF_IMAGES:
            root = Path(ref.uri)
            if not root.is_dir():
                raise EpisodeError(f"frame directory not found: {root}")
            for path in root.iterdir():
                if path.suffix.lower() in _MEDIA_TYPES and path.stem.isdigit():
                    self._frames[int(path.stem)] = path
        self._indices = sorted(self._frames)

    def __len__(self) -> int:
        return len(self._indices)

    def frame_index(self, t: float) -> int:
        return int(round(t * self.ref.nominal_fps))

    def frame_at(self, t: float) -> ImagePayload | None:
        """Frame for playback time ``t``; past the last frame the last one is held."""
        if not self._indices:
            return None
        idx = self.frame_index(t)
        if idx not in self._frames:
            lower = [i for i in self._indices if i <= idx]
            idx = lower[-1] if lower else self._indices[0]
        path = self._frames[idx]
        return ImagePayload(_MEDIA_TYPES[path.suffix.lower()], path.read_bytes())


@dataclass(frozen=True, slots=True)
class ReferenceSubtask:
    """Ground-truth subtask text shipped with synthetic episodes."""

    description: str
    start_condition: str
    end_condition: str


@dataclass(frozen=True, slots=True)
class Episode:
    id: str
    scene_class: SceneClass
    instruction: InstructionText
    annotation: EpisodeAnnotation
    frame_source: FrameSourceRef = field(default_factory=FrameSourceRef.null)
    subtask_boundaries: tuple[tuple[int, float], ...] | None = None
    reference_subtasks: tuple[ReferenceSubtask, ...] | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise EpisodeError("episode id must not be empty")
        try:
            object.__setattr__(self, "scene_class", SceneClass(self.scene_class))
        except ValueError as exc:
            raise EpisodeError(f"invalid scene class {self.scene_class!r}") from exc
        if self.subtask_boundaries is not None:
            bounds = tuple((int(i), _round_time(t)) for i, t in self.subtask_boundaries)
            object.__setattr__(self, "subtask_boundaries", bounds)
            if [i for i, _ in bounds] != list(range(1, len(bounds) + 1)):
                raise EpisodeError("subtask boundary ordinals must be 1..K in order")
            times = [t for _, t in bounds]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise EpisodeError("subtask boundaries must be strictly increasing in time")
            if times and (times[0] < 0 or times[-1] > self.annotation.duration):
                raise EpisodeError("subtask boundaries must lie within the episode duration")
        if self.reference_subtasks is not None:
            object.__setattr__(self, "reference_subtasks", tuple(self.reference_subtasks))
            if (
                self.subtask_boundaries is not None
                and len(self.reference_subtasks) != len(self.subtask_boundaries)
            ):
                raise EpisodeError("reference subtasks and boundaries disagree in count")

    @property
    def reference_subtask_count(self) -> int | None:
        if self.reference_subtasks is not None:
            return len(self.reference_subtasks)
        if self.subtask_boundaries is not None:
            return len(self.subtask_boundaries)
        return None


def episode_duration(episode: Episode) -> float:
    return episode.annotation.duration


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_bytes())
    except FileNotFoundError as exc:
        raise EpisodeError(f"missing file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise EpisodeError(f"{path}: not valid JSON: {exc}") from exc


def load_episode(manifest_path: str | os.PathLike[str]) -> Episode:
    """Load and fully validate an episode manifest and its annotation."""
    manifest_path = Path(manifest_path)
    manifest = _read_json(manifest_path)
    if not isinstance(manifest, dict):
        raise EpisodeError(f"{manifest_path}: manifest must be a JSON object")
    for key in ("id", "scene_class", "instruction", "annotation_path"):
        if key not in manifest:
            raise EpisodeError(f"{manifest_path}: missing key {key!r}")

    base = manifest_path.parent
    annotation_file = base / manifest["annotation_path"]
    try:
        annotation = parse_annotation(annotation_file.read_bytes())
    except FileNotFoundError as exc:
        raise EpisodeError(f"missing annotation file: {annotation_file}") from exc

    frames = manifest.get("frames") or {"kind": "null"}
    try:
        kind = FrameKind(frames.get("kind", "null"))
    except ValueError as exc:
        raise EpisodeError(f"invalid frame source kind {frames.get('kind')!r}") from exc
    uri = frames.get("uri", "") or ""
    if kind is FrameKind.DIRECTORY_OF_IMAGES:
        uri = str((base / uri).resolve())
        if not Path(uri).is_dir():
            raise EpisodeError(f"frame directory not found: {uri}")
    frame_ref = FrameSourceRef(kind, uri, float(frames.get("fps", 14.0)))

    refs = manifest.get("subtasks")
    reference = None
    if refs is not None:
        reference = tuple(
            ReferenceSubtask(r["description"], r["start_condition"], r["end_condition"]) for r in refs
        )
    bounds = manifest.get("subtask_boundaries")
    return Episode(
        id=str(manifest["id"]),
        scene_class=manifest["scene_class"],
        instruction=InstructionText(manifest["instruction"]),
        annotation=annotation,
        frame_source=frame_ref,
        subtask_boundaries=None if bounds is None else tuple((i, t) for i, t in bounds),
        reference_subtasks=reference,
    )


def episode_manifest(episode: Episode, annotation_path: str) -> dict[str, Any]:
    manifest: dict[str, Any] = {
        "id": episode.id,
        "scene_class": episode.scene_class.value,
        "instruction": episode.instruction.text,
        "annotation_path": annotation_path,
        "frames": {
            "kind": episode.frame_source.kind.value,
            "uri": episode.frame_source.uri,
            "fps": episode.frame_source.nominal_fps,
        },
    }
    if episode.subtask_boundaries is not None:
        manifest["subtask_boundaries"] = [[i, t] for i, t in episode.subtask_boundaries]
    if episode.reference_subtasks is not None:
        manifest["subtasks"] = [
            {"description": r.description, "start_condition": r.start_condition, "end_condition": r.end_condition}
            for r in episode.reference_subtasks
        ]
    return manifest


def save_episode(episode: Episode, directory: str | os.PathLike[str]) -> Path:
    """Write ``<id>.json`` and ``<id>.annotation.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    annotation_name = f"{episode.id}.annotation.json"
    (directory / annotation_name).write_bytes(serialize_annotation(episode.annotation))
    manifest_path = directory / f"{episode.id}.json"
    manifest_path.write_text(json.dumps(episode_manifest(episode, annotation_name), indent=2) + "\n")
    return manifest_path

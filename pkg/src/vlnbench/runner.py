"""Open-loop episode playback: the per-step decision loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any

from vlnbench.episode import Action, Episode, FrameKind, FrameSource
from vlnbench.kinematics import ORIGIN, KinematicsConfig, Trajectory, step_pose
from vlnbench.model_client import ModelError
from vlnbench.policy import (
    PLAN_ERRORS,
    DecisionParseError,
    DecisionRecord,
    Policy,
    PolicyDecision,
    StepContext,
    legalize,
)
from vlnbench.subtasks import (
    StateTransition,
    SubtaskList,
    SubtaskListError,
    SubtaskState,
    apply_transition,
    focus_subtask,
)

logger = logging.getLogger(__name__)

HISTORY_KEEP = 16


class Termination(str, Enum):
    STOPPED = "stopped"
    TIMEOUT = "timeout"
    ABORTED = "aborted"


@dataclass(frozen=True, slots=True)
class EpisodeRun:
    episode_id: str
    policy: str
    trajectory: Trajectory
    decisions: tuple[DecisionRecord, ...]
    termination: Termination
    initial_subtasks: SubtaskList | None
    final_subtasks: SubtaskList | None
    early_stop: bool = False
    violations: tuple[str, ...] = ()
    error: str | None = None

    @property
    def final_pose(self):
        return self.trajectory.final_pose

    def summary_json(self) -> dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "policy": self.policy,
            "termination": self.termination.value,
            "early_stop": self.early_stop,
            "decision_count": len(self.decisions),
            "final_pose": self.final_pose.to_json(),
            "initial_subtasks": self.initial_subtasks.to_json() if self.initial_subtasks else None,
            "final_subtasks": self.final_subtasks.to_json() if self.final_subtasks else None,
            "violations": list(self.violations),
            "error": self.error,
        }


def decision_budget(duration: float, config: KinematicsConfig) -> int:
    """Decisions made when nothing stops early: ceil(max_step_factor * duration / period)."""
    return math.ceil(round(config.max_step_factor * duration / config.decision_period, 9))


def run_episode(episode: Episode, policy: Policy, config: KinematicsConfig) -> EpisodeRun:
    """Play the episode back under ``policy`` until STOP or the time budget runs out.

    Frames advance with the playback clock whatever the agent does; the
    agent's divergence is tracked only through its dead-reckoned pose. A
    reply that stays unparseable after its repair holds the agent in place for
    one period; a backend failure aborts the run.
    """
    try:
        subtasks = policy.plan(episode)
    except (ModelError, SubtaskListError, *PLAN_ERRORS) as exc:
        logger.warning("episode %s: planning failed: %s", episode.id, exc)
        return EpisodeRun(
            episode.id, policy.name, Trajectory(((0.0, ORIGIN),)), (), Termination.ABORTED,
            None, None, error=f"planning failed: {exc}",
        )
    initial = subtasks

    frames = None
    if policy.uses_frames and episode.frame_source.kind is FrameKind.DIRECTORY_OF_IMAGES:
        frames = FrameSource(episode.frame_source)

    dt = config.decision_period
    pose = ORIGIN
    points: list[tuple[float, Any]] = [(0.0, pose)]
    records: list[DecisionRecord] = []
    violations: list[str] = []
    termination = Termination.TIMEOUT
    early_stop = False
    error = None

    for step in range(decision_budget(episode.annotation.duration, config)):
        t = round(step * dt, 9)
        focus = focus_subtask(subtasks)
        if focus is None:
            decision = PolicyDecision(Action.STOP, None, "all subtasks done")
            records.append(DecisionRecord(t, None, decision, pose, pose, False))
            termination = Termination.STOPPED
            break

        before = subtasks
        auto_started = None
        if subtasks[focus].state is SubtaskState.PENDING:
            subtasks = apply_transition(subtasks, StateTransition.start(focus))
            auto_started = focus

        ctx = StepContext(
            episode, step, t, subtasks,
            frames.frame_at(t) if frames is not None else None,
            tuple(records[-HISTORY_KEEP:]),
        )
        held = False
        try:
            decision = policy.act(ctx)
        except ModelError as exc:
            error = f"decision failed at t={t}: {exc}"
            logger.warning("episode %s: %s", episode.id, error)
            termination = Termination.ABORTED
            subtasks = before
            break
        except DecisionParseError as exc:
            # a garbled reply costs one period in place, not the episode
            logger.info("episode %s: holding position at t=%s: %s", episode.id, t, exc)
            decision = PolicyDecision(Action.STOP, None, "no usable reply; holding position", f"unparseable reply: {exc}")
            held = True

        decision = legalize(decision, subtasks)
        accepted = decision.transition is not None
        subtasks = apply_transition(subtasks, decision.transition)
        if decision.violation:
            violations.append(f"t={t}: {decision.violation}")

        if held:
            records.append(DecisionRecord(t, focus, decision, pose, pose, False, auto_started, held=True))
            points.append((round(t + dt, 9), pose))
            continue

        if decision.action is Action.STOP:
            records.append(DecisionRecord(t, focus, decision, pose, pose, accepted, auto_started))
            termination = Termination.STOPPED
            early_stop = focus_subtask(subtasks) is not None
            break

        new_pose = step_pose(pose, decision.action, dt, config)
        records.append(DecisionRecord(t, focus, decision, pose, new_pose, accepted, auto_started))
        pose = new_pose
        points.append((round(t + dt, 9), pose))

    return EpisodeRun(
        episode_id=episode.id,
        policy=policy.name,
        trajectory=Trajectory(tuple(points)),
        decisions=tuple(records),
        termination=termination,
        initial_subtasks=initial,
        final_subtasks=subtasks,
        early_stop=early_stop,
        violations=tuple(violations),
        error=error,
    )

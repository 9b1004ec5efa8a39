from __future__ import annotations

import math

import pytest

from conftest import make_episode
from vlnbench.episode import Action, Episode, FrameKind, FrameSourceRef
from vlnbench.kinematics import ORIGIN, KinematicsConfig, goal_pose
from vlnbench.model_client import ModelError, canned_backend
from vlnbench.policy import PolicyDecision, ScriptedOraclePolicy, StepContext, reference_subtask_list
from vlnbench.runner import Termination, decision_budget, run_episode
from vlnbench.subtasks import StateTransition, SubtaskList, SubtaskState


class FixedPolicy:
    """Always answers with the same decision and counts its calls."""

    uses_frames = False

    def __init__(self, action: Action, transition=None, subtasks: SubtaskList | None = None) -> None:
        self.name = f"fixed-{action.value}"
        self.action = action
        self.transition = transition
        self.subtasks = subtasks
        self.contexts: list[StepContext] = []

    def plan(self, episode: Episode) -> SubtaskList:
        return self.subtasks or reference_subtask_list(episode)

    def act(self, ctx: StepContext) -> PolicyDecision:
        self.contexts.append(ctx)
        return PolicyDecision(self.action, self.transition)


def test_oracle_reaches_the_goal_on_every_synthetic_episode(synthetic_episodes, config):
    for ep in synthetic_episodes:
        run = run_episode(ep, ScriptedOraclePolicy(), config)
        assert run.termination is Termination.STOPPED
        assert run.final_pose.distance_to(goal_pose(ep.annotation, config)) <= 1e-6
        assert run.final_subtasks.done_count == len(run.final_subtasks)
        assert not run.early_stop


def test_immediate_stop_leaves_agent_at_origin(config):
    ep = make_episode([(Action.FORWARD, 4.0), (Action.STOP, 1.0)])
    run = run_episode(ep, FixedPolicy(Action.STOP), config)
    assert run.trajectory.points == ((0.0, ORIGIN),)
    assert run.termination is Termination.STOPPED
    assert len(run.decisions) == 1
    assert run.early_stop


@pytest.mark.parametrize("duration", [1.0, 2.5, 7.0, 12.345])
def test_never_stopping_policy_uses_the_whole_budget(duration, config):
    ep = make_episode([(Action.FORWARD, duration)])
    policy = FixedPolicy(Action.LEFT_ROTATE)
    run = run_episode(ep, policy, config)
    expected = math.ceil(config.max_step_factor * duration / config.decision_period)
    assert decision_budget(duration, config) == expected
    assert len(run.decisions) == len(policy.contexts) == expected
    assert run.termination is Termination.TIMEOUT
    assert len(run.trajectory.points) == expected + 1


def test_budget_follows_step_factor_and_period():
    cfg = KinematicsConfig(max_step_factor=3.0, decision_period=0.5)
    assert decision_budget(4.0, cfg) == 24
    assert decision_budget(0.1, KinematicsConfig()) == 1


def test_no_query_once_every_subtask_is_done(config):
    ep = make_episode([(Action.FORWARD, 5.0)], boundaries=[(1, 5.0)])
    policy = FixedPolicy(Action.FORWARD, StateTransition.finish(1))
    run = run_episode(ep, policy, config)
    assert len(policy.contexts) == 1
    assert run.termination is Termination.STOPPED
    last = run.decisions[-1]
    assert last.decision.action is Action.STOP and last.focus_id is None
    assert run.final_subtasks.states == [SubtaskState.DONE]


def test_focus_is_started_automatically(config):
    ep = make_episode([(Action.FORWARD, 3.0)], boundaries=[(1, 1.0), (2, 3.0)])
    policy = FixedPolicy(Action.FORWARD)
    run = run_episode(ep, policy, config)
    assert run.decisions[0].auto_started == 1
    assert all(r.auto_started is None for r in run.decisions[1:])
    assert policy.contexts[0].subtasks.states == [SubtaskState.DOING, SubtaskState.PENDING]


def test_illegal_transition_is_dropped_and_recorded(config):
    ep = make_episode([(Action.FORWARD, 2.0)], boundaries=[(1, 1.0), (2, 2.0)])
    policy = FixedPolicy(Action.FORWARD, StateTransition.finish(2))
    run = run_episode(ep, policy, config)
    assert run.final_subtasks.states == [SubtaskState.DOING, SubtaskState.PENDING]
    assert len(run.violations) == len(run.decisions)
    assert not any(r.transition_accepted for r in run.decisions)


def test_frames_follow_the_playback_clock(tmp_path, config):
    frames = tmp_path / "frames"
    frames.mkdir()
    for i in range(0, 60, 7):
        (frames / f"{i:06d}.jpg").write_bytes(f"frame{i}".encode())
    ep = Episode(
        id="framed",
        scene_class="farm",
        instruction="Walk ahead.",
        annotation=make_episode([(Action.FORWARD, 3.0)]).annotation,
        frame_source=FrameSourceRef(FrameKind.DIRECTORY_OF_IMAGES, str(frames), 14.0),
    )
    policy = FixedPolicy(Action.FORWARD)
    policy.uses_frames = True
    run_episode(ep, policy, config)
    seen = [ctx.frame.data for ctx in policy.contexts]
    assert seen == [b"frame0", b"frame14", b"frame28", b"frame42", b"frame56", b"frame56"]


def test_backend_failure_aborts_the_run(config):
    class Failing(FixedPolicy):
        def act(self, ctx):
            if ctx.step == 2:
                raise ModelError("backend down", status=503, attempts=3)
            return super().act(ctx)

    ep = make_episode([(Action.FORWARD, 5.0)])
    run = run_episode(ep, Failing(Action.FORWARD), config)
    assert run.termination is Termination.ABORTED
    assert "backend down" in run.error
    assert len(run.decisions) == 2
    assert run.final_pose.x == pytest.approx(1.0)


def test_unparseable_reply_holds_position(config):
    from vlnbench.policy import VLMPolicy
    from vlnbench.prompts import dm_template

    forward = '{"action": "FORWARD", "state_change": "none", "reason": "clear"}'
    backend = canned_backend(["no json here", "still none", forward])
    policy = VLMPolicy(backend, dm_template(), use_stl=False)
    run = run_episode(make_episode([(Action.FORWARD, 2.0)]), policy, config)
    assert run.termination is Termination.TIMEOUT
    first, second = run.decisions[:2]
    assert first.held and first.agent_pose_after == ORIGIN and first.decision.violation
    assert not second.held and second.agent_pose_after.x == pytest.approx(0.5)
    assert len(run.violations) == 1
    assert [t for t, _ in run.trajectory.points] == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert "no usable reply" in backend.requests[2].user_text


def test_backend_abort_reports_state_of_last_decision(config):
    class Down:
        supports_vision = False

        def complete(self, request, policy=None):
            raise ModelError("down", status=503, attempts=3)

    from vlnbench.policy import VLMPolicy
    from vlnbench.prompts import dm_template

    ep = make_episode([(Action.FORWARD, 2.0)], boundaries=[(1, 1.0), (2, 2.0)])
    policy = VLMPolicy(Down(), dm_template(), use_stl=False)
    run = run_episode(ep, policy, config)
    assert run.termination is Termination.ABORTED
    assert run.final_subtasks == run.initial_subtasks


def test_oracle_records_completions_at_boundaries(config):
    ep = make_episode(
        [(Action.FORWARD, 2.0), (Action.LEFT_ROTATE, 3.0), (Action.FORWARD, 2.0), (Action.STOP, 1.0)],
        boundaries=[(1, 2.0), (2, 7.0)],
    )
    run = run_episode(ep, ScriptedOraclePolicy(), config)
    done_at = [r.time for r in run.decisions if r.transition_accepted]
    assert done_at == [2.0, 7.0]
    assert run.final_pose.distance_to(goal_pose(ep.annotation, config)) < 1e-9


def test_run_summary_is_json_ready(config):
    import json

    ep = make_episode([(Action.FORWARD, 2.0), (Action.STOP, 1.0)], boundaries=[(1, 3.0)])
    run = run_episode(ep, ScriptedOraclePolicy(), config)
    summary = json.loads(json.dumps(run.summary_json()))
    assert summary["termination"] == "stopped"
    assert summary["final_subtasks"][0]["state"] == "done"

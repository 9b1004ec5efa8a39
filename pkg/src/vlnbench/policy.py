"""Per-step decision making and the baseline policies."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace
from typing import Any, Protocol, Sequence

from vlnbench.episode import ACTION_MENU, Action, Episode
from vlnbench.kinematics import Pose
from vlnbench.model_client import ImagePayload, ModelClient, ModelRequest
from vlnbench.prompts import PromptTemplate
from vlnbench.subtasks import (
    DecompositionError,
    IllegalTransitionError,
    ReplyParseError,
    StateTransition,
    SubtaskList,
    SubtaskState,
    apply_transition,
    decompose,
    extract_json,
    focus_subtask,
    single_subtask_list,
)

logger = logging.getLogger(__name__)

DEFAULT_HISTORY_K = 3
DM_SYSTEM_TEXT = "You are the navigation decision maker of a farm robot. Answer in JSON only."


@dataclass(frozen=True, slots=True)
class PolicyDecision:
    action: Action
    transition: StateTransition | None = None
    rationale: str = ""
    violation: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "action": self.action.value,
            "state_change": self.transition.to_text() if self.transition else "none",
            "reason": self.rationale,
            "violation": self.violation,
        }


@dataclass(frozen=True, slots=True)
class DecisionRecord:
    time: float
    focus_id: int | None
    decision: PolicyDecision
    agent_pose_before: Pose
    agent_pose_after: Pose
    transition_accepted: bool
    auto_started: int | None = None
    # no usable reply: the agent stayed put and the run went on
    held: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "time": self.time,
            "focus_id": self.focus_id,
            **self.decision.to_json(),
            "transition_accepted": self.transition_accepted,
            "auto_started": self.auto_started,
            "held": self.held,
            "pose_before": self.agent_pose_before.to_json(),
            "pose_after": self.agent_pose_after.to_json(),
        }


@dataclass(frozen=True, slots=True)
class StepContext:
    """Everything a policy may look at for one decision."""

    episode: Episode
    step: int
    time: float
    subtasks: SubtaskList
    frame: ImagePayload | None = None
    history: tuple[DecisionRecord, ...] = ()


class Policy(Protocol):
    """Policies must be safe to share across concurrently running episodes."""

    name: str
    uses_frames: bool

    def plan(self, episode: Episode) -> SubtaskList: ...

    def act(self, ctx: StepContext) -> PolicyDecision: ...


class DecisionParseError(ValueError):
    def __init__(self, message: str, raw_reply: str) -> None:
        super().__init__(message)
        self.raw_reply = raw_reply


def subtask_table(subtasks: SubtaskList) -> str:
    return "\n".join(
        f"NO.{s.id} [{s.state.value}] {s.description} (start: {s.start_condition}; end: {s.end_condition})"
        for s in subtasks
    )


def history_tail(history: Sequence[DecisionRecord], k: int) -> str:
    if k <= 0 or not history:
        return "(none)"
    lines = []
    for rec in history[-k:]:
        d = rec.decision
        change = d.transition.to_text() if d.transition else "none"
        action = "none (no usable reply)" if rec.held else d.action.value
        lines.append(f"t={rec.time:.1f}s action={action} state_change={change} reason={d.rationale}")
    return "\n".join(lines)


def action_menu() -> str:
    return ", ".join(a.value for a in ACTION_MENU)


def render_decision_prompt(
    subtasks: SubtaskList,
    template: PromptTemplate,
    history: Sequence[DecisionRecord] = (),
    history_k: int = DEFAULT_HISTORY_K,
) -> str:
    focus = focus_subtask(subtasks)
    return template.render(
        subtask_table=subtask_table(subtasks),
        subtasks=subtask_table(subtasks),
        focus_id=focus if focus is not None else "none",
        history_tail=history_tail(history, history_k),
        action_menu=action_menu(),
    )


def parse_decision_reply(text: str) -> PolicyDecision:
    """Parse ``{"action", "state_change", "reason"}``.

    An unknown action is a parse error. A garbled state change is not: it
    becomes "no transition" with a violation note.
    """
    try:
        obj = extract_json(text, "{")
    except ValueError as exc:
        raise ReplyParseError(str(exc), text) from exc
    if not isinstance(obj, dict) or "action" not in obj:
        raise ReplyParseError("reply object has no 'action'", text)
    try:
        action = Action.parse(obj["action"])
    except ValueError as exc:
        raise ReplyParseError(str(exc), text) from exc
    reason = obj.get("reason", "")
    reason = reason if isinstance(reason, str) else str(reason)
    try:
        transition = StateTransition.parse(obj.get("state_change"))
    except ValueError as exc:
        return PolicyDecision(action, None, reason, f"unusable state change: {exc}")
    return PolicyDecision(action, transition, reason)


def legalize(decision: PolicyDecision, subtasks: SubtaskList) -> PolicyDecision:
    """Drop a transition the state machine would reject, noting why."""
    try:
        apply_transition(subtasks, decision.transition)
    except IllegalTransitionError as exc:
        return replace(decision, transition=None, violation=f"illegal transition {decision.transition.to_text()}: {exc}")
    return decision


def decide(
    subtasks: SubtaskList,
    frame: ImagePayload | None,
    backend: ModelClient,
    template: PromptTemplate,
    *,
    history: Sequence[DecisionRecord] = (),
    history_k: int = DEFAULT_HISTORY_K,
) -> PolicyDecision:
    """One query to the decision model.

    Callers handle the all-done case themselves (focus is None). Raises
    ModelError on backend failure and DecisionParseError when the reply and
    its one repair both fail to parse.
    """
    if focus_subtask(subtasks) is None:
        raise ValueError("decide() called with every subtask done")
    prompt = render_decision_prompt(subtasks, template, history, history_k)
    image = frame if getattr(backend, "supports_vision", False) else None

    def ask(text: str) -> str:
        return backend.complete(ModelRequest(text, DM_SYSTEM_TEXT, image=image, max_reply_tokens=256)).text

    reply = ask(prompt)
    try:
        decision = parse_decision_reply(reply)
    except ReplyParseError as first:
        reply = ask(
            prompt
            + f"\n\nYour previous reply could not be parsed ({first}). Previous reply:\n{reply}\n\n"
            "Answer again with only the JSON object described above."
        )
        try:
            decision = parse_decision_reply(reply)
        except ReplyParseError as second:
            raise DecisionParseError(f"unparseable decision reply: {second}", reply) from second
    decision = legalize(decision, subtasks)
    if decision.violation:
        logger.info("decision violation: %s", decision.violation)
    return decision


def reference_subtask_list(episode: Episode) -> SubtaskList:
    """Ground-truth subtask list for policies that do not decompose."""
    if episode.reference_subtasks:
        return SubtaskList.pending(
            [(r.description, r.start_condition, r.end_condition) for r in episode.reference_subtasks]
        )
    if episode.subtask_boundaries:
        n = len(episode.subtask_boundaries)
        return SubtaskList.pending(
            [
                (f"segment {i} of the route", f"segment {i - 1} finished" if i > 1 else "at the start", f"segment {i} finished")
                for i in range(1, n + 1)
            ]
        )
    return single_subtask_list(episode.instruction)


class RandomPolicy:
    """Uniform draws over the four actions; never proposes a state change.

    The draw for a step depends only on (seed, episode id, step index), so a
    shared instance is reproducible under any scheduling.
    """

    name = "random"
    uses_frames = False

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed

    def plan(self, episode: Episode) -> SubtaskList:
        return reference_subtask_list(episode)

    def draw(self, episode_id: str, step: int) -> Action:
        return random.Random(f"{self.seed}/{episode_id}/{step}").choice(ACTION_MENU)

    def act(self, ctx: StepContext) -> PolicyDecision:
        return PolicyDecision(self.draw(ctx.episode.id, ctx.step), None, "random draw")


def random_policy(seed: int) -> RandomPolicy:
    return RandomPolicy(seed)


class ScriptedOraclePolicy:
    """Replays the annotated actions and closes subtasks at their boundary times or at STOP."""

    name = "oracle"
    uses_frames = False

    def __init__(self, episode: Episode | None = None) -> None:
        self.episode = episode

    def plan(self, episode: Episode) -> SubtaskList:
        return reference_subtask_list(self.episode or episode)

    def act(self, ctx: StepContext) -> PolicyDecision:
        episode = self.episode or ctx.episode
        action = episode.annotation.action_at(ctx.time)
        transition = None
        focus = focus_subtask(ctx.subtasks)
        bounds = episode.subtask_boundaries or ()
        if focus is not None and ctx.subtasks[focus].state is SubtaskState.DOING:
            # the annotated STOP ends the route, so the focus is finished too
            reached = focus <= len(bounds) and ctx.time >= bounds[focus - 1][1] - 1e-9
            if reached or action is Action.STOP:
                transition = StateTransition.finish(focus)
        return PolicyDecision(action, transition, "annotated action")


def scripted_oracle_policy(episode: Episode) -> ScriptedOraclePolicy:
    return ScriptedOraclePolicy(episode)


@dataclass
class VLMPolicy:
    """Model-driven policy; ``use_stl=False`` hands the whole instruction over as one subtask."""

    client: ModelClient
    dm_template: PromptTemplate
    stl_template: PromptTemplate | None = None
    use_stl: bool = True
    history_k: int = DEFAULT_HISTORY_K
    strict: bool = False
    check_particle: bool = False
    decompositions: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.use_stl and self.stl_template is None:
            raise ValueError("decomposition needs an STL template")

    @property
    def name(self) -> str:
        return "vlm" if self.use_stl else "vlm_no_stl"

    @property
    def uses_frames(self) -> bool:
        return bool(getattr(self.client, "supports_vision", False))

    def plan(self, episode: Episode) -> SubtaskList:
        if not self.use_stl:
            return single_subtask_list(episode.instruction)
        result = decompose(
            episode.instruction,
            self.client,
            self.stl_template,
            strict=self.strict,
            check_particle=self.check_particle,
        )
        self.decompositions[episode.id] = result.to_json()
        return result.subtasks

    def act(self, ctx: StepContext) -> PolicyDecision:
        return decide(ctx.subtasks, ctx.frame, self.client, self.dm_template, history=ctx.history, history_k=self.history_k)


PLAN_ERRORS = (DecompositionError, ReplyParseError)

"""Subtask lists: decomposition, principle validators and the state machine."""

from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Iterator

from vlnbench.episode import InstructionText
from vlnbench.model_client import ModelClient, ModelError, ModelRequest
from vlnbench.prompts import PromptTemplate

logger = logging.getLogger(__name__)

COVERAGE_MIN = 0.6
CONNECTION_MIN = 0.2

STOPWORDS = frozenset(
    """
    a an the and or but so then than that this these those it its is are was were be been
    being am i you he she we they me my your our their him her them to of in on at by for
    with from as if when while until there here not do does did will would can could should
    just very also please okay ok um uh well
    """.split()
)

_PUNCT = str.maketrans({c: " " for c in string.punctuation if c != "'"} | {"'": ""})


def tokenize(text: str) -> list[str]:
    """Lowercased words with punctuation stripped."""
    return text.lower().translate(_PUNCT).split()


def content_tokens(text: str) -> set[str]:
    return {tok for tok in tokenize(text) if tok not in STOPWORDS}


class SubtaskState(str, Enum):
    PENDING = "pending"
    DOING = "doing"
    DONE = "done"


_RANK = {SubtaskState.PENDING: 0, SubtaskState.DOING: 1, SubtaskState.DONE: 2}


class SubtaskListError(ValueError):
    pass


class IllegalTransitionError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Subtask:
    id: int
    description: str
    start_condition: str
    end_condition: str
    state: SubtaskState = SubtaskState.PENDING

    def __post_init__(self) -> None:
        for name in ("description", "start_condition", "end_condition"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise SubtaskListError(f"subtask {self.id}: {name} must be a non-empty string")
        object.__setattr__(self, "state", SubtaskState(self.state))

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "description": self.description,
            "start_condition": self.start_condition,
            "end_condition": self.end_condition,
            "state": self.state.value,
        }


def _states_well_formed(states: list[SubtaskState]) -> bool:
    """True iff states match DONE* (DOING|empty) PENDING*."""
    ranks = [_RANK[s] for s in states]
    if any(b > a for a, b in zip(ranks, ranks[1:])):
        return False
    return ranks.count(1) <= 1


@dataclass(frozen=True, slots=True)
class SubtaskList:
    subtasks: tuple[Subtask, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "subtasks", tuple(self.subtasks))
        if not self.subtasks:
            raise SubtaskListError("a subtask list needs at least one subtask")
        ids = [s.id for s in self.subtasks]
        if ids != list(range(1, len(ids) + 1)):
            raise SubtaskListError(f"subtask ids must be 1..N in order, got {ids}")
        if not _states_well_formed(self.states):
            raise SubtaskListError(f"illegal state pattern {[s.value for s in self.states]}")

    def __len__(self) -> int:
        return len(self.subtasks)

    def __iter__(self) -> Iterator[Subtask]:
        return iter(self.subtasks)

    def __getitem__(self, subtask_id: int) -> Subtask:
        """Look up by 1-based id."""
        if not 1 <= subtask_id <= len(self.subtasks):
            raise KeyError(subtask_id)
        return self.subtasks[subtask_id - 1]

    @property
    def states(self) -> list[SubtaskState]:
        return [s.state for s in self.subtasks]

    @property
    def done_count(self) -> int:
        return sum(s.state is SubtaskState.DONE for s in self.subtasks)

    def to_json(self) -> list[dict[str, Any]]:
        return [s.to_json() for s in self.subtasks]

    @classmethod
    def from_json(cls, data: list[dict[str, Any]]) -> SubtaskList:
        return cls(
            tuple(
                Subtask(
                    int(d["id"]),
                    d["description"],
                    d["start_condition"],
                    d["end_condition"],
                    SubtaskState(d.get("state", "pending")),
                )
                for d in data
            )
        )

    @classmethod
    def pending(cls, items: list[tuple[str, str, str]]) -> SubtaskList:
        """All-pending list from (description, start, end) triples."""
        return cls(tuple(Subtask(i, d, sc, ec) for i, (d, sc, ec) in enumerate(items, start=1)))


_TRANSITION_RE = re.compile(
    r"^\s*subtask\s*(?:no\.?\s*)?(\d+)\s*:?\s*(?:changes\s+)?(?:from\s+)?"
    r"(pending|doing|done)\s*(?:to|->|→|=>)\s*(pending|doing|done)\s*\.?\s*$",
    re.IGNORECASE,
)


@dataclass(frozen=True, slots=True)
class StateTransition:
    """One subtask state change; ``None`` stands for "no change" wherever a transition is optional."""

    subtask_id: int
    from_state: SubtaskState
    to_state: SubtaskState

    def __post_init__(self) -> None:
        pair = (SubtaskState(self.from_state), SubtaskState(self.to_state))
        if pair not in {
            (SubtaskState.PENDING, SubtaskState.DOING),
            (SubtaskState.DOING, SubtaskState.DONE),
        }:
            raise ValueError(f"transition {pair[0].value} -> {pair[1].value} is not constructible")
        if self.subtask_id < 1:
            raise ValueError("subtask id must be >= 1")
        object.__setattr__(self, "from_state", pair[0])
        object.__setattr__(self, "to_state", pair[1])

    @classmethod
    def start(cls, subtask_id: int) -> StateTransition:
        return cls(subtask_id, SubtaskState.PENDING, SubtaskState.DOING)

    @classmethod
    def finish(cls, subtask_id: int) -> StateTransition:
        return cls(subtask_id, SubtaskState.DOING, SubtaskState.DONE)

    def to_text(self) -> str:
        return f"subtask {self.subtask_id}: {self.from_state.value} to {self.to_state.value}"

    @classmethod
    def parse(cls, text: object) -> StateTransition | None:
        """Parse ``"none"``, ``"subtask 2: doing to done"`` or the long
        ``"Subtask NO.2 changes from doing to done"`` phrasing."""
        if text is None:
            return None
        if not isinstance(text, str):
            raise ValueError(f"state change must be a string, got {text!r}")
        if text.strip().lower() in {"", "none", "no change", "null"}:
            return None
        m = _TRANSITION_RE.match(text)
        if m is None:
            raise ValueError(f"unrecognised state change {text!r}")
        return cls(int(m.group(1)), SubtaskState(m.group(2).lower()), SubtaskState(m.group(3).lower()))


def apply_transition(subtasks: SubtaskList, transition: StateTransition | None) -> SubtaskList:
    """Return the list with ``transition`` applied.

    Raises IllegalTransitionError when the rules forbid it; the input list is
    never modified.
    """
    if transition is None:
        return subtasks
    i = transition.subtask_id
    if i > len(subtasks):
        raise IllegalTransitionError(f"no subtask {i} in a list of {len(subtasks)}")
    current = subtasks[i].state
    if current is not transition.from_state:
        raise IllegalTransitionError(
            f"subtask {i} is {current.value}, cannot go {transition.from_state.value} -> {transition.to_state.value}"
        )
    if transition.to_state is SubtaskState.DOING:
        if any(s.state is SubtaskState.DOING for s in subtasks):
            raise IllegalTransitionError(f"cannot start subtask {i} while another subtask is doing")
        if any(s.state is not SubtaskState.DONE for s in subtasks.subtasks[: i - 1]):
            raise IllegalTransitionError(f"cannot start subtask {i} before all earlier subtasks are done")
    items = list(subtasks.subtasks)
    items[i - 1] = replace(items[i - 1], state=transition.to_state)
    return SubtaskList(tuple(items))


def focus_subtask(subtasks: SubtaskList) -> int | None:
    """The DOING subtask, else the lowest-id PENDING one, else None."""
    for s in subtasks:
        if s.state is SubtaskState.DOING:
            return s.id
    for s in subtasks:
        if s.state is SubtaskState.PENDING:
            return s.id
    return None


class Verdict(str, Enum):
    PASS = "pass"
    FLAGGED = "flagged"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True, slots=True)
class ValidationReport:
    principle: str
    verdict: Verdict
    score: float | None = None
    violators: tuple[int, ...] = ()
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict is Verdict.PASS

    def to_json(self) -> dict[str, Any]:
        return {
            "principle": self.principle,
            "verdict": self.verdict.value,
            "score": self.score,
            "violators": list(self.violators),
            "detail": self.detail,
        }


def validate_synonymity(
    instruction: InstructionText | str, subtasks: SubtaskList, coverage_min: float = COVERAGE_MIN
) -> ValidationReport:
    """Share of instruction content tokens that appear in some subtask description."""
    text = instruction.text if isinstance(instruction, InstructionText) else instruction
    wanted = content_tokens(text)
    covered: set[str] = set()
    for s in subtasks:
        covered |= content_tokens(s.description)
    coverage = 1.0 if not wanted else len(wanted & covered) / len(wanted)
    missing = sorted(wanted - covered)
    return ValidationReport(
        "synonymity",
        Verdict.PASS if coverage >= coverage_min else Verdict.FLAGGED,
        coverage,
        (),
        f"coverage {coverage:.3f}" + (f"; missing: {', '.join(missing)}" if missing else ""),
    )


def jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def validate_connection(subtasks: SubtaskList, connection_min: float = CONNECTION_MIN) -> ValidationReport:
    """Jaccard overlap between each start condition and the previous end condition."""
    scores = []
    violators = []
    for prev, cur in zip(subtasks.subtasks, subtasks.subtasks[1:]):
        score = jaccard(content_tokens(cur.start_condition), content_tokens(prev.end_condition))
        scores.append(score)
        if score < connection_min:
            violators.append(cur.id)
    worst = min(scores) if scores else 1.0
    return ValidationReport(
        "connection",
        Verdict.FLAGGED if violators else Verdict.PASS,
        worst,
        tuple(violators),
        "single subtask" if not scores else f"min jaccard {worst:.3f}",
    )


class ReplyParseError(ValueError):
    def __init__(self, message: str, raw_reply: str) -> None:
        super().__init__(message)
        self.raw_reply = raw_reply


class DecompositionError(Exception):
    """Decomposition rejected; ``principle`` names the failing validator, if any."""

    def __init__(self, message: str, raw_reply: str = "", principle: str | None = None) -> None:
        super().__init__(message)
        self.raw_reply = raw_reply
        self.principle = principle


def extract_json(text: str, opener: str) -> Any:
    """Decode the first JSON value starting with ``opener`` in ``text``; fences and chatter are skipped."""
    decoder = json.JSONDecoder()
    start = text.find(opener)
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text, start)
            return value
        except json.JSONDecodeError:
            start = text.find(opener, start + 1)
    raise ValueError(f"no JSON value starting with {opener!r} found")


def parse_subtask_reply(text: str) -> SubtaskList:
    """Parse a model reply into an all-pending SubtaskList."""
    try:
        data = extract_json(text, "[")
    except ValueError as exc:
        raise ReplyParseError(str(exc), text) from exc
    if not isinstance(data, list) or not data:
        raise ReplyParseError("expected a non-empty JSON array of subtasks", text)
    items = []
    for pos, obj in enumerate(data, start=1):
        if not isinstance(obj, dict):
            raise ReplyParseError(f"element {pos} is not an object", text)
        try:
            ident = int(obj.get("id", pos))
            items.append(Subtask(ident, obj["description"], obj["start_condition"], obj["end_condition"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ReplyParseError(f"element {pos}: {exc}", text) from exc
    try:
        return SubtaskList(tuple(items))
    except SubtaskListError as exc:
        raise ReplyParseError(str(exc), text) from exc


STL_SYSTEM_TEXT = "You decompose navigation instructions into structured subtask lists."
_REPAIR_SUFFIX = (
    "\n\nYour previous reply could not be parsed ({error}). Previous reply:\n{reply}\n\n"
    "Answer again with only the JSON array described above."
)


def _request_with_repair(model: ModelClient, prompt: str, system_text: str, parse, max_tokens: int = 1024):
    reply = model.complete(ModelRequest(prompt, system_text, max_reply_tokens=max_tokens)).text
    try:
        return parse(reply), reply
    except ReplyParseError as first:
        logger.info("reply unparseable (%s); sending one repair request", first)
        repair_prompt = prompt + _REPAIR_SUFFIX.format(error=first, reply=reply)
        reply = model.complete(ModelRequest(repair_prompt, system_text, max_reply_tokens=max_tokens)).text
        return parse(reply), reply


def validate_particle(
    subtasks: SubtaskList, model: ModelClient | None, template: PromptTemplate
) -> ValidationReport:
    """Re-decompose every subtask; any that splits into two or more is flagged."""
    if model is None:
        return ValidationReport("particle", Verdict.INCONCLUSIVE, detail="no backend")
    violators = []
    for s in subtasks:
        prompt = template.render(instruction=s.description)
        try:
            sub, _ = _request_with_repair(model, prompt, STL_SYSTEM_TEXT, parse_subtask_reply)
        except (ModelError, ReplyParseError) as exc:
            return ValidationReport("particle", Verdict.INCONCLUSIVE, detail=f"subtask {s.id}: {exc}")
        if len(sub) != 1:
            violators.append(s.id)
    return ValidationReport(
        "particle",
        Verdict.FLAGGED if violators else Verdict.PASS,
        1.0 - len(violators) / len(subtasks),
        tuple(violators),
        f"{len(violators)} of {len(subtasks)} subtasks split further",
    )


@dataclass(frozen=True, slots=True)
class Decomposition:
    subtasks: SubtaskList
    reports: tuple[ValidationReport, ...]
    raw_reply: str

    def to_json(self) -> dict[str, Any]:
        return {
            "subtasks": self.subtasks.to_json(),
            "reports": [r.to_json() for r in self.reports],
        }


def decompose(
    instruction: InstructionText | str,
    model: ModelClient,
    template: PromptTemplate,
    *,
    strict: bool = False,
    check_particle: bool = True,
    coverage_min: float = COVERAGE_MIN,
    connection_min: float = CONNECTION_MIN,
) -> Decomposition:
    """Ask ``model`` for a subtask list and run the principle validators.

    Principle verdicts are advisory unless ``strict`` is set, in which case a
    flagged validator raises DecompositionError naming it.
    """
    text = instruction.text if isinstance(instruction, InstructionText) else instruction
    if not text.strip():
        raise DecompositionError("instruction is empty")
    prompt = template.render(instruction=text)
    try:
        subtasks, raw = _request_with_repair(model, prompt, STL_SYSTEM_TEXT, parse_subtask_reply)
    except ReplyParseError as exc:
        raise DecompositionError(f"unparseable decomposition reply: {exc}", exc.raw_reply) from exc

    reports = [
        validate_synonymity(text, subtasks, coverage_min),
        validate_connection(subtasks, connection_min),
    ]
    if check_particle:
        reports.append(validate_particle(subtasks, model, template))
    for report in reports:
        if report.verdict is Verdict.FLAGGED:
            logger.info("%s principle flagged: %s", report.principle, report.detail)
            if strict:
                raise DecompositionError(
                    f"{report.principle} principle failed: {report.detail}", raw, report.principle
                )
    return Decomposition(subtasks, tuple(reports), raw)


def single_subtask_list(instruction: InstructionText | str) -> SubtaskList:
    """The whole instruction as one subtask; used when decomposition is disabled."""
    text = instruction.text if isinstance(instruction, InstructionText) else instruction
    return SubtaskList.pending([(text, "at the starting point", "the instruction has been completed")])

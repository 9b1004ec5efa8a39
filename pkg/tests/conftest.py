from __future__ import annotations

import math

import pytest

from vlnbench.episode import Action, Episode, FrameSourceRef, InstructionText, cluster_actions
from vlnbench.kinematics import KinematicsConfig
from vlnbench.synth import GeneratorSpec, generate

_ACCEPTANCE: list[tuple[str, str, str]] = []


class AcceptanceRecorder:
    def check(self, name: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((name, "PASS" if passed else "FAIL", detail))
        assert passed, f"{name}: {detail}"

    def skip(self, name: str, reason: str) -> None:
        _ACCEPTANCE.append((name, "SKIP", reason))
        pytest.skip(reason)


@pytest.fixture
def acceptance() -> AcceptanceRecorder:
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{verdict}  {name}  {detail}")


@pytest.fixture
def config() -> KinematicsConfig:
    return KinematicsConfig()


@pytest.fixture(scope="session")
def synthetic_episodes() -> list[Episode]:
    return generate(GeneratorSpec(seed=42, n_episodes=100))


def make_episode(
    segments: list[tuple[Action, float]],
    *,
    episode_id: str = "ep",
    scene: str = "farm",
    instruction: str = "Go forward and stop at the tree.",
    boundaries: list[tuple[int, float]] | None = None,
) -> Episode:
    return Episode(
        id=episode_id,
        scene_class=scene,
        instruction=InstructionText(instruction),
        annotation=cluster_actions(segments),
        frame_source=FrameSourceRef.null(),
        subtask_boundaries=None if boundaries is None else tuple(boundaries),
    )


QUARTER_TURN_S = 3.0  # pi/2 at the default pi/6 rad/s
assert math.isclose(KinematicsConfig().rotation_rate * QUARTER_TURN_S, math.pi / 2)

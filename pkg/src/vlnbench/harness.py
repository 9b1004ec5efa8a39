"""Batch evaluation: run every episode of a dataset and write logs, results and reports."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from vlnbench import __version__
from vlnbench.episode import Episode
from vlnbench.kinematics import KinematicsConfig
from vlnbench.metrics import AggregateReport, EpisodeResult, aggregate, render_report, score_episode
from vlnbench.model_client import ConfigurationError, ModelClient, client_from_env
from vlnbench.policy import DEFAULT_HISTORY_K, Policy, RandomPolicy, ScriptedOraclePolicy, VLMPolicy
from vlnbench.prompts import dm_template, stl_template
from vlnbench.runner import EpisodeRun, run_episode
from vlnbench.synth import load_dataset, manifest_paths

logger = logging.getLogger(__name__)

POLICY_KINDS = ("vlm", "vlm_no_stl", "random", "oracle")
MODEL_POLICIES = ("vlm", "vlm_no_stl")
REPORT_FILES = {"table_text": "report.txt", "csv": "report.csv", "structured": "report.json"}
STAMP_FILE = "stamp.json"


@dataclass
class RunManifest:
    dataset: str
    policy: str
    out_dir: str
    kinematics: KinematicsConfig = field(default_factory=KinematicsConfig)
    stl_template: str | None = None
    dm_template: str | None = None
    parallelism: int | None = None
    seed: int = 0
    history_k: int = DEFAULT_HISTORY_K
    strict: bool = False
    resume: bool = False

    def __post_init__(self) -> None:
        if self.policy not in POLICY_KINDS:
            raise ConfigurationError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICY_KINDS)}")
        if self.parallelism is not None and self.parallelism < 1:
            raise ConfigurationError("parallelism must be >= 1")

    @property
    def workers(self) -> int:
        if self.parallelism is not None:
            return self.parallelism
        return 1 if self.policy in MODEL_POLICIES else (os.cpu_count() or 1)

    def stamp(self, dataset_digest: str) -> dict[str, Any]:
        """Every input that determines the results; enough to re-run them."""
        templates = {}
        if self.policy in MODEL_POLICIES:
            templates["dm"] = {"path": self.dm_template, "sha256": dm_template(self.dm_template).digest}
            if self.policy == "vlm":
                templates["stl"] = {"path": self.stl_template, "sha256": stl_template(self.stl_template).digest}
        return {
            "version": __version__,
            "dataset": str(Path(self.dataset).resolve()),
            "dataset_sha256": dataset_digest,
            "policy": self.policy,
            "seed": self.seed,
            "kinematics": self.kinematics.to_json(),
            "templates": templates,
            "history_k": self.history_k,
            "strict": self.strict,
        }

    @classmethod
    def from_stamp(cls, stamp: dict[str, Any], out_dir: str, **overrides: Any) -> RunManifest:
        templates = stamp.get("templates", {})
        return cls(
            dataset=stamp["dataset"],
            policy=stamp["policy"],
            out_dir=out_dir,
            kinematics=KinematicsConfig.from_mapping(stamp["kinematics"]),
            stl_template=templates.get("stl", {}).get("path"),
            dm_template=templates.get("dm", {}).get("path"),
            seed=stamp["seed"],
            history_k=stamp["history_k"],
            strict=stamp["strict"],
            **overrides,
        )


def dataset_digest(dataset_dir: str | os.PathLike[str]) -> str:
    h = hashlib.sha256()
    for manifest in manifest_paths(dataset_dir):
        h.update(manifest.name.encode())
        h.update(manifest.read_bytes())
        annotation = json.loads(manifest.read_bytes()).get("annotation_path")
        if annotation and (manifest.parent / annotation).exists():
            h.update((manifest.parent / annotation).read_bytes())
    return h.hexdigest()


def build_policy(manifest: RunManifest, client: ModelClient | None = None) -> Policy:
    if manifest.policy == "oracle":
        return ScriptedOraclePolicy()
    if manifest.policy == "random":
        return RandomPolicy(manifest.seed)
    if client is None:
        client = client_from_env()
    use_stl = manifest.policy == "vlm"
    return VLMPolicy(
        client=client,
        dm_template=dm_template(manifest.dm_template),
        stl_template=stl_template(manifest.stl_template) if use_stl else None,
        use_stl=use_stl,
        history_k=manifest.history_k,
        strict=manifest.strict,
    )


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def run_log_lines(run: EpisodeRun, extra: dict[str, Any] | None = None) -> bytes:
    """One JSON record per line: header, one per decision, summary."""
    lines = [{"type": "episode", "episode_id": run.episode_id, "policy": run.policy, **(extra or {})}]
    lines += [{"type": "decision", **rec.to_json()} for rec in run.decisions]
    lines.append({"type": "summary", **run.summary_json(), "trajectory": run.trajectory.to_json()})
    return "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines).encode("utf-8")


def _result_path(out: Path, episode_id: str) -> Path:
    return out / "results" / f"{episode_id}.json"


def _evaluate_one(episode: Episode, policy: Policy, manifest: RunManifest, out: Path) -> EpisodeResult:
    run = run_episode(episode, policy, manifest.kinematics)
    result = score_episode(run, episode, manifest.kinematics)
    extra = {}
    if isinstance(policy, VLMPolicy) and episode.id in policy.decompositions:
        extra["decomposition"] = policy.decompositions[episode.id]
    atomic_write(out / "runs" / f"{episode.id}.jsonl", run_log_lines(run, extra))
    payload = {"result": result.to_json(), "run": run.summary_json()}
    atomic_write(_result_path(out, episode.id), (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())
    return result


def load_results(out_dir: str | os.PathLike[str]) -> list[EpisodeResult]:
    files = sorted((Path(out_dir) / "results").glob("*.json"))
    return [EpisodeResult.from_json(json.loads(p.read_text())["result"]) for p in files]


def write_reports(report: AggregateReport, out: Path) -> None:
    for fmt, name in REPORT_FILES.items():
        atomic_write(out / name, render_report(report, fmt))


def evaluate(manifest: RunManifest, client: ModelClient | None = None) -> AggregateReport:
    """Run the whole dataset; results are aggregated in dataset order.

    Raises ConfigurationError for unusable settings (missing backend
    credentials, unwritable output directory) before any episode runs.
    """
    episodes = load_dataset(manifest.dataset)
    if not episodes:
        raise ConfigurationError(f"dataset {manifest.dataset} has no episodes")
    policy = build_policy(manifest, client)
    out = Path(manifest.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory not writable: {out}: {exc}") from exc
    atomic_write(out / STAMP_FILE, (json.dumps(manifest.stamp(dataset_digest(manifest.dataset)), indent=2, sort_keys=True) + "\n").encode())

    done: dict[str, EpisodeResult] = {}
    todo = []
    for ep in episodes:
        path = _result_path(out, ep.id)
        if manifest.resume and path.exists():
            done[ep.id] = EpisodeResult.from_json(json.loads(path.read_text())["result"])
        else:
            todo.append(ep)
    if done:
        logger.info("resuming: %d episodes already scored, %d to run", len(done), len(todo))

    if manifest.workers == 1:
        fresh = [_evaluate_one(ep, policy, manifest, out) for ep in todo]
    else:
        with ThreadPoolExecutor(max_workers=manifest.workers) as pool:
            fresh = list(pool.map(lambda ep: _evaluate_one(ep, policy, manifest, out), todo))
    done.update((r.episode_id, r) for r in fresh)

    report = aggregate([done[ep.id] for ep in episodes])
    write_reports(report, out)
    return report

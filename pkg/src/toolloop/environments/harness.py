"""Evaluation harness: grading, suite runs, and the retrieval-strategy comparison."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

from ..agent import Backends, EpisodeConfig, EpisodeTask, run_episode
from ..registry import HashingEmbedder, ToolRegistry
from ..rewards import canonical_call, match_calls, trajectory_calls
from ..trajectory import Trajectory
from .textworld import TextWorldTask
from .toolqa import SyntheticToolTask

log = logging.getLogger(__name__)


def load_task(path: str | Path):
    d = json.loads(Path(path).read_text())
    kind = d.get("kind", "toolqa")
    if kind == "toolqa":
        return SyntheticToolTask.from_dict(d)
    if kind == "textworld":
        return TextWorldTask.from_dict(d)
    raise ValueError(f"unknown task kind {kind!r}")


def success_of(traj: Trajectory, task) -> float:
    if isinstance(task, TextWorldTask):
        return 1.0 if task.goal_reached([s.call() for s in traj.call_steps()]) else 0.0
    ans = traj.final_answer
    return 1.0 if ans is not None and ans.strip() == task.gold_answer.strip() else 0.0


def path_score(traj: Trajectory, gold_calls) -> float:
    """Matched gold calls over max(len gold, len predicted)."""
    pred = [c for _, c in trajectory_calls(traj)]
    gold = [canonical_call(n, a) for n, a in gold_calls]
    denom = max(len(gold), len(pred))
    if denom == 0:
        return 0.0
    return sum(match_calls(pred, gold)) / denom


def grade(traj: Trajectory, task) -> tuple[int, float]:
    return int(success_of(traj, task)), path_score(traj, task.gold_calls)


def task_grader(task) -> Callable[[Trajectory], float]:
    return lambda traj: success_of(traj, task)


@dataclass
class TaskResult:
    task_id: str
    mode: str
    success: int
    path: float
    actions_used: int
    tokens_used: int
    folds: int
    termination: str


@dataclass
class EvalReport:
    per_task: list[TaskResult]
    aggregates: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_results(cls, results: list[TaskResult]) -> "EvalReport":
        agg = {}
        for mode in dict.fromkeys(r.mode for r in results):
            rs = [r for r in results if r.mode == mode]
            agg[mode] = {
                "tasks": len(rs),
                "success_rate": sum(r.success for r in rs) / len(rs),
                "mean_path": sum(r.path for r in rs) / len(rs),
                "mean_tokens": sum(r.tokens_used for r in rs) / len(rs),
            }
        return cls(results, agg)

    @property
    def any_backend_error(self) -> bool:
        return any(r.termination == "backend_error" for r in self.per_task)

    def to_dict(self) -> dict:
        return {"per_task": [asdict(r) for r in self.per_task], "aggregates": self.aggregates}

    def table(self) -> str:
        lines = [f"{'task':<36} {'mode':<9} {'succ':>4} {'path':>6} {'acts':>4} {'tokens':>7} {'folds':>5}  termination"]
        for r in self.per_task:
            lines.append(f"{r.task_id:<36} {r.mode:<9} {r.success:>4} {r.path:>6.3f} {r.actions_used:>4} "
                         f"{r.tokens_used:>7} {r.folds:>5}  {r.termination}")
        for mode, a in self.aggregates.items():
            lines.append(f"[{mode}] tasks={a['tasks']} success_rate={a['success_rate']:.3f} "
                         f"mean_path={a['mean_path']:.3f} mean_tokens={a['mean_tokens']:.1f}")
        return "\n".join(lines) + "\n"


def prepare_registry(task, embedder=None, index: bool = True) -> ToolRegistry:
    reg = task.build_registry()
    if index:
        reg.build_index(embedder or HashingEmbedder())
    return reg


def run_task(task, config: EpisodeConfig, policy_factory, mode: str = "open_set", embedder=None,
             aux=None, registry: ToolRegistry | None = None) -> Trajectory:
    cfg = replace(config, tool_mode=mode)
    needs_index = mode == "open_set" and (cfg.search_enabled or cfg.upfront_retrieval)
    if registry is None or isinstance(task, TextWorldTask):
        # text-world tools carry per-episode state
        registry = prepare_registry(task, embedder, needs_index)
    ep = EpisodeTask(task.question, task.task_id, task.gold_tools)
    made = policy_factory(task, mode)
    backends = made if isinstance(made, Backends) else Backends(main=made, aux=aux)
    return run_episode(ep, registry, backends, cfg)


def _result(task, mode, traj) -> TaskResult:
    success, path = grade(traj, task)
    return TaskResult(task.task_id, mode, success, path, traj.actions_used, traj.tokens_used,
                      len(traj.folds), traj.termination)


def evaluate_suite(tasks, config: EpisodeConfig, policy_factory, modes=("open_set",), embedder=None,
                   aux=None, workers: int = 1, out_dir: str | Path | None = None) -> EvalReport:
    """Run every task in every requested mode; optionally write trajectory files."""
    embedder = embedder or HashingEmbedder()
    jobs = [(t, m) for t in tasks for m in modes]

    def one(job):
        task, mode = job
        traj = run_task(task, config, policy_factory, mode, embedder, aux)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            traj.save(Path(out_dir) / f"{task.task_id}.{mode}.trajectory.json")
        return _result(task, mode, traj)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    return EvalReport.from_results(results)


def compare_retrieval_strategies(tasks, config: EpisodeConfig, policy_factory, embedder=None,
                                 workers: int = 1) -> dict:
    """Single upfront retrieval vs. autonomous in-loop retrieval on the same tasks."""
    embedder = embedder or HashingEmbedder()
    upfront_cfg = replace(config, upfront_retrieval=True, search_enabled=False)
    auto_cfg = replace(config, upfront_retrieval=False, search_enabled=True)

    def one(task):
        reg = prepare_registry(task, embedder)
        up = run_task(task, upfront_cfg, policy_factory, "open_set", embedder, registry=reg)
        auto = run_task(task, auto_cfg, policy_factory, "open_set", embedder, registry=reg)
        return _result(task, "upfront", up), _result(task, "autonomous", auto)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one, tasks))
    else:
        pairs = [one(t) for t in tasks]
    up = EvalReport.from_results([p[0] for p in pairs])
    auto = EvalReport.from_results([p[1] for p in pairs])
    s_up = up.aggregates["upfront"]["success_rate"]
    s_auto = auto.aggregates["autonomous"]["success_rate"]
    return {
        "tasks": len(pairs),
        "upfront_success_rate": s_up,
        "autonomous_success_rate": s_auto,
        "delta": s_auto - s_up,
        "upfront": up.to_dict(),
        "autonomous": auto.to_dict(),
    }

"""Command-line entry points.

Environment variables (secrets never go in config files):

  TOOLLOOP_API_BASE / TOOLLOOP_MODEL / TOOLLOOP_API_KEY
      main chat-completions endpoint, model name and key (http backend)
  TOOLLOOP_AUX_API_BASE / TOOLLOOP_AUX_MODEL / TOOLLOOP_AUX_API_KEY
      auxiliary model for summaries, memory folds and tool simulation
  TOOLLOOP_EMBED_API_BASE / TOOLLOOP_EMBED_MODEL / TOOLLOOP_EMBED_API_KEY
      embedding endpoint for --embedder remote
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .agent import Backends, EpisodeTask, run_episode, transcript
from .backends import RemoteChatBackend, ScriptedBackend
from .config import ConfigError, RunConfig, load_config
from .environments import (TextWorldTask, compare_retrieval_strategies,
                           evaluate_suite, generate_textworld_task, generate_tool_task, load_task)
from .environments.harness import prepare_registry, task_grader
from .environments.policies import (backend_for, gold_chain_policy, hint_following_policy,
                                    textworld_gold_policy)
from .execution import ToolBackends
from .registry import HashingEmbedder, RemoteEmbedder, ToolIndex, ToolRegistry, load_toolset
from .rewards import compute_report, exact_match_grader
from .trajectory import Trajectory

log = logging.getLogger("toolloop")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def make_embedder(cfg: RunConfig):
    e = cfg.embedder
    if e.kind == "remote":
        return RemoteEmbedder(e.base_url, e.model)
    return HashingEmbedder(e.dimension, e.seed)


def builtin_policy(task, mode: str = "open_set"):
    if isinstance(task, TextWorldTask):
        return textworld_gold_policy(task)
    if task.reveal == "progressive":
        return hint_following_policy(task)
    return gold_chain_policy(task, search=(mode == "open_set"))


def make_backends(cfg: RunConfig, task=None, mode: str = "open_set") -> Backends:
    b = cfg.backend
    if b.kind == "http":
        main = RemoteChatBackend(b.base_url, b.model, b.api_key_env, b.context_window)
        aux_url = b.aux_base_url or os.environ.get("TOOLLOOP_AUX_API_BASE")
        aux = RemoteChatBackend(aux_url, b.aux_model or os.environ.get("TOOLLOOP_AUX_MODEL"),
                                b.aux_api_key_env) if aux_url else main
        return Backends(main, aux, ToolBackends(aux=aux))
    scripted = ScriptedBackend.from_file(b.fixtures, context_window=b.context_window) if b.fixtures else None
    if scripted is not None and scripted.entries:
        main = scripted
    elif task is not None:
        # no recorded responses: the task's own scripted policy plays the episode
        main = backend_for(builtin_policy(task, mode))
    else:
        raise ConfigError("scripted backend needs --fixtures")
    aux = scripted
    if b.kind == "simulated" and (scripted is None or not scripted.tool_table):
        aux_url = b.aux_base_url or os.environ.get("TOOLLOOP_AUX_API_BASE")
        if not aux_url:
            raise ConfigError("simulated backend needs tool entries in --fixtures or an aux endpoint "
                              "(TOOLLOOP_AUX_API_BASE)")
        aux = RemoteChatBackend(aux_url, b.aux_model or os.environ.get("TOOLLOOP_AUX_MODEL"), b.aux_api_key_env)
    return Backends(main, aux, ToolBackends(aux=aux, force_simulated=(b.kind == "simulated")))


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    ep = cfg.episode
    if getattr(args, "mode", None):
        ep = replace(ep, tool_mode=args.mode)
    if getattr(args, "fold", None):
        ep = replace(ep, fold_enabled=args.fold == "on")
    if getattr(args, "k", None):
        ep = replace(ep, retrieval_k=args.k)
    if getattr(args, "max_actions", None):
        ep = replace(ep, max_actions=args.max_actions)
    be = cfg.backend
    if getattr(args, "backend", None):
        be = replace(be, kind=args.backend)
    if getattr(args, "fixtures", None):
        be = replace(be, fixtures=args.fixtures)
    return replace(cfg, episode=ep, backend=be)


def _episode_task(task) -> EpisodeTask:
    return EpisodeTask(task.question, task.task_id, task.gold_tools)


# -- commands -----------------------------------------------------------------

def cmd_index(args) -> int:
    cfg = load_config(args.config)
    if args.dim or args.seed is not None or args.embedder:
        cfg = replace(cfg, embedder=replace(cfg.embedder, dimension=args.dim or cfg.embedder.dimension,
                                            seed=cfg.embedder.seed if args.seed is None else args.seed,
                                            kind=args.embedder or cfg.embedder.kind))
    docs = load_toolset(args.toolset)
    index = ToolRegistry(docs).build_index(make_embedder(cfg))
    index.save(args.out)
    check = ToolIndex.load(args.out)
    if len(check) != len(docs):
        print("index verification failed", file=sys.stderr)
        return 1
    print(f"indexed {len(check)} tools, dimension {check.dimension} -> {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    task = load_task(args.task)
    mode = cfg.episode.tool_mode
    needs_index = mode == "open_set"
    registry = prepare_registry(task, make_embedder(cfg), needs_index)
    backends = make_backends(cfg, task, mode)
    traj = run_episode(_episode_task(task), registry, backends, cfg.episode, created_at=_now())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj_path = out / f"{task.task_id}.trajectory.json"
    traj.save(traj_path)
    (out / f"{task.task_id}.transcript.txt").write_text(transcript(traj))
    Trajectory.load(traj_path)
    print(f"final answer: {traj.final_answer}")
    print(f"termination: {traj.termination}; actions used: {traj.actions_used}/{cfg.episode.max_actions}; "
          f"tokens used: {traj.tokens_used}/{cfg.episode.max_total_tokens}; folds: {len(traj.folds)}")
    return 0 if traj.termination != "backend_error" else 1


def _expand(patterns, base: Path) -> list[Path]:
    if isinstance(patterns, str):
        patterns = [patterns]
    paths = []
    for p in patterns:
        p = str(base / p) if not os.path.isabs(p) else p
        hits = sorted(glob.glob(p))
        paths.extend(Path(h) for h in hits if Path(h).name != "gold.json")
    return paths


def cmd_eval(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = yaml.safe_load(manifest_path.read_text()) or {}
    unknown = set(manifest) - {"tasks", "modes", "overrides", "workers"}
    if unknown:
        raise ConfigError(f"unknown manifest keys {sorted(unknown)}")
    cfg = load_config(args.config)
    if manifest.get("overrides"):
        try:
            cfg = replace(cfg, episode=replace(cfg.episode, **manifest["overrides"]))
        except TypeError as e:
            raise ConfigError(f"manifest overrides: {e}") from e
    cfg = apply_overrides(cfg, args)
    tasks = [load_task(p) for p in _expand(manifest["tasks"], manifest_path.parent)]
    if not tasks:
        print("manifest matched no task files", file=sys.stderr)
        return 1
    modes = [args.mode] if args.mode else manifest.get("modes", cfg.eval.modes)
    workers = args.workers or manifest.get("workers", cfg.eval.workers)
    out = Path(args.out)

    report = evaluate_suite(tasks, cfg.episode, lambda t, m: make_backends(cfg, t, m), modes,
                            make_embedder(cfg), None, workers, out / "trajectories")
    (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    (out / "eval_report.txt").write_text(report.table())
    json.loads((out / "eval_report.json").read_text())
    print(report.table(), end="")
    return 1 if report.any_backend_error else 0


def cmd_compare(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = yaml.safe_load(manifest_path.read_text()) or {}
    cfg = apply_overrides(load_config(args.config), args)
    tasks = [load_task(p) for p in _expand(manifest["tasks"], manifest_path.parent)]
    result = compare_retrieval_strategies(tasks, cfg.episode, lambda t, m: make_backends(cfg, t, m),
                                          make_embedder(cfg), args.workers or cfg.eval.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "retrieval_comparison.json").write_text(json.dumps(result, indent=1) + "\n")
    print(f"upfront retrieval success:    {result['upfront_success_rate']:.3f}")
    print(f"autonomous retrieval success: {result['autonomous_success_rate']:.3f}")
    print(f"delta:                        {result['delta']:+.3f}")
    return 0


def _gold_for(entry):
    return exact_match_grader(entry["gold_answer"]), [(n, a) for n, a in entry.get("gold_calls", [])]


def cmd_advantages(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.reward
    overrides = {k: v for k, v in (("call_weight", args.call_weight), ("fold_weight", args.fold_weight),
                                   ("clip_epsilon", args.epsilon), ("aggregation", args.aggregation)) if v is not None}
    if args.grpo_only:
        overrides["grpo_only"] = True
    spec = replace(spec, **overrides)
    gold = json.loads(Path(args.gold).read_text())
    groups: dict[str, list[Trajectory]] = defaultdict(list)
    for p in sorted(glob.glob(args.trajectories)):
        t = Trajectory.load(p)
        groups[t.task_id].append(t)
    if not groups:
        print("no trajectories matched", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for task_id, group in sorted(groups.items()):
        if task_id not in gold:
            print(f"no gold labels for {task_id}", file=sys.stderr)
            return 1
        if len(group) < 2:
            print(f"{task_id}: a group needs at least two trajectories", file=sys.stderr)
            return 1
        entry = gold[task_id]
        if entry.get("kind") == "textworld":
            graders = task_grader(TextWorldTask.from_dict(entry["task"]))
            calls = [(n, a) for n, a in entry.get("gold_calls", [])]
        else:
            graders, calls = _gold_for(entry)
        report = compute_report(group, graders, calls, spec)
        (out / f"{task_id}.advantages.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n")
        (out / f"{task_id}.tokens.tsv").write_text(report.token_table())
        json.loads((out / f"{task_id}.advantages.json").read_text())
        print(f"{task_id}: K={len(group)} loss={report.loss:.6f} success_adv={[round(a, 4) for a in report.success_adv]}")
    return 0


def cmd_gen_tasks(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gold = {}
    for i in range(args.count):
        seed = args.seed + i
        if args.kind == "textworld":
            task = generate_textworld_task(seed)
            gold[task.task_id] = {"kind": "textworld", "gold_answer": task.gold_answer,
                                  "gold_calls": [[n, a] for n, a in task.gold_calls], "task": task.to_dict()}
        else:
            task = generate_tool_task(seed, args.n, args.depth, reveal=args.reveal)
            gold[task.task_id] = {"gold_answer": task.gold_answer,
                                  "gold_calls": [[n, a] for n, a in task.gold_calls]}
        path = out / f"{task.task_id}.json"
        task.save(path)
        if load_task(path).to_dict() != task.to_dict():
            print(f"round-trip check failed for {path}", file=sys.stderr)
            return 1
    (out / "gold.json").write_text(json.dumps(gold, indent=1) + "\n")
    print(f"wrote {args.count} {args.kind} tasks and gold.json to {out}")
    return 0


def _add_run_flags(p):
    p.add_argument("--config", help="YAML/JSON run configuration")
    p.add_argument("--mode", choices=["labeled", "open_set"])
    p.add_argument("--fold", choices=["on", "off"])
    p.add_argument("--k", type=int, help="tools returned per tool_search")
    p.add_argument("--max-actions", type=int)
    p.add_argument("--backend", choices=["http", "scripted", "simulated"],
                   help="http: remote endpoints; scripted: fixture replay (built-in task policy when no "
                        "--fixtures); simulated: like scripted but every tool call goes to the tool simulator")
    p.add_argument("--fixtures", help="fixture file for the scripted backend")
    p.add_argument("--out", default="out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolloop", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="embed a toolset file and write an index")
    p.add_argument("toolset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--embedder", choices=["hashing", "remote"])
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("run", help="run one episode")
    p.add_argument("task")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="run a suite manifest and write an EvalReport")
    p.add_argument("manifest")
    p.add_argument("--workers", type=int)
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="upfront vs. autonomous tool retrieval on a suite")
    p.add_argument("manifest")
    p.add_argument("--workers", type=int)
    _add_run_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("advantages", help="group rewards, advantages and clipped surrogate terms")
    p.add_argument("trajectories", help="glob of trajectory files")
    p.add_argument("--gold", required=True)
    p.add_argument("--config")
    p.add_argument("--call-weight", type=float)
    p.add_argument("--fold-weight", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--aggregation", choices=["sum", "token-mean", "trajectory-mean"])
    p.add_argument("--grpo-only", action="store_true")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_advantages)

    p = sub.add_parser("gen-tasks", help="write deterministic task files")
    p.add_argument("--kind", choices=["toolqa", "textworld"], default="toolqa")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=8, help="tools per task")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--reveal", choices=["question", "progressive"], default="question")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tasks)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

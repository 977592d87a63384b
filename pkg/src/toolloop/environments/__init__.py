"""Desk-scale task families, scripted policies and the evaluation harness."""

from .harness import (EvalReport, TaskResult, compare_retrieval_strategies, evaluate_suite, grade,
                      load_task, path_score, run_task, task_grader)
from .textworld import TextWorldTask, generate_textworld_task, solve
from .toolqa import SyntheticToolTask, generate_tool_task

__all__ = [
    "EvalReport", "TaskResult", "compare_retrieval_strategies", "evaluate_suite", "grade", "load_task",
    "path_score", "run_task", "task_grader", "TextWorldTask", "generate_textworld_task", "solve",
    "SyntheticToolTask", "generate_tool_task",
]

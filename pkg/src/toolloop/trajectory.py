"""Episode records shared by the runtime, memory folding and reward computation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .protocol import (MEMORY_FOLD, TOOL_CALL, TOOL_SEARCH, ActionEvent, MalformedCall,
                       Observation, ToolCallRequest, parse_tool_call)

TRAJECTORY_VERSION = 1
TERMINATIONS = ("answered", "action_limit", "token_limit", "backend_error")


@dataclass
class Step:
    action: ActionEvent
    observation: Observation | None = None
    token_span: tuple[int, int] = (0, 0)
    status: str | None = None   # ToolResult status for calls, "ok"/"error" for searches

    @property
    def kind(self) -> str:
        return self.action.kind

    def call(self) -> ToolCallRequest | None:
        if self.kind != TOOL_CALL:
            return None
        try:
            return parse_tool_call(self.action.payload)
        except MalformedCall:
            return None

    def to_dict(self) -> dict:
        return {
            "action": self.action.to_dict(),
            "observation": None if self.observation is None else
            {"kind": self.observation.kind, "content": self.observation.content},
            "token_span": list(self.token_span),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Step":
        obs = d.get("observation")
        return cls(ActionEvent.from_dict(d["action"]),
                   None if obs is None else Observation(obs["kind"], obs["content"]),
                   tuple(d["token_span"]), d.get("status"))


@dataclass
class Trajectory:
    question: str
    instruction: str = ""
    task_id: str = ""
    steps: list[Step] = field(default_factory=list)
    generated_tokens: list[tuple[str, float | None]] = field(default_factory=list)
    folds: list[tuple[int, dict]] = field(default_factory=list)
    final_answer: str | None = None
    termination: str | None = None
    fold_enabled: bool = False
    mode: str = "open_set"
    created_at: str = ""

    @property
    def generated_text(self) -> str:
        return "".join(p for p, _ in self.generated_tokens)

    @property
    def actions_used(self) -> int:
        return sum(1 for s in self.steps if s.kind in (TOOL_SEARCH, TOOL_CALL, MEMORY_FOLD))

    @property
    def tokens_used(self) -> int:
        return len(self.generated_tokens)

    def call_steps(self) -> list[Step]:
        return [s for s in self.steps if s.kind == TOOL_CALL]

    def to_dict(self) -> dict:
        return {
            "format": "toolloop-trajectory",
            "version": TRAJECTORY_VERSION,
            "created_at": self.created_at,
            "task_id": self.task_id,
            "question": self.question,
            "instruction": self.instruction,
            "mode": self.mode,
            "fold_enabled": self.fold_enabled,
            "steps": [s.to_dict() for s in self.steps],
            "generated_tokens": [[p, lp] for p, lp in self.generated_tokens],
            "folds": [[i, snap] for i, snap in self.folds],
            "final_answer": self.final_answer,
            "termination": self.termination,
            "budgets": {"actions_used": self.actions_used, "tokens_used": self.tokens_used},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        if d.get("version") != TRAJECTORY_VERSION:
            raise ValueError(f"unsupported trajectory version {d.get('version')!r}")
        return cls(
            question=d["question"], instruction=d.get("instruction", ""), task_id=d.get("task_id", ""),
            steps=[Step.from_dict(s) for s in d["steps"]],
            generated_tokens=[(p, lp) for p, lp in d["generated_tokens"]],
            folds=[(i, snap) for i, snap in d.get("folds", [])],
            final_answer=d.get("final_answer"), termination=d.get("termination"),
            fold_enabled=d.get("fold_enabled", False), mode=d.get("mode", "open_set"),
            created_at=d.get("created_at", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n"

    def save(self, path: str | Path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        return cls.from_dict(json.loads(Path(path).read_text()))

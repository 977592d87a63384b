"""Runtime for single-stream tool-using reasoning agents, with memory folding
and per-token advantage computation for recorded rollouts."""

from .agent import Backends, EpisodeConfig, EpisodeTask, answer_of, run_episode, transcript
from .protocol import ActionEvent, Observation, Scanner, ToolCallRequest, parse_tool_call, render_observation
from .registry import HashingEmbedder, ToolDoc, ToolRegistry
from .trajectory import Trajectory

__version__ = "0.1.0"

__all__ = [
    "Backends", "EpisodeConfig", "EpisodeTask", "answer_of", "run_episode", "transcript",
    "ActionEvent", "Observation", "Scanner", "ToolCallRequest", "parse_tool_call", "render_observation",
    "HashingEmbedder", "ToolDoc", "ToolRegistry", "Trajectory",
]

import json
from pathlib import Path

import pytest

from toolloop.registry import ToolDoc, ToolRegistry, load_toolset

FIXTURES = Path(__file__).parent / "fixtures"


def doc(name, desc="", params=None, required=None, source="local", **kw):
    props = params if params is not None else {"x": {"type": "string"}}
    return ToolDoc(name, desc or f"tool {name}",
                   {"type": "object", "properties": props, "required": list(required if required is not None else props)},
                   source, **kw)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def film_tools():
    return load_toolset(FIXTURES / "film_festival_tools.json")


@pytest.fixture
def film_question():
    return json.loads((FIXTURES / "film_festival_task.json").read_text())["question"]


@pytest.fixture
def echo_registry():
    reg = ToolRegistry()
    reg.register_tool(doc("echo", "repeat the text back", {"text": {"type": "string"}}), lambda text: text)
    reg.register_tool(doc("add", "add two integers", {"a": {"type": "integer"}, "b": {"type": "integer"}}),
                      lambda a, b: a + b)
    return reg


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

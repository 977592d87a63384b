"""A small deterministic household text world driven by nine verb tools."""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from ..protocol import ToolCallRequest
from ..registry import ToolDoc, ToolRegistry

ROOM_NAMES = ["kitchen", "hall", "study", "bedroom", "pantry", "garage", "attic", "cellar", "porch"]
ITEMS = ["apple", "key", "mug", "book", "coin", "candle", "towel", "spoon"]
RECEPTACLES = {"fridge": True, "drawer": True, "cabinet": True, "table": False, "shelf": False, "basket": False}
SWITCHES = ["lamp", "radio", "fan"]
DIRECTIONS = {"north": (0, -1), "south": (0, 1), "east": (1, 0), "west": (-1, 0)}
MAX_SOLUTION = 30


def _p(desc, **props):
    required = list(props)
    return {"type": "object",
            "properties": {k: {"type": "string", "description": v} for k, v in props.items()},
            "required": required}


VERB_TOOLS = [
    ToolDoc("move", "Walk to the adjacent room in a direction (north, south, east or west).", _p("m", direction="north, south, east or west")),
    ToolDoc("take", "Pick up an item in the current room and carry it.", _p("t", object="item to pick up")),
    ToolDoc("put", "Place a carried item into or onto a receptacle in the current room.", _p("p", object="carried item", receptacle="target receptacle")),
    ToolDoc("open", "Open a closed container in the current room.", _p("o", target="container to open")),
    ToolDoc("close", "Close an open container in the current room.", _p("c", target="container to close")),
    ToolDoc("toggle", "Switch a device in the current room on or off.", _p("s", target="device to switch")),
    ToolDoc("examine", "Describe one object in the current room in detail.", _p("e", target="object to examine")),
    ToolDoc("inventory", "List the items you are carrying.", {"type": "object", "properties": {}, "required": []}),
    ToolDoc("look", "Describe the current room and where every object in the house is.", {"type": "object", "properties": {}, "required": []}),
]


class ActionFailed(Exception):
    pass


@dataclass
class TextWorldTask:
    seed: int
    width: int
    height: int
    rooms: dict[str, list[int]]                 # name -> [x, y]
    items: dict[str, list[str]]                 # item -> [room, receptacle or ""]
    receptacles: dict[str, list]                # name -> [room, openable, open]
    switches: dict[str, list]                   # name -> [room, on]
    start: str
    goal: dict                                  # {"type": "put", "object", "receptacle"} | {"type": "toggle", "target", "on"}
    gold_calls: list[tuple[str, dict]] = field(default_factory=list)

    @property
    def task_id(self) -> str:
        return f"textworld-s{self.seed}"

    @property
    def question(self) -> str:
        g = self.goal
        if g["type"] == "put":
            what = f"put the {g['object']} in the {g['receptacle']}"
        else:
            what = f"turn the {g['target']} {'on' if g['on'] else 'off'}"
        return (f"You are in the {self.start} of a small house. Your task: {what}. "
                "Use the household action tools; reply with <final_answer>done</final_answer> when finished.")

    @property
    def gold_answer(self) -> str:
        return "done"

    @property
    def gold_tools(self) -> list[ToolDoc]:
        return list(VERB_TOOLS)

    def new_world(self) -> "World":
        return World(self)

    def build_registry(self, world: "World | None" = None) -> ToolRegistry:
        world = world or self.new_world()
        reg = ToolRegistry()
        for doc in VERB_TOOLS:
            reg.register_tool(doc, world.tool(doc.name), serialize=True)
        return reg

    def goal_reached(self, calls) -> bool:
        """Replay calls on a fresh world and check the goal predicate."""
        w = self.new_world()
        for c in calls:
            if c is None:
                continue
            name, args = (c.name, c.arguments) if isinstance(c, ToolCallRequest) else c
            try:
                w.act(name, args)
            except (ActionFailed, TypeError):
                pass
        return w.goal_reached()

    def to_dict(self) -> dict:
        d = {k: v for k, v in vars(self).items()}
        d["kind"] = "textworld"
        d["task_id"] = self.task_id
        d["question"] = self.question
        d["gold_calls"] = [[n, a] for n, a in self.gold_calls]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TextWorldTask":
        fields = ("seed", "width", "height", "rooms", "items", "receptacles", "switches", "start", "goal")
        t = cls(**{k: d[k] for k in fields})
        t.gold_calls = [(n, a) for n, a in d.get("gold_calls", [])]
        return t

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


class World:
    def __init__(self, task: TextWorldTask):
        self.task = task
        self.here = task.start
        self.items = {k: list(v) for k, v in task.items.items()}
        self.containers = {k: list(v) for k, v in task.receptacles.items()}
        self.switches = {k: list(v) for k, v in task.switches.items()}
        self.carrying: list[str] = []
        self._pos = {n: tuple(p) for n, p in task.rooms.items()}
        self._at = {p: n for n, p in self._pos.items()}

    def exits(self, room=None) -> dict[str, str]:
        x, y = self._pos[room or self.here]
        out = {}
        for d, (dx, dy) in DIRECTIONS.items():
            n = self._at.get((x + dx, y + dy))
            if n:
                out[d] = n
        return out

    def _visible(self, name):
        if name in self.containers:
            return self.containers[name][0] == self.here
        if name in self.switches:
            return self.switches[name][0] == self.here
        if name in self.items:
            room, rec = self.items[name]
            if room != self.here:
                return False
            return not rec or not self.containers[rec][1] or self.containers[rec][2]
        return False

    def act(self, verb: str, args: dict) -> str:
        fn = getattr(self, f"_do_{verb}", None)
        if fn is None:
            raise ActionFailed(f"unknown action {verb}")
        return fn(**args)

    def _do_move(self, direction):
        ex = self.exits()
        if direction not in ex:
            raise ActionFailed(f"You cannot go {direction} from the {self.here}.")
        self.here = ex[direction]
        return f"You enter the {self.here}."

    def _do_take(self, object):
        if object not in self.items or not self._visible(object):
            raise ActionFailed(f"There is no {object} here.")
        self.items[object] = ["", ""]
        self.carrying.append(object)
        return f"You take the {object}."

    def _do_put(self, object, receptacle):
        if object not in self.carrying:
            raise ActionFailed(f"You are not carrying the {object}.")
        if receptacle not in self.containers or not self._visible(receptacle):
            raise ActionFailed(f"There is no {receptacle} here.")
        room, openable, is_open = self.containers[receptacle]
        if openable and not is_open:
            raise ActionFailed(f"The {receptacle} is closed.")
        self.carrying.remove(object)
        self.items[object] = [self.here, receptacle]
        return f"You put the {object} in the {receptacle}."

    def _set_open(self, target, value):
        if target not in self.containers or not self._visible(target):
            raise ActionFailed(f"There is no {target} here.")
        c = self.containers[target]
        if not c[1]:
            raise ActionFailed(f"The {target} cannot be opened or closed.")
        if c[2] == value:
            raise ActionFailed(f"The {target} is already {'open' if value else 'closed'}.")
        c[2] = value
        return f"You {'open' if value else 'close'} the {target}."

    def _do_open(self, target):
        return self._set_open(target, True)

    def _do_close(self, target):
        return self._set_open(target, False)

    def _do_toggle(self, target):
        if target not in self.switches or not self._visible(target):
            raise ActionFailed(f"There is no {target} here.")
        s = self.switches[target]
        s[1] = not s[1]
        return f"The {target} is now {'on' if s[1] else 'off'}."

    def _do_examine(self, target):
        if target in self.carrying:
            return f"You are holding the {target}."
        if not self._visible(target):
            raise ActionFailed(f"There is no {target} here.")
        if target in self.containers:
            _, openable, is_open = self.containers[target]
            inside = sorted(i for i, (r, rec) in self.items.items() if rec == target)
            state = "" if not openable else (" It is open." if is_open else " It is closed.")
            content = f" It holds: {', '.join(inside)}." if inside and (is_open or not openable) else ""
            return f"A {target}.{state}{content}"
        if target in self.switches:
            return f"A {target}. It is {'on' if self.switches[target][1] else 'off'}."
        return f"A {target}."

    def _do_inventory(self):
        return f"You carry: {', '.join(self.carrying)}." if self.carrying else "You carry nothing."

    def _do_look(self):
        ex = self.exits()
        lines = [f"You are in the {self.here}. Exits: " + ", ".join(f"{d} to the {r}" for d, r in sorted(ex.items())) + "."]
        for name, (room, openable, is_open) in sorted(self.containers.items()):
            state = "" if not openable else (" (open)" if is_open else " (closed)")
            lines.append(f"The {name}{state} is in the {room}.")
        for name, (room, rec) in sorted(self.items.items()):
            if not room:
                continue
            lines.append(f"The {name} is in the {rec} in the {room}." if rec else f"The {name} is in the {room}.")
        for name, (room, on) in sorted(self.switches.items()):
            lines.append(f"The {name} ({'on' if on else 'off'}) is in the {room}.")
        return " ".join(lines)

    def goal_reached(self) -> bool:
        g = self.task.goal
        if g["type"] == "put":
            room, rec = self.items[g["object"]]
            return rec == g["receptacle"]
        return self.switches[g["target"]][1] == g["on"]

    def tool(self, verb: str):
        def run(**kwargs):
            try:
                return self.act(verb, kwargs)
            except ActionFailed as e:
                raise RuntimeError(str(e)) from None
        run.__name__ = verb
        return run


def _path(task: TextWorldTask, src: str, dst: str) -> list[str]:
    w = World(task)
    prev = {src: None}
    q = deque([src])
    while q:
        r = q.popleft()
        if r == dst:
            break
        for d, n in sorted(w.exits(r).items()):
            if n not in prev:
                prev[n] = (r, d)
                q.append(n)
    dirs = []
    r = dst
    while prev[r] is not None:
        r, d = prev[r]
        dirs.append(d)
    return dirs[::-1]


def solve(task: TextWorldTask) -> list[tuple[str, dict]]:
    """Scripted solver: shortest walk plus the needed open/take/put/toggle actions."""
    calls: list[tuple[str, dict]] = [("look", {})]
    here = task.start
    g = task.goal

    def walk(to):
        nonlocal here
        for d in _path(task, here, to):
            calls.append(("move", {"direction": d}))
        here = to

    if g["type"] == "put":
        room, rec = task.items[g["object"]]
        walk(room)
        if rec and task.receptacles[rec][1] and not task.receptacles[rec][2]:
            calls.append(("open", {"target": rec}))
        calls.append(("take", {"object": g["object"]}))
        target_room, openable, is_open = task.receptacles[g["receptacle"]]
        walk(target_room)
        if openable and not (is_open or (g["receptacle"] == rec)):
            calls.append(("open", {"target": g["receptacle"]}))
        calls.append(("put", {"object": g["object"], "receptacle": g["receptacle"]}))
    else:
        walk(task.switches[g["target"]][0])
        calls.append(("toggle", {"target": g["target"]}))
    return calls


def generate_textworld_task(seed: int, width: int = 3, height: int = 2) -> TextWorldTask:
    rng = random.Random(seed)
    cells = [(x, y) for y in range(height) for x in range(width)]
    names = rng.sample(ROOM_NAMES, len(cells))
    rooms = {n: list(c) for n, c in zip(names, cells)}
    recs = {}
    for name in rng.sample(sorted(RECEPTACLES), 4):
        openable = RECEPTACLES[name]
        recs[name] = [rng.choice(names), openable, False if openable else True]
    items = {}
    for name in rng.sample(ITEMS, 3):
        rec = rng.choice(sorted(recs) + [""])
        items[name] = [recs[rec][0] if rec else rng.choice(names), rec]
    switches = {name: [rng.choice(names), rng.random() < 0.5] for name in rng.sample(SWITCHES, 2)}
    if rng.random() < 0.7:
        obj = rng.choice(sorted(items))
        target = rng.choice([r for r in sorted(recs) if r != items[obj][1]])
        goal = {"type": "put", "object": obj, "receptacle": target}
    else:
        sw = rng.choice(sorted(switches))
        goal = {"type": "toggle", "target": sw, "on": not switches[sw][1]}
    task = TextWorldTask(seed, width, height, rooms, items, recs, switches, rng.choice(names), goal)
    task.gold_calls = solve(task)
    if len(task.gold_calls) > MAX_SOLUTION or not task.goal_reached(task.gold_calls):
        raise AssertionError(f"seed {seed}: solver failed")  # construction guarantees this
    return task

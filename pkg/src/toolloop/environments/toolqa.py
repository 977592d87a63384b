"""Synthetic multi-hop tool QA (value-passing lookup chains with near-miss distractors)."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from ..registry import ToolDoc, ToolRegistry

ENTITY_TYPES = [
    "person", "city", "country", "company", "river", "book", "film", "band",
    "university", "museum", "island", "mountain", "festival", "newspaper",
]
RELATIONS = [
    "founder", "capital", "mayor", "author", "director", "birthplace", "headquarters",
    "publisher", "sponsor", "rival", "mascot", "curator", "owner", "patron", "neighbor",
    "successor", "archivist", "architect", "treasurer", "landmark", "twin", "ambassador",
    "producer", "editor",
]
_SYLLABLES = ["ka", "lo", "mi", "ra", "ve", "no", "tu", "sa", "di", "qu", "el", "ar",
              "is", "on", "be", "fa", "go", "hy", "ju", "ze", "pi", "wo", "xe", "ul"]

FINAL_HINT = "this is the final answer"


def _entity(rng: random.Random, used: set) -> str:
    while True:
        name = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 4))).capitalize()
        if name not in used:
            used.add(name)
            return name


def tool_name(relation: str, domain: str) -> str:
    return f"get_{relation}_of_{domain}"


def tool_description(relation: str, domain: str, range_: str) -> str:
    return (f"Returns the {relation} of the given {domain}. "
            f"Input: the {domain} name. Output: the {range_} name.")


def _doc(name: str, relation: str, domain: str, range_: str) -> ToolDoc:
    param = f"{domain}_name"
    return ToolDoc(
        name=name,
        description=tool_description(relation, domain, range_),
        parameters={"type": "object",
                    "properties": {param: {"type": "string", "description": f"Name of the {domain}."}},
                    "required": [param]},
    )


@dataclass
class Hop:
    tool: str
    relation: str
    domain: str
    range: str


@dataclass
class SyntheticToolTask:
    seed: int
    n_tools: int
    depth: int
    question: str
    toolset: list[ToolDoc]
    gold_calls: list[tuple[str, dict]]
    gold_answer: str
    hops: list[Hop] = field(default_factory=list)
    start_entity: str = ""
    tables: dict[str, dict[str, dict]] = field(default_factory=dict)
    reveal: str = "question"

    @property
    def task_id(self) -> str:
        return f"toolqa-s{self.seed}-n{self.n_tools}-d{self.depth}" + ("-p" if self.reveal == "progressive" else "")

    @property
    def gold_tool_names(self) -> list[str]:
        return [h.tool for h in self.hops]

    @property
    def gold_tools(self) -> list[ToolDoc]:
        by_name = {d.name: d for d in self.toolset}
        return [by_name[n] for n in self.gold_tool_names]

    def tool_function(self, name: str):
        doc = next(d for d in self.toolset if d.name == name)
        param = doc.parameters["required"][0]
        domain = param[: -len("_name")]
        table = self.tables[name]

        def lookup(**kwargs):
            key = kwargs[param]
            if key not in table:
                raise LookupError(f"no {domain} named {key!r}")
            return json.dumps(table[key], ensure_ascii=False)
        lookup.__name__ = name
        return lookup

    def build_registry(self, include_distractors: bool = True) -> ToolRegistry:
        reg = ToolRegistry()
        gold = set(self.gold_tool_names)
        for doc in self.toolset:
            if include_distractors or doc.name in gold:
                reg.register_tool(doc, self.tool_function(doc.name))
        return reg

    def execute_gold(self) -> str:
        """Run the gold chain directly against the local tools."""
        value = None
        for name, args in self.gold_calls:
            out = json.loads(self.tool_function(name)(**args))
            value = out["value"]
        return value

    def to_dict(self) -> dict:
        return {
            "kind": "toolqa",
            "seed": self.seed, "n_tools": self.n_tools, "depth": self.depth, "reveal": self.reveal,
            "task_id": self.task_id,
            "question": self.question,
            "start_entity": self.start_entity,
            "toolset": [d.to_dict() for d in self.toolset],
            "hops": [vars(h) for h in self.hops],
            "gold_calls": [[n, a] for n, a in self.gold_calls],
            "gold_answer": self.gold_answer,
            "tables": self.tables,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticToolTask":
        return cls(
            seed=d["seed"], n_tools=d["n_tools"], depth=d["depth"], question=d["question"],
            toolset=[ToolDoc.from_dict(t) for t in d["toolset"]],
            gold_calls=[(n, a) for n, a in d["gold_calls"]], gold_answer=d["gold_answer"],
            hops=[Hop(**h) for h in d.get("hops", [])], start_entity=d.get("start_entity", ""),
            tables=d["tables"], reveal=d.get("reveal", "question"),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, ensure_ascii=False) + "\n")


def _hint(hops: list[Hop], i: int) -> str:
    if i + 1 >= len(hops):
        return FINAL_HINT
    nxt = hops[i + 1]
    return f"look up the {nxt.relation} of this {nxt.domain}"


def generate_tool_task(seed: int, n_tools: int = 8, depth: int = 3, reveal: str = "question") -> SyntheticToolTask:
    """Build a deterministic chain task.

    Hop ``i`` maps the current entity to the next one; the remaining
    ``n_tools - depth`` tools are near-miss copies of chain tools with one noun
    swapped.
    """
    if not 3 <= depth <= 7:
        raise ValueError("depth must be in [3, 7]")
    if n_tools < depth:
        raise ValueError("n_tools must be >= depth")
    if reveal not in ("question", "progressive"):
        raise ValueError("reveal must be 'question' or 'progressive'")
    rng = random.Random(seed)
    types = [rng.choice(ENTITY_TYPES)]
    for _ in range(depth):
        types.append(rng.choice([t for t in ENTITY_TYPES if t != types[-1]]))
    hops: list[Hop] = []
    pairs = set()
    for i in range(depth):
        rel = rng.choice([r for r in RELATIONS if (r, types[i]) not in pairs])
        pairs.add((rel, types[i]))
        hops.append(Hop(tool_name(rel, types[i]), rel, types[i], types[i + 1]))

    used: set = set()
    chain = [_entity(rng, used) for _ in range(depth + 1)]
    docs = [_doc(h.tool, h.relation, h.domain, h.range) for h in hops]
    tables: dict[str, dict[str, dict]] = {}
    for i, h in enumerate(hops):
        table = {chain[i]: {"value": chain[i + 1], h.range: chain[i + 1]}}
        for _ in range(rng.randint(1, 3)):
            table[_entity(rng, used)] = {"value": _entity(rng, used)}
        for k, v in table.items():
            v.setdefault(h.range, v["value"])
            if reveal == "progressive":
                v["next"] = _hint(hops, i) if k == chain[i] else FINAL_HINT
        tables[h.tool] = table

    names = {d.name for d in docs}
    for j in range(n_tools - depth):
        src = hops[rng.randrange(depth)]
        rel, dom = src.relation, src.domain
        if rng.random() < 0.5:
            rel = rng.choice([r for r in RELATIONS if r != rel and (r, dom) not in pairs])
        else:
            dom = rng.choice([t for t in ENTITY_TYPES if t != dom and (rel, t) not in pairs])
        name = base = tool_name(rel, dom)
        n = 2
        while name in names:
            name = f"{base}_v{n}"
            n += 1
        names.add(name)
        docs.append(_doc(name, rel, dom, src.range))
        table = {}
        # near misses answer for the chain entities too, with wrong values
        for e in chain[:-1] if rng.random() < 0.5 else []:
            table[e] = {"value": _entity(rng, used)}
        table[_entity(rng, used)] = {"value": _entity(rng, used)}
        for v in table.values():
            v[src.range] = v["value"]
            if reveal == "progressive":
                v["next"] = FINAL_HINT
        tables[name] = table
    order = list(range(len(docs)))
    rng.shuffle(order)
    docs = [docs[i] for i in order]

    if reveal == "question":
        chain_text = " of the ".join(h.relation for h in reversed(hops))
        question = (f"What is the {chain_text} of the {hops[0].domain} '{chain[0]}'? "
                    f"Answer with the {hops[-1].range} name only.")
    else:
        question = (f"Start from the {hops[0].domain} '{chain[0]}' and look up its {hops[0].relation}. "
                    "Each result says what to look up next; follow the hints until a result says "
                    "it is the final answer, then answer with that name only.")
    gold_calls = [(h.tool, {f"{h.domain}_name": chain[i]}) for i, h in enumerate(hops)]
    return SyntheticToolTask(seed, n_tools, depth, question, docs, gold_calls, chain[-1],
                             hops, chain[0], tables, reveal)

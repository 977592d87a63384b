"""Tool documentation registry and flat dense-retrieval index."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import httpx
import numpy as np

from .errors import BackendUnavailable

SOURCES = ("local", "http", "simulated")
DEFAULT_K = 5


class DuplicateName(ValueError):
    pass


class EmptyIndex(RuntimeError):
    pass


class StaleIndex(RuntimeError):
    pass


class InvalidToolDoc(ValueError):
    pass


@dataclass
class ToolDoc:
    name: str
    description: str
    parameters: dict = field(default_factory=lambda: {"type": "object", "properties": {}, "required": []})
    source: str = "local"
    endpoint_config: dict | None = None

    def __post_init__(self):
        if not self.name or any(c.isspace() for c in self.name):
            raise InvalidToolDoc(f"bad tool name {self.name!r}")
        if self.source not in SOURCES:
            raise InvalidToolDoc(f"{self.name}: unknown source {self.source!r}")
        props = self.parameters.get("properties", {})
        missing = [p for p in self.parameters.get("required", []) if p not in props]
        if missing:
            raise InvalidToolDoc(f"{self.name}: required parameters not in properties: {missing}")

    @property
    def param_names(self) -> list[str]:
        return list(self.parameters.get("properties", {}))

    def canonical_text(self) -> str:
        return (f"name: {self.name}\ndescription: {self.description}\n"
                f"parameters: {', '.join(self.param_names)}")

    def function_definition(self) -> dict:
        """The OpenAI-style function definition shown to the model."""
        return {"name": self.name, "description": self.description, "parameters": self.parameters}

    def to_dict(self) -> dict:
        d = self.function_definition()
        d["source"] = self.source
        if self.endpoint_config is not None:
            d["endpoint_config"] = self.endpoint_config
        return d

    @classmethod
    def from_dict(cls, d: dict, source: str | None = None, endpoint_config: dict | None = None) -> "ToolDoc":
        if "function" in d and "name" not in d:
            d = d["function"]
        params = d.get("parameters") or {"type": "object", "properties": {}, "required": []}
        return cls(
            name=d["name"],
            description=d.get("description", ""),
            parameters=params,
            source=source or d.get("source", "local"),
            endpoint_config=endpoint_config if endpoint_config is not None else d.get("endpoint_config"),
        )


class ToolRegistry:
    def __init__(self, docs: Iterable[ToolDoc] = ()):
        self.docs: dict[str, ToolDoc] = {}
        self.functions: dict[str, Callable[..., Any]] = {}
        self.serialized: set[str] = set()
        self.index: ToolIndex | None = None
        self.embedder = None
        self.stale = True
        for d in docs:
            self.register_tool(d)

    def register_tool(self, doc: ToolDoc, fn: Callable[..., Any] | None = None, serialize: bool = False) -> "ToolRegistry":
        if doc.name in self.docs:
            raise DuplicateName(doc.name)
        self.docs[doc.name] = doc
        if fn is not None:
            self.functions[doc.name] = fn
        if serialize:
            self.serialized.add(doc.name)
        self.stale = True
        return self

    def get(self, name: str) -> ToolDoc | None:
        return self.docs.get(name)

    def __contains__(self, name):
        return name in self.docs

    def __len__(self):
        return len(self.docs)

    def __iter__(self):
        return iter(self.docs.values())

    def build_index(self, embedder) -> "ToolIndex":
        self.index = build_index(self, embedder)
        self.embedder = embedder
        self.stale = False
        return self.index

    def search(self, query: str, k: int = DEFAULT_K) -> "RetrievalResult":
        if self.index is None:
            raise EmptyIndex("registry has no index; call build_index first")
        if self.stale:
            raise StaleIndex("tools were registered after the index was built")
        return search(self.index, query, k, self.embedder)


# -- embedders ---------------------------------------------------------------

_TOKEN_SPLIT = re.compile(r"[^0-9A-Za-z]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


class HashingEmbedder:
    """Deterministic hashed bag-of-tokens projection."""

    def __init__(self, dimension: int = 128, seed: int = 0):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)
        self._cache: dict[str, int] = {}

    @property
    def id(self) -> str:
        return "hashing-bow-v1"

    def bucket(self, token: str) -> int:
        b = self._cache.get(token)
        if b is None:
            h = hashlib.blake2b(token.encode(), digest_size=8, key=self._key).digest()
            b = self._cache[token] = int.from_bytes(h, "little") % self.dimension
        return b

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        tokens = tokenize(text) or [text.strip()]
        v = np.zeros(self.dimension)
        for t in tokens:
            v[self.bucket(t)] += 1.0
        return v / np.linalg.norm(v)

    def embed_many(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if texts else np.zeros((0, self.dimension))


class RemoteEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, base_url: str | None = None, model: str | None = None,
                 api_key_env: str = "TOOLLOOP_EMBED_API_KEY", timeout: float = 30.0,
                 client: httpx.Client | None = None):
        self.base_url = (base_url or os.environ.get("TOOLLOOP_EMBED_API_BASE", "")).rstrip("/")
        self.model = model or os.environ.get("TOOLLOOP_EMBED_MODEL", "bge-large-en-v1.5")
        self.api_key = os.environ.get(api_key_env)
        self.client = client or httpx.Client(timeout=timeout)
        self.dimension: int | None = None
        self.seed = None

    @property
    def id(self) -> str:
        return f"remote:{self.model}"

    def embed_many(self, texts: list[str]) -> np.ndarray:
        if not self.base_url:
            raise BackendUnavailable("no embedding endpoint configured")
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.client.post(f"{self.base_url}/embeddings", headers=headers,
                                    json={"model": self.model, "input": texts})
            resp.raise_for_status()
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
        except (httpx.HTTPError, KeyError, ValueError) as e:
            raise BackendUnavailable(f"embedding request failed: {e}") from e
        m = np.asarray([d["embedding"] for d in data], dtype=float)
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise BackendUnavailable("endpoint returned a zero embedding")
        self.dimension = m.shape[1]
        return m / norms

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        return self.embed_many([text])[0]


def embed(embedder, text: str) -> np.ndarray:
    return embedder.embed(text)


# -- index -------------------------------------------------------------------

@dataclass
class RetrievalResult:
    ranked: list[tuple[str, float]]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.ranked]


@dataclass
class ToolIndex:
    dimension: int
    names: list[str]
    vectors: np.ndarray   # (n, dimension), rows unit-norm, rows sorted by name
    embedder_id: str = ""
    seed: int | None = None

    def __len__(self):
        return len(self.names)

    def save(self, path: str | Path):
        payload = {
            "header": {"format": "toolloop-index", "version": 1, "dimension": self.dimension,
                       "embedder": self.embedder_id, "seed": self.seed, "count": len(self.names)},
            "entries": [[n, v.tolist()] for n, v in zip(self.names, self.vectors)],
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "ToolIndex":
        payload = json.loads(Path(path).read_text())
        h = payload["header"]
        names = [e[0] for e in payload["entries"]]
        vecs = np.asarray([e[1] for e in payload["entries"]], dtype=float).reshape(len(names), h["dimension"])
        return cls(h["dimension"], names, vecs, h.get("embedder", ""), h.get("seed"))


class IndexBuildError(RuntimeError):
    def __init__(self, tool: str, cause: Exception):
        super().__init__(f"failed to embed tool {tool!r}: {cause}")
        self.tool = tool


def build_index(registry: ToolRegistry, embedder) -> ToolIndex:
    if not len(registry):
        raise EmptyIndex("no tools registered")
    names = sorted(registry.docs)
    rows = []
    for name in names:
        try:
            rows.append(embedder.embed(registry.docs[name].canonical_text()))
        except Exception as e:
            raise IndexBuildError(name, e) from e
    vecs = np.stack(rows)
    return ToolIndex(vecs.shape[1], names, vecs, getattr(embedder, "id", ""), getattr(embedder, "seed", None))


def top_k(scores: np.ndarray, names: list[str], k: int) -> list[tuple[str, float]]:
    """Top-k by score, ties by ascending name. ``names`` must be sorted."""
    n = len(scores)
    if k >= n:
        idx = np.arange(n)
    else:
        # everything tied with the k-th best must stay a candidate
        kth = np.partition(scores, n - k)[n - k]
        idx = np.nonzero(scores >= kth)[0]
    # stable sort on -score keeps name order (index order) among ties
    order = idx[np.argsort(-scores[idx], kind="stable")][:k]
    return [(names[i], float(min(1.0, max(-1.0, scores[i])))) for i in order]


def search(index: ToolIndex, query: str, k: int, embedder) -> RetrievalResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(index):
        raise EmptyIndex("index is empty")
    q = embedder.embed(query)
    return RetrievalResult(top_k(index.vectors @ q, index.names, k))


# -- toolset files -----------------------------------------------------------

def load_toolset(path: str | Path, sidecar_dir: str | Path | None = None) -> list[ToolDoc]:
    """Read function definitions from a JSON array or JSON-lines file.

    An optional sidecar ``<name>.endpoint.json`` next to the file (or in
    ``sidecar_dir``) supplies ``source`` and ``endpoint_config`` for a tool.
    """
    path = Path(path)
    text = path.read_text()
    stripped = text.lstrip()
    if stripped.startswith("["):
        items = json.loads(text)
    else:
        items = [json.loads(line) for line in text.splitlines() if line.strip()]
    side = Path(sidecar_dir) if sidecar_dir else path.parent
    docs = []
    for item in items:
        name = (item.get("function") or item)["name"]
        car = side / f"{name}.endpoint.json"
        if car.exists():
            extra = json.loads(car.read_text())
            cfg = extra.get("endpoint_config", {k: v for k, v in extra.items() if k != "source"})
            docs.append(ToolDoc.from_dict(item, extra.get("source", "http"), cfg))
        else:
            docs.append(ToolDoc.from_dict(item))
    return docs


def save_toolset(docs: Iterable[ToolDoc], path: str | Path):
    Path(path).write_text(json.dumps([d.to_dict() for d in docs], indent=1))

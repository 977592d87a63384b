import json

import httpx
import numpy as np
import pytest

from conftest import doc
from toolloop.registry import (DuplicateName, EmptyIndex, HashingEmbedder, InvalidToolDoc, RemoteEmbedder,
                                StaleIndex, ToolIndex, ToolRegistry, load_toolset, save_toolset, top_k)


def brute_top_k(vectors, names, q, k):
    # independent oracle: full sort by (-score, name)
    scored = [(-float(v @ q), n) for v, n in zip(vectors, names)]
    scored.sort()
    return [(n, -s) for s, n in scored[:k]]


def registry(n, seed=0):
    reg = ToolRegistry()
    for i in range(n):
        reg.register_tool(doc(f"tool_{i:05d}", f"does thing {i % 37} with widget {i % 11} and gadget {i}"))
    reg.build_index(HashingEmbedder(64, seed))
    return reg


def test_embedder_deterministic_and_unit_norm():
    a, b = HashingEmbedder(32, 5), HashingEmbedder(32, 5)
    v = a.embed("Find the Weather for Paris")
    assert np.array_equal(v, b.embed("find the weather for paris"))
    assert abs(np.linalg.norm(v) - 1.0) < 1e-12
    assert not np.array_equal(v, HashingEmbedder(32, 6).embed("find the weather for paris"))


def test_empty_text_rejected():
    with pytest.raises(ValueError):
        HashingEmbedder(16).embed("  ")


def test_search_matches_brute_force():
    reg = registry(300)
    idx = reg.index
    emb = reg.embedder
    for q in ["thing 3 widget", "gadget 17", "nothing matches zzz", "does with"]:
        got = reg.search(q, 5).ranked
        want = brute_top_k(idx.vectors, idx.names, emb.embed(q), 5)
        assert [n for n, _ in got] == [n for n, _ in want]
        assert np.allclose([s for _, s in got], [s for _, s in want], atol=1e-12)


def test_ties_break_by_name():
    # names arrive in index (sorted) order
    scores = np.array([0.5, 0.9, 0.5, 0.9])
    assert top_k(scores, ["a", "b", "c", "d"], 3) == [("b", 0.9), ("d", 0.9), ("a", 0.5)]
    assert top_k(np.array([0.2, 0.2, 0.2]), ["a", "b", "c"], 2) == [("a", 0.2), ("b", 0.2)]


def test_self_description_ranks_first():
    reg = registry(200)
    d = reg.get("tool_00042")
    top = reg.search(d.canonical_text(), 1).ranked[0]
    assert top[0] == "tool_00042" and abs(top[1] - 1.0) < 1e-6


def test_k_larger_than_registry():
    reg = registry(3)
    assert len(reg.search("x", 10).names) == 3


def test_stale_and_empty():
    reg = ToolRegistry()
    with pytest.raises(EmptyIndex):
        reg.search("x")
    reg.register_tool(doc("a"))
    reg.build_index(HashingEmbedder())
    reg.register_tool(doc("b"))
    with pytest.raises(StaleIndex):
        reg.search("x")


def test_duplicate_and_invalid():
    reg = ToolRegistry([doc("a")])
    with pytest.raises(DuplicateName):
        reg.register_tool(doc("a"))
    with pytest.raises(InvalidToolDoc):
        doc("has space")
    with pytest.raises(InvalidToolDoc):
        doc("r", params={"x": {"type": "string"}}, required=["y"])


def test_index_save_load(tmp_path):
    reg = registry(20)
    reg.index.save(tmp_path / "i.json")
    back = ToolIndex.load(tmp_path / "i.json")
    assert back.names == reg.index.names and np.array_equal(back.vectors, reg.index.vectors)
    assert back.embedder_id == "hashing-bow-v1" and back.dimension == 64


def test_toolset_files_and_sidecar(tmp_path):
    docs = [doc("alpha"), doc("beta")]
    save_toolset(docs, tmp_path / "t.json")
    (tmp_path / "beta.endpoint.json").write_text(json.dumps({"url_template": "http://h/{x}", "method": "GET"}))
    back = load_toolset(tmp_path / "t.json")
    assert back[0] == docs[0]
    assert back[1].source == "http" and back[1].endpoint_config["method"] == "GET"
    lines = "\n".join(json.dumps(d.to_dict()) for d in docs)
    (tmp_path / "t.jsonl").write_text(lines)
    assert [d.name for d in load_toolset(tmp_path / "t.jsonl")] == ["alpha", "beta"]


def test_remote_embedder_over_mock_transport():
    def handler(request):
        body = json.loads(request.content)
        assert request.url.path.endswith("/embeddings")
        data = [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": data[::-1]})

    emb = RemoteEmbedder("http://emb/v1", "m", client=httpx.Client(transport=httpx.MockTransport(handler)))
    out = emb.embed_many(["ab", "abcd"])
    assert out.shape == (2, 2)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)
    assert out[1, 0] > out[0, 0]   # order restored from "index"

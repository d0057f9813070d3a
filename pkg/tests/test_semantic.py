import json
import math
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, strategies as st

from simgrasp import fixtures
from simgrasp.errors import ConfigError, InvalidInputError, SemanticUnavailableError, UnknownWordError
from simgrasp.semantic import (ENV_ENDPOINT, Category, EmbeddingTable, HttpCompletionService, StubCompletionService,
                               build_prompt, cosine_similarity, parse_answer, prefilter_semantic, semantic_match,
                               simplify)

DB = [Category.of(n) for n in ["bottle", "box", "cup", "mug", "apple", "hammer"]]
PROMPT = ("Which objects in [bottle, box, cup, mug, apple, hammer] are likely to be similar to a {soda_can} "
          "in terms of robotic grasping? Please only answer the category names.")


class Scripted:
    def __init__(self, answer=None, fail=False):
        self.answer, self.fail, self.prompts = answer, fail, []

    def complete(self, prompt):
        self.prompts.append(prompt)
        if self.fail:
            raise SemanticUnavailableError("down")
        return self.answer


def test_prompt_is_verbatim_template():
    assert build_prompt(DB, Category.of("soda_can")) == PROMPT
    assert build_prompt(DB, "soda_can") == build_prompt(DB, "soda_can")


def test_prompt_single_category_and_descriptor():
    assert "[mug]" in build_prompt([Category.of("mug")], "cup")
    p = build_prompt(DB, Category.of("mouse_(computer_equipment)"))
    assert "{mouse_(computer_equipment)}" in p


def test_prompt_needs_categories():
    with pytest.raises(InvalidInputError):
        build_prompt([], "cup")


def test_simplify():
    assert simplify("mouse_(computer_equipment)") == "mouse"
    assert simplify("053_Mini Soccer Ball") == "mini_soccer_ball"
    with pytest.raises(InvalidInputError):
        Category("x", "Not Simple")


def test_parse_answer_examples():
    assert parse_answer("Bottle, cup, mug.", DB) == {"bottle", "cup", "mug"}
    assert parse_answer("", DB) == set()
    assert parse_answer("bottle, dragon", DB) == {"bottle"}


def test_parse_answer_compound_names():
    db = [Category.of("soda_can"), Category.of("cup")]
    assert parse_answer("Soda can, cup.", db) == {"soda_can", "cup"}


@given(st.sets(st.sampled_from([c.simplified for c in DB])))
def test_parse_answer_recovers_rendered_list(subset):
    answer = ", ".join(sorted(subset)).capitalize() + "."
    assert parse_answer(answer, DB) >= subset


def test_semantic_match_skip_and_stub():
    assert semantic_match(Scripted("Bottle."), DB, None) is None
    client = Scripted("Bottle, cup, mug.")
    assert semantic_match(client, DB, Category.of("soda_can")) == {"bottle", "cup", "mug"}
    assert client.prompts == [PROMPT]


def test_stub_service_answers_like_the_example():
    stub = StubCompletionService({"soda_can": ["bottle", "cup", "mug"]})
    assert stub.complete(PROMPT) == "Bottle, cup, mug."


def hand_table():
    return EmbeddingTable({"target": np.array([1.0, 0.0]),
                           "a": np.array([0.9, math.sqrt(1 - 0.81)]),
                           "b": np.array([0.5, math.sqrt(0.75)]),
                           "c": np.array([0.4, math.sqrt(0.84)]),
                           "d": np.array([0.1, math.sqrt(0.99)])})


def test_semantic_match_falls_back_to_embeddings():
    cats = [Category.of(n) for n in "abcd"]
    got = semantic_match(Scripted(fail=True), cats, Category.of("target"), hand_table(), 0.5)
    assert got == {"a", "b"}


def test_semantic_unavailable_is_skipped():
    assert semantic_match(Scripted(fail=True), DB, Category.of("cup")) is None


def test_cosine_examples():
    t = EmbeddingTable({"x": np.array([1.0, 0]), "y": np.array([0, 1.0]), "soda": np.array([1.0, 1.0]),
                        "can": np.array([1.0, -1.0])})
    assert cosine_similarity(t, "x", "x") == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(t, "x", "y") == 0.0
    # compound word averages its parts: (soda + can) / 2 = (1, 0)
    assert cosine_similarity(t, "soda_can", "x") == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(UnknownWordError):
        cosine_similarity(t, "dragon", "x")


def test_prefilter_examples():
    cats = list("abcd")
    assert prefilter_semantic(hand_table(), "target", cats, 0.5) == ["a", "b"]
    assert prefilter_semantic(hand_table(), "target", cats, 1.0) == cats
    assert prefilter_semantic(hand_table(), "dragon", cats, 0.5) == cats


vec = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(vec, vec, st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(a, b, lam):
    t = EmbeddingTable({"a": np.array(a), "b": np.array(b)})
    t2 = EmbeddingTable({"a": np.array(a) * lam, "b": np.array(b)})
    assert cosine_similarity(t, "a", "b") == pytest.approx(cosine_similarity(t, "b", "a"), abs=1e-12)
    assert cosine_similarity(t, "a", "b") == pytest.approx(cosine_similarity(t2, "a", "b"), abs=1e-12)


@given(st.integers(1, 12), st.floats(0.01, 1.0))
def test_prefilter_size(k, delta):
    emb = fixtures.synthetic_embeddings()
    words = sorted(emb)[:k + 1]
    table = EmbeddingTable({w: emb[w] for w in words})
    out = prefilter_semantic(table, words[0], words[1:], delta)
    assert len(out) == math.ceil(delta * k)


def test_embedding_file_round_trip(tmp_path):
    vectors = fixtures.synthetic_embeddings()
    fixtures.write_glove(vectors, tmp_path / "e.txt")
    table = EmbeddingTable.load(tmp_path / "e.txt")
    assert len(table) == len(vectors)
    w = sorted(vectors)[0]
    assert np.allclose(table.vector(w), vectors[w], atol=1e-9)


def test_embedding_table_validation():
    with pytest.raises(InvalidInputError):
        EmbeddingTable({"a": np.zeros(3)})
    with pytest.raises(InvalidInputError):
        EmbeddingTable({"a": np.ones(3), "b": np.ones(2)})


class _Handler(BaseHTTPRequestHandler):
    calls = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.calls.append((body, self.headers.get("Authorization")))
        payload = json.dumps({"choices": [{"message": {"content": "Bottle, cup, mug."}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


def test_http_client_against_local_server(monkeypatch):
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        monkeypatch.setenv(ENV_ENDPOINT, f"http://127.0.0.1:{server.server_port}/v1/chat")
        monkeypatch.setenv("SIMGRASP_LLM_API_KEY", "k")
        client = HttpCompletionService.from_env(timeout=5)
        assert semantic_match(client, DB, Category.of("soda_can")) == {"bottle", "cup", "mug"}
        body, auth = _Handler.calls[-1]
        assert body["messages"][0]["content"] == PROMPT
        assert auth == "Bearer k"
    finally:
        server.shutdown()


def test_http_client_failure_and_config(monkeypatch):
    client = HttpCompletionService("http://127.0.0.1:9/", None, "m", timeout=0.5, retries=1)
    with pytest.raises(SemanticUnavailableError):
        client.complete("hi")
    monkeypatch.delenv(ENV_ENDPOINT, raising=False)
    with pytest.raises(ConfigError):
        HttpCompletionService.from_env()

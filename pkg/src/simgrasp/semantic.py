"""Category-level similarity: a completion-service query with an offline
word-embedding fallback."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ConfigError, InvalidInputError, SemanticUnavailableError, UnknownWordError

log = logging.getLogger(__name__)

ENV_ENDPOINT = "SIMGRASP_LLM_ENDPOINT"
ENV_API_KEY = "SIMGRASP_LLM_API_KEY"
ENV_MODEL = "SIMGRASP_LLM_MODEL"


def simplify(raw: str) -> str:
    """Drop parenthesized descriptors and numeric prefixes; lowercase, underscore-joined.

    >>> simplify("mouse_(computer_equipment)")
    'mouse'
    >>> simplify("053_mini_soccer_ball")
    'mini_soccer_ball'
    """
    s = re.sub(r"\(.*?\)", " ", raw.lower())
    s = re.sub(r"[^a-z0-9]+", "_", s).strip("_")
    s = re.sub(r"^\d+_", "", s)
    if not s:
        raise InvalidInputError(f"category {raw!r} simplifies to nothing")
    return s


@dataclass(frozen=True)
class Category:
    raw: str
    simplified: str

    def __post_init__(self):
        if not self.simplified or self.simplified != self.simplified.lower() or " " in self.simplified:
            raise InvalidInputError(f"bad simplified category {self.simplified!r}")

    @classmethod
    def of(cls, raw: str, simplified: str | None = None) -> "Category":
        return cls(raw, simplified or simplify(raw))

    def __str__(self) -> str:
        return self.simplified


def _names(categories) -> list[str]:
    seen, out = set(), []
    for c in categories:
        name = c.simplified if isinstance(c, Category) else str(c)
        if name not in seen:
            seen.add(name)
            out.append(name)
    return out


def build_prompt(db_categories, target: Category | str) -> str:
    names = _names(db_categories)
    if not names:
        raise InvalidInputError("the database has no categories")
    raw = target.raw if isinstance(target, Category) else str(target)
    return (f"Which objects in [{', '.join(names)}] are likely to be similar to a {{{raw}}} "
            "in terms of robotic grasping? Please only answer the category names.")


def parse_answer(answer: str, db_categories) -> set[str]:
    """Database category names mentioned in a free-text answer."""
    names = set(_names(db_categories))
    found = set()
    for chunk in re.split(r"[,.;\n]+", answer.lower()):
        chunk = chunk.strip()
        if not chunk:
            continue
        joined = re.sub(r"[\s\-]+", "_", chunk)
        if joined in names:
            found.add(joined)
            continue
        for token in re.split(r"\s+", chunk):
            token = token.strip("\"'`*:()[]{}")
            if token in names:
                found.add(token)
    return found


# ------------------------------------------------------------ services

class CompletionService(Protocol):
    def complete(self, prompt: str) -> str: ...


class HttpCompletionService:
    """Chat-completions style HTTP client (OpenAI-compatible request body)."""

    def __init__(self, endpoint: str, api_key: str | None, model: str, timeout: float = 20.0, retries: int = 1):
        self.endpoint, self.api_key, self.model = endpoint, api_key, model
        self.timeout, self.retries = timeout, retries

    @classmethod
    def from_env(cls, timeout: float = 20.0) -> "HttpCompletionService":
        endpoint = os.environ.get(ENV_ENDPOINT)
        if not endpoint:
            raise ConfigError(f"{ENV_ENDPOINT} is not set")
        return cls(endpoint, os.environ.get(ENV_API_KEY), os.environ.get(ENV_MODEL, "gpt-4o"), timeout)

    def complete(self, prompt: str) -> str:
        body = json.dumps({"model": self.model, "temperature": 0,
                           "messages": [{"role": "user", "content": prompt}]}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        for _ in range(self.retries + 1):
            req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode())
                return payload["choices"][0]["message"]["content"]
            except (urllib.error.URLError, TimeoutError, OSError, KeyError, IndexError, ValueError) as exc:
                last = exc
                log.warning("completion request failed: %s", exc)
        raise SemanticUnavailableError(f"completion service failed: {last}")


class StubCompletionService:
    """Deterministic offline service answering from a table.

    ``table`` maps a simplified target name to the names it resembles. The
    answer lists those present in the prompt's bracket, capitalized like a
    chat reply ("Bottle, cup, mug.").
    """

    def __init__(self, table: dict[str, list[str]], fail: bool = False):
        self.table = {k: list(v) for k, v in table.items()}
        self.fail = fail
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if self.fail:
            raise SemanticUnavailableError("stub configured to fail")
        m = re.search(r"\[(.*?)\].*?\{(.*?)\}", prompt, flags=re.S)
        if not m:
            return ""
        offered = [s.strip() for s in m.group(1).split(",")]
        target = simplify(m.group(2))
        similar = set(self.table.get(target, [target]))
        picked = [name for name in offered if name in similar]
        if not picked:
            return "None."
        text = ", ".join(picked)
        return text[0].upper() + text[1:] + "."


def load_stub_table(path) -> dict[str, list[str]]:
    return json.loads(Path(path).read_text())


# ----------------------------------------------------------- embeddings

class EmbeddingTable:
    def __init__(self, vectors: dict[str, np.ndarray]):
        dims = {len(v) for v in vectors.values()}
        if len(dims) > 1:
            raise InvalidInputError("embedding vectors differ in dimension")
        clean = {}
        for w, v in vectors.items():
            v = np.asarray(v, dtype=float)
            if not np.any(v):
                raise InvalidInputError(f"zero vector for {w!r}")
            v.setflags(write=False)
            clean[w.lower()] = v
        self._vectors = clean

    def __contains__(self, word: str) -> bool:
        try:
            self.vector(word)
        except UnknownWordError:
            return False
        return True

    def __len__(self) -> int:
        return len(self._vectors)

    def vector(self, word: str) -> np.ndarray:
        """Vector for ``word``; compound words average their known parts."""
        w = word.lower()
        if w in self._vectors:
            return self._vectors[w]
        parts = [p for p in re.split(r"[_\s\-]+", w) if p in self._vectors]
        if not parts:
            raise UnknownWordError(word)
        return np.mean([self._vectors[p] for p in parts], axis=0)

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok = line.rstrip().split(" ")
                if len(tok) < 2:
                    continue
                vectors[tok[0]] = np.array([float(x) for x in tok[1:]])
        return cls(vectors)


def cosine_similarity(table: EmbeddingTable, a: str, b: str) -> float:
    va, vb = table.vector(a), table.vector(b)
    return float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))


def prefilter_semantic(table: EmbeddingTable, target: Category | str, db_categories, delta: float = 0.5) -> list[str]:
    """The ceil(delta * k) database categories closest to the target, ties by name."""
    if not 0 < delta <= 1:
        raise InvalidInputError("delta must lie in (0, 1]")
    names = sorted(_names(db_categories))
    word = target.simplified if isinstance(target, Category) else str(target)
    try:
        table.vector(word)
    except UnknownWordError:
        log.info("target %r not in embedding table; semantic pre-filter passes everything", word)
        return names
    keep = math.ceil(delta * len(names))
    scored = []
    for n in names:
        try:
            s = cosine_similarity(table, word, n)
        except UnknownWordError:
            s = -math.inf
        scored.append((-s, n))
    scored.sort()
    return sorted(n for _, n in scored[:keep])


def semantic_match(client: CompletionService | None, db_categories, target: Category | None,
                   table: EmbeddingTable | None = None, delta: float = 0.5) -> set[str] | None:
    """Database categories judged similar to ``target``; None when skipped.

    Without a target category the level is skipped. When the service fails,
    the embedding table stands in; with neither available the level is
    skipped.
    """
    if target is None:
        return None
    if client is not None:
        try:
            return parse_answer(client.complete(build_prompt(db_categories, target)), db_categories)
        except SemanticUnavailableError as exc:
            log.warning("semantic service unavailable: %s", exc)
    if table is not None:
        return set(prefilter_semantic(table, target, db_categories, delta))
    log.warning("semantic matching skipped: no service and no embedding table")
    return None

"""Prompt embedding and text condition alignment (normalize, decompose, rewrite).

The default path is fully deterministic: a hashing embedder stands in for a
pretrained text encoder, and a rule-based splitter stands in for the language
model. Both have optional HTTP clients for real services.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

K_MAX = 5
_HASH_KEY = b"rqmotion-embed"
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


# --- embedding --------------------------------------------------------------


@dataclass(frozen=True)
class PromptEmbedding:
    vector: np.ndarray
    source: str = "hash-embedder"
    text: str = ""

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


class EmbeddingClient(Protocol):
    def embed(self, text: str, dim: int) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def token_vector(token: str, dim: int) -> np.ndarray:
    """Unit vector in R^dim drawn from a generator seeded by a keyed hash of the token."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=_HASH_KEY).digest()
    v = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dim)
    return v / np.linalg.norm(v)


def embed_prompt(text: str, dim: int, client: EmbeddingClient | None = None) -> PromptEmbedding:
    if not text or not text.strip():
        raise ValidationError("prompt text is empty")
    if client is not None:
        try:
            vec = np.asarray(client.embed(text, dim), dtype=np.float64)
            if vec.shape != (dim,) or not np.isfinite(vec).all() or not np.linalg.norm(vec) > 0:
                raise ValidationError(f"embedding service returned shape {vec.shape}, expected ({dim},)")
            return PromptEmbedding((vec / np.linalg.norm(vec)).astype(np.float32), "external", text)
        except ValidationError:
            raise
        except Exception as exc:  # transport failures degrade to the local embedder
            log.warning("embedding client failed (%s); using hash embedder", exc)
    tokens = tokenize(text)
    if not tokens:
        raise ValidationError(f"prompt {text!r} has no alphanumeric tokens")
    mean = np.mean([token_vector(t, dim) for t in tokens], axis=0)
    return PromptEmbedding((mean / np.linalg.norm(mean)).astype(np.float32), "hash-embedder", text)


# --- verb rules -------------------------------------------------------------

_GERUNDS = {
    "imitating": "imitate", "practicing": "practice", "practising": "practise",
    "spinning": "spin", "running": "run", "swinging": "swing", "walking": "walk",
    "jumping": "jump", "waving": "wave", "dancing": "dance", "rehearsing": "rehearse",
    "raising": "raise", "lifting": "lift", "crouching": "crouch", "rolling": "roll",
    "standing": "stand", "sitting": "sit", "turning": "turn", "kicking": "kick",
    "squatting": "squat", "hopping": "hop", "bowing": "bow", "pausing": "pause",
    "stepping": "step", "moving": "move", "throwing": "throw", "catching": "catch",
    "clapping": "clap", "swaying": "sway", "stretching": "stretch", "bending": "bend",
    "climbing": "climb", "punching": "punch", "performing": "perform", "doing": "do",
    "making": "make", "taking": "take", "getting": "get", "holding": "hold",
    "reaching": "reach", "pushing": "push", "pulling": "pull", "balancing": "balance",
    "skipping": "skip", "marching": "march", "jogging": "jog", "sprinting": "sprint",
    "leaning": "lean", "shaking": "shake", "nodding": "nod", "lying": "lie",
    "dropping": "drop", "slipping": "slip", "tapping": "tap", "stopping": "stop",
    "swimming": "swim", "shuffling": "shuffle", "tiptoeing": "tiptoe", "kneeling": "kneel",
}
KNOWN_VERBS = frozenset(_GERUNDS.values()) | {"go", "hold", "face", "wait", "rest", "look"}
_THIRD_PERSON_IRREGULAR = {"do": "does", "go": "goes", "have": "has", "be": "is"}
_BASE_FROM_THIRD = {v: k for k, v in _THIRD_PERSON_IRREGULAR.items()}

_FRAMING = sorted(
    [
        "someone", "somebody", "a human is", "the human is", "a person is", "the person is",
        "someone is", "somebody is", "a man is", "a woman is", "the man is", "the woman is",
        "a figure is", "a human", "the human", "a person", "the person", "a man", "a woman",
        "the man", "the woman", "a figure", "he is", "she is", "they are", "he", "she", "they",
    ],
    key=len,
    reverse=True,
)
_FRAMING_RE = re.compile(r"^(?:" + "|".join(re.escape(f) for f in _FRAMING) + r")\b\s*")


def _base_from_gerund(word: str) -> str:
    if word in _GERUNDS:
        return _GERUNDS[word]
    stem = word[:-3]
    if len(stem) >= 3 and stem[-1] == stem[-2] and stem[-1] in "bdgmnprt":
        return stem[:-1]
    if re.search(r"(at|iz|is|ac|uc|ov|av|iv|ud|ag|id|ur)$", stem):
        return stem + "e"
    return stem


def _base_from_third(word: str) -> str:
    if word in _BASE_FROM_THIRD:
        return _BASE_FROM_THIRD[word]
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if re.search(r"(ch|sh|ss|x|z|o)es$", word):
        return word[:-2]
    if word.endswith("s") and not word.endswith("ss") and len(word) > 2:
        return word[:-1]
    return word


def third_person(verb: str) -> str:
    if verb in _THIRD_PERSON_IRREGULAR:
        return _THIRD_PERSON_IRREGULAR[verb]
    if re.search(r"(s|sh|ch|x|z|o)$", verb):
        return verb + "es"
    if re.search(r"[^aeiou]y$", verb):
        return verb[:-1] + "ies"
    return verb + "s"


def imperativize(clause: str, had_subject: bool = False) -> str:
    """Put the leading verb of ``clause`` into its base form."""
    words = clause.split()
    if not words:
        return clause
    head = words[0]
    if head in ("is", "are") and len(words) > 1:
        words, head, had_subject = words[1:], words[1], True
    if head.endswith("ing") and len(head) > 4:
        words[0] = _base_from_gerund(head)
    elif had_subject or (head not in KNOWN_VERBS and _base_from_third(head) in KNOWN_VERBS):
        words[0] = _base_from_third(head)
    return " ".join(words)


# --- TCA ----------------------------------------------------------------------


def tca_normalize(raw: str) -> str:
    """Style normalization: lowercase imperative phrase without framing subject."""
    text = " ".join(raw.split())
    text = re.sub(r"[.!?]+$", "", text).strip().lower()
    stripped = _FRAMING_RE.sub("", text, count=1)
    out = imperativize(stripped, had_subject=stripped != text) if stripped else text
    return out or " ".join(raw.split())


@dataclass
class TcaResult:
    normalized: str
    steps: list[str]
    rewritten: str
    source: str = "rules"
    warning: str | None = None

    @property
    def k(self) -> int:
        return len(self.steps)


@dataclass
class PromptTemplates:
    role: str
    decompose: str
    verify: str
    exemplars: list[str] = field(default_factory=list)
    k_max: int = K_MAX

    @classmethod
    def load(cls, directory: str | os.PathLike | None = None) -> "PromptTemplates":
        if directory is None:
            base = resources.files("rqmotion") / "assets" / "templates"
            read = lambda name: (base / name).read_text(encoding="utf-8")  # noqa: E731
        else:
            read = lambda name: open(os.path.join(directory, name), encoding="utf-8").read()  # noqa: E731
        exemplars = [e.strip() for e in read("exemplars.txt").split("\n---\n") if e.strip()]
        return cls(read("role.txt").strip(), read("decompose.txt").strip(), read("verify.txt").strip(), exemplars)

    def render(self, normalized: str) -> str:
        shots = "\n\n".join(self.exemplars)
        return (
            f"{self.role}\n\n{self.decompose.format(k_max=self.k_max)}\n\n{self.verify}\n\n"
            f"Examples:\n\n{shots}\n\nRequest: {normalized}\n"
        )


class CompletionClient(Protocol):
    def complete(self, prompt: str) -> str: ...


_CONNECTIVES = re.compile(r"\s*(?:[,;]|\b(?:and then|after that|finally|then|and)\b)\s*")


def split_steps(norm: str, k_max: int = K_MAX) -> list[str]:
    parts = [imperativize(p.strip()) for p in _CONNECTIVES.split(norm.lower())]
    parts = [p for p in parts if p]
    if not parts:
        parts = [norm.strip()]
    if len(parts) > k_max:
        parts = parts[: k_max - 1] + [", ".join(parts[k_max - 1:])]
    return parts


def rewrite(steps: list[str]) -> str:
    clauses = []
    for step in steps:
        verb, *rest = step.split(" ", 1)
        clauses.append(" ".join([third_person(verb)] + rest))
    if len(clauses) == 1:
        body = clauses[0]
    elif len(clauses) == 2:
        body = f"{clauses[0]} and {clauses[1]}"
    else:
        body = ", ".join(clauses[:-1]) + f", and {clauses[-1]}"
    return f"A person {body}."


_SUBJECT = re.compile(r"^(?:(?:a|the)\s+(?:person|human|man|woman|figure)|someone|somebody)\b", re.I)
_SECTION = re.compile(r"^\s*(Normalized|Steps|Final)\s*:\s*(.*)$", re.I)
_ENUM = re.compile(r"^\s*(?:\d+\s*[.)]|[-*])\s*")


def parse_response(text: str, k_max: int = K_MAX) -> TcaResult:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        m = _SECTION.match(line)
        if m:
            current = m.group(1).lower()
            sections[current] = [m.group(2).strip()] if m.group(2).strip() else []
        elif current is not None and line.strip():
            sections[current].append(line.strip())
    missing = {"normalized", "steps", "final"} - set(sections)
    if missing:
        raise ValidationError(f"response lacks sections: {sorted(missing)}")
    steps = [_ENUM.sub("", s).strip() for s in sections["steps"]]
    steps = [s for s in steps if s]
    if not 1 <= len(steps) <= k_max:
        raise ValidationError(f"response has {len(steps)} steps; expected 1..{k_max}")
    final = " ".join(sections["final"]).strip()
    if not _SUBJECT.match(final):
        raise ValidationError("final instruction does not start with a subject phrase")
    normalized = " ".join(sections["normalized"]).strip()
    if not normalized:
        raise ValidationError("empty normalized section")
    return TcaResult(normalized, steps, final, source="client")


def tca_decompose(
    norm: str,
    templates: PromptTemplates | None = None,
    client: CompletionClient | None = None,
) -> TcaResult:
    if not norm or not norm.strip():
        raise ValidationError("cannot decompose an empty instruction")
    k_max = templates.k_max if templates is not None else K_MAX
    steps = split_steps(norm, k_max)
    fallback = TcaResult(norm.strip(), steps, rewrite(steps))
    if client is None:
        return fallback
    templates = templates or PromptTemplates.load()
    try:
        reply = client.complete(templates.render(norm))
    except Exception as exc:
        log.warning("completion client failed: %s", exc)
        fallback.warning = f"client failure: {exc}"
        return fallback
    try:
        return parse_response(reply, k_max)
    except ValidationError as exc:
        log.warning("unparseable completion: %s", exc)
        fallback.warning = f"parse failure: {exc}"
        return fallback


def tca(raw: str, templates: PromptTemplates | None = None, client: CompletionClient | None = None) -> TcaResult:
    return tca_decompose(tca_normalize(raw), templates, client)


def schedule_from_tca(result: TcaResult, segment_len: int, mode: str = "scheduled") -> list[tuple[str, int]]:
    """Turn a TCA result into a prompt schedule for generation.

    ``scheduled`` gives one segment per step; ``joint`` a single segment
    conditioned on the rewritten sentence and spanning all steps.
    """
    if segment_len < 1:
        raise ValidationError("segment length must be >= 1")
    if mode == "scheduled":
        return [(step, segment_len) for step in result.steps]
    if mode == "joint":
        return [(result.rewritten, segment_len * result.k)]
    raise ValidationError(f"unknown TCA mode {mode!r}")


# --- HTTP clients -------------------------------------------------------------


class HttpCompletionClient:
    """POSTs ``{"prompt": ...}`` and reads ``text``/``completion`` from a JSON reply (or raw text)."""

    def __init__(self, url: str, token_env: str = "RQMOTION_LLM_TOKEN", timeout: float = 30.0):
        self.url = url
        self.token_env = token_env
        self.timeout = timeout

    def _post(self, payload: dict) -> bytes:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.url, json.dumps(payload).encode(), headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read()

    def complete(self, prompt: str) -> str:
        body = self._post({"prompt": prompt}).decode("utf-8")
        try:
            data = json.loads(body)
        except json.JSONDecodeError:
            return body
        if isinstance(data, dict):
            for key in ("text", "completion", "output"):
                if isinstance(data.get(key), str):
                    return data[key]
        raise ValidationError("completion reply has no text field")


class HttpEmbeddingClient(HttpCompletionClient):
    """POSTs ``{"text": ..., "dim": ...}`` and reads an ``embedding`` list."""

    def __init__(self, url: str, token_env: str = "RQMOTION_EMBED_TOKEN", timeout: float = 30.0):
        super().__init__(url, token_env, timeout)

    def embed(self, text: str, dim: int) -> np.ndarray:
        data = json.loads(self._post({"text": text, "dim": dim}))
        return np.asarray(data["embedding"], dtype=np.float64)

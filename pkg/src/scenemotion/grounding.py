"""Language grounding of the target object.

Two routes resolve an instruction like "sit on the chair that is near the
desk" to a single detected object:

* the chat route: two prompts in sequence. The first asks which categories
  matter (target + anchors); the scene graph is filtered to those categories
  and rendered as edge sentences; the second prompt asks which object id is
  the target. Any chat backend can answer (HTTP, scripted transcript, or a
  graph-aware mock that derives truthful answers from the graph itself).
* the symbolic route: parse the instruction template directly and match it
  against the graph. Deterministic, and doubles as the test oracle for the
  chat route.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np
import requests

from .errors import (
    GroundingImpossibleError,
    ParseError,
    ProtocolError,
    UnsatisfiableError,
    ValidationError,
)
from .geometry import Aabb, box_iou
from .scene import SceneGraph, SpatialRelation, _REL_ORDER


class Action(Enum):
    WALK = "walk"
    SIT = "sit"
    STANDUP = "standup"
    LIE = "lie"


ACTION_PHRASES = {
    "walk to": Action.WALK,
    "walk towards": Action.WALK,
    "sit on": Action.SIT,
    "sit down on": Action.SIT,
    "stand up from": Action.STANDUP,
    "lie on": Action.LIE,
    "lie down on": Action.LIE,
}

RELATION_PHRASES = {
    "near": SpatialRelation.NEAR,
    "close to": SpatialRelation.NEAR,
    "next to": SpatialRelation.NEAR,
    "far from": SpatialRelation.FAR,
    "far away from": SpatialRelation.FAR,
    "above": SpatialRelation.ABOVE,
    "over": SpatialRelation.ABOVE,
    "below": SpatialRelation.BELOW,
    "under": SpatialRelation.BELOW,
    "beneath": SpatialRelation.BELOW,
    "on top of": SpatialRelation.SUPPORTED_BY,
    "supported by": SpatialRelation.SUPPORTED_BY,
    "supporting": SpatialRelation.SUPPORTING,
    "between": SpatialRelation.BETWEEN,
    "in the middle of": SpatialRelation.BETWEEN,
    "in the center of": SpatialRelation.BETWEEN,
}

# canonical phrase used when rendering a relation back to text
RELATION_RENDER = {
    SpatialRelation.NEAR: "near",
    SpatialRelation.FAR: "far from",
    SpatialRelation.ABOVE: "above",
    SpatialRelation.BELOW: "below",
    SpatialRelation.SUPPORTED_BY: "supported by",
    SpatialRelation.SUPPORTING: "supporting",
    SpatialRelation.BETWEEN: "between",
}

ACTION_RENDER = {
    Action.WALK: "walk to",
    Action.SIT: "sit on",
    Action.STANDUP: "stand up from",
    Action.LIE: "lie on",
}


@dataclass(frozen=True)
class ParsedInstruction:
    action: Action
    target_category: str
    relation: SpatialRelation | None = None
    anchor_categories: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "anchor_categories", tuple(self.anchor_categories))
        n = len(self.anchor_categories)
        if self.relation is None:
            if n != 0:
                raise ValidationError(f"no relation but {n} anchors given")
        elif self.relation is SpatialRelation.BETWEEN:
            if n != 2:
                raise ValidationError(f"between needs exactly 2 anchors, got {n}")
        elif n != 1:
            raise ValidationError(f"relation {self.relation.value} needs exactly 1 anchor, got {n}")


_ACTION_ALT = "|".join(re.escape(p) for p in sorted(ACTION_PHRASES, key=len, reverse=True))
_RELATION_ALT = "|".join(re.escape(p) for p in sorted(RELATION_PHRASES, key=len, reverse=True))
_RELATION_RE = re.compile(rf"\s+(?:that\s+is\s+)?(?P<rel>{_RELATION_ALT})\s+the\s+")


def parse_instruction(text: str) -> ParsedInstruction:
    """Parse "<action> the <target> [that is <relation> the <anchor> [and the <anchor2>]]"."""
    s = text.strip().lower().rstrip(".!?").strip()
    m = re.match(rf"(?P<action>{_ACTION_ALT})\s+the\s+", s)
    if m is None:
        span = " ".join(s.split()[:3])
        raise ParseError(f"unrecognized action phrase at: {span!r}")
    action = ACTION_PHRASES[m.group("action")]
    rest = s[m.end():]

    rel_match = _RELATION_RE.search(rest)
    if rel_match is None:
        leftover = re.search(r"\s+that\s+is\s+(?P<span>.*)$", rest)
        if leftover is not None:
            raise ParseError(f"unrecognized relation phrase at: {leftover.group('span')!r}")
        target = rest.strip()
        if not target:
            raise ParseError("missing target category")
        return ParsedInstruction(action, target)

    target = rest[: rel_match.start()].strip()
    if not target:
        raise ParseError("missing target category")
    relation = RELATION_PHRASES[rel_match.group("rel")]
    anchor_text = rest[rel_match.end():].strip()
    if relation is SpatialRelation.BETWEEN:
        parts = [p.strip() for p in anchor_text.split(" and the ")]
        if len(parts) != 2 or not all(parts):
            raise ParseError(f"between needs two anchors joined by 'and the', got: {anchor_text!r}")
        return ParsedInstruction(action, target, relation, parts)
    if " and the " in anchor_text:
        raise ParseError(f"relation {relation.value!r} takes a single anchor, got: {anchor_text!r}")
    if not anchor_text:
        raise ParseError("missing anchor category")
    return ParsedInstruction(action, target, relation, [anchor_text])


def render_instruction(parsed: ParsedInstruction) -> str:
    """Inverse of parse_instruction for template instructions."""
    s = f"{ACTION_RENDER[parsed.action]} the {parsed.target_category}"
    if parsed.relation is None:
        return s
    s += f" that is {RELATION_RENDER[parsed.relation]} the {parsed.anchor_categories[0]}"
    if parsed.relation is SpatialRelation.BETWEEN:
        s += f" and the {parsed.anchor_categories[1]}"
    return s


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValidationError(f"unknown chat role {self.role!r}")
        if not self.content:
            raise ValidationError("chat message content must be non-empty")


@dataclass(frozen=True)
class Prompt:
    messages: tuple

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValidationError("prompt needs at least one message")

    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    @property
    def final_user_message(self) -> ChatMessage:
        for m in reversed(self.messages):
            if m.role == "user":
                return m
        raise ValidationError("prompt has no user message")

    def appended(self, *messages) -> "Prompt":
        return Prompt(self.messages + tuple(messages))


STAGE1_FORMAT_HINT = (
    "Answer with exactly two lines:\n"
    "target: <category>\n"
    "anchors: <category>, <category>\n"
    "Leave the anchors line empty after the colon if there are none."
)

STAGE2_FORMAT_HINT = 'Answer with a single line of the form "answer: <category> <id>".'

_INSTRUCTION_MARK = "instruction:"


def _instruction_line(utterance: str) -> str:
    return f'{_INSTRUCTION_MARK} "{utterance}"'


def _load_few_shot(name: str) -> list:
    with resources.files("scenemotion.data").joinpath(name).open() as f:
        return json.load(f)


def _render_stage1_answer(target: str, anchors) -> str:
    return f"target: {target}\nanchors: {', '.join(anchors)}"


def build_stage1_prompt(utterance: str, few_shot: bool = True, num_examples: int = 3) -> Prompt:
    """First prompt: ask which target/anchor categories the instruction refers to."""
    if not utterance:
        raise ValidationError("utterance must be non-empty")
    messages = [
        ChatMessage(
            "system",
            "You extract object categories from a motion instruction for an indoor scene. "
            "The target is the object the character will interact with; anchors are objects "
            "mentioned only to disambiguate the target.\n" + STAGE1_FORMAT_HINT,
        )
    ]
    if few_shot:
        for ex in _load_few_shot("few_shot_stage1.json")[:num_examples]:
            messages.append(ChatMessage("user", _instruction_line(ex["instruction"])))
            messages.append(ChatMessage("assistant", _render_stage1_answer(ex["target"], ex["anchors"])))
    messages.append(ChatMessage("user", _instruction_line(utterance)))
    return Prompt(messages)


def parse_stage1_response(text: str):
    """Extract (target_category, anchor_categories) from a stage-1 reply."""
    m = re.search(r"target\s*:\s*([^\n]*)", text, re.IGNORECASE)
    if m is None:
        raise ProtocolError(f"no 'target:' line in response: {text!r}")
    target = _clean_category(m.group(1))
    if not target:
        raise ProtocolError(f"empty target category in response: {text!r}")
    am = re.search(r"anchors\s*:\s*([^\n]*)", text, re.IGNORECASE)
    anchors = []
    if am is not None:
        anchors = [_clean_category(a) for a in am.group(1).split(",")]
        anchors = [a for a in anchors if a]
    return target, anchors


def _clean_category(raw: str) -> str:
    return raw.strip().strip("\"'").rstrip(".!").strip().lower()


def filter_graph(graph: SceneGraph, categories, target_category: str | None = None) -> SceneGraph:
    """Keep only nodes of the given categories (and edges fully inside them)."""
    keep = {c.strip().lower() for c in categories}
    nodes = [n for n in graph.nodes if n.category in keep]
    surviving = {n.id for n in nodes}
    if target_category is not None:
        if not any(n.category == target_category.strip().lower() for n in nodes):
            raise GroundingImpossibleError(
                f"no object of target category {target_category!r} in the scene"
            )
    elif not nodes:
        raise GroundingImpossibleError(f"no object of categories {sorted(keep)} in the scene")
    binary = [e for e in graph.binary_edges if e[0] in surviving and e[2] in surviving]
    between = [e for e in graph.between_edges if {e[0], e[1], e[2]} <= surviving]
    return SceneGraph(nodes, binary, between)


def edge_sentences(graph: SceneGraph) -> list:
    """One sentence per edge, deterministically ordered by (subject, relation, object)."""
    cat = {n.id: n.category for n in graph.nodes}
    sentences = [
        f"{cat[s]} {s} is {RELATION_RENDER[rel]} the {cat[o]} {o}"
        for s, rel, o in sorted(graph.binary_edges, key=lambda e: (e[0], _REL_ORDER[e[1]], e[2]))
    ]
    sentences += [
        f"{cat[s]} {s} is between the {cat[a1]} {a1} and the {cat[a2]} {a2}"
        for s, a1, a2 in sorted(graph.between_edges)
    ]
    return sentences


def build_stage2_prompt(utterance: str, sentences, few_shot: bool = True, num_examples: int = 3) -> Prompt:
    """Second prompt: pick the target object id from the accumulated edge sentences."""
    sentences = list(sentences)
    if not sentences:
        raise ValidationError("stage-2 prompt needs at least one edge sentence")
    messages = [
        ChatMessage(
            "system",
            "You are given facts about objects in an indoor scene (each object is named by "
            "category and numeric id) and a motion instruction. Decide which single object "
            "the instruction refers to.\n" + STAGE2_FORMAT_HINT,
        )
    ]
    if few_shot:
        for ex in _load_few_shot("few_shot_stage2.json")[:num_examples]:
            messages.append(
                ChatMessage("user", _render_stage2_question(ex["instruction"], ex["facts"]))
            )
            messages.append(ChatMessage("assistant", f"answer: {ex['answer_category']} {ex['answer_id']}"))
    messages.append(ChatMessage("user", _render_stage2_question(utterance, sentences)))
    return Prompt(messages)


def _render_stage2_question(utterance: str, sentences) -> str:
    facts = "\n".join(sentences)
    return f"facts:\n{facts}\n{_instruction_line(utterance)}\nWhich object is the target?"


def parse_stage2_response(text: str) -> int:
    """Extract the object id from the trailing integer of the 'answer:' line."""
    m = re.search(r"answer\s*:\s*([^\n]*)", text, re.IGNORECASE)
    if m is None:
        raise ProtocolError(f"no 'answer:' line in response: {text!r}")
    numbers = re.findall(r"-?\d+", m.group(1))
    if not numbers:
        raise ProtocolError(f"no object id in answer line: {m.group(1)!r}")
    return int(numbers[-1])


# ---------------------------------------------------------------------------
# chat clients


class LlmClient:
    """Abstract chat backend: takes a Prompt, returns the assistant reply text."""

    def chat(self, prompt: Prompt) -> str:
        raise NotImplementedError


class HttpLlmClient(LlmClient):
    """OpenAI-style chat-completions backend.

    Reads the bearer token from LLM_API_KEY and the base URL from
    LLM_API_BASE unless given explicitly. Requests temperature 0 by default
    for reproducibility; honors HTTP 429 with 1 s / 2 s backoff.
    """

    def __init__(self, model: str = "gpt-3.5-turbo", temperature: float = 0.0,
                 base_url: str | None = None, api_key: str | None = None,
                 timeout: float = 30.0):
        self.model = model
        self.temperature = temperature
        self.base_url = base_url if base_url is not None else os.environ.get("LLM_API_BASE")
        self.api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        self.timeout = timeout
        if not self.base_url:
            raise ValidationError("no base URL: set LLM_API_BASE or pass base_url")

    def chat(self, prompt: Prompt) -> str:
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": m.role, "content": m.content} for m in prompt.messages],
        }
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = self.base_url.rstrip("/") + "/chat/completions"
        backoffs = [1.0, 2.0]
        attempt = 0
        while True:
            response = requests.post(url, json=body, headers=headers, timeout=self.timeout)
            if response.status_code == 429 and attempt < len(backoffs):
                time.sleep(backoffs[attempt])
                attempt += 1
                continue
            if response.status_code != 200:
                raise ProtocolError(f"chat backend returned HTTP {response.status_code}: {response.text[:200]}")
            try:
                return response.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, ValueError) as e:
                raise ProtocolError(f"malformed chat completion payload: {e}") from None


class ScriptedMockClient(LlmClient):
    """Replays a fixed transcript: [{expect_substring, reply}, ...] in order."""

    def __init__(self, transcript):
        if isinstance(transcript, (str, Path)):
            transcript = json.loads(Path(transcript).read_text())
        self._entries = list(transcript)
        self._cursor = 0

    def chat(self, prompt: Prompt) -> str:
        if self._cursor >= len(self._entries):
            raise ValidationError("scripted transcript exhausted")
        entry = self._entries[self._cursor]
        self._cursor += 1
        expected = entry.get("expect_substring", "")
        if expected and expected not in prompt.text():
            raise ValidationError(
                f"transcript entry {self._cursor - 1} expected substring {expected!r} not found in prompt"
            )
        return entry["reply"]


class GraphAwareMockClient(LlmClient):
    """Deterministic mock that answers truthfully from a scene graph.

    Stage is detected from the prompt's format hint; the utterance is read
    back from the final user message, parsed, and resolved symbolically.
    """

    def __init__(self, graph: SceneGraph):
        self.graph = graph

    def _utterance(self, prompt: Prompt) -> str:
        content = prompt.final_user_message.content
        m = re.search(rf'{_INSTRUCTION_MARK} "(.*)"', content)
        if m is None:
            raise ProtocolError("prompt carries no instruction line")
        return m.group(1)

    def chat(self, prompt: Prompt) -> str:
        utterance = self._utterance(prompt)
        parsed = parse_instruction(utterance)
        if STAGE2_FORMAT_HINT in prompt.text():
            result = ground_symbolic(self.graph, parsed)
            category = self.graph.node_by_id(result.object_id).category
            return f"answer: {category} {result.object_id}"
        return _render_stage1_answer(parsed.target_category, list(parsed.anchor_categories))


# ---------------------------------------------------------------------------
# grounding


@dataclass(frozen=True)
class GroundingResult:
    object_id: int
    box: Aabb
    method: str
    center: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.method not in ("llm", "symbolic"):
            raise ValidationError(f"unknown grounding method {self.method!r}")
        object.__setattr__(self, "center", self.box.center)


@dataclass(frozen=True)
class RetryPolicy:
    """Protocol-error handling for the chat route.

    Up to max_retries re-asks append a clarification message; after that
    either fail ("strict") or fall back to the symbolic grounder
    ("symbolic", the default, since live backends are nondeterministic).
    """

    max_retries: int = 2
    fallback: str = "symbolic"

    def __post_init__(self):
        if self.fallback not in ("symbolic", "strict"):
            raise ValidationError(f"unknown fallback policy {self.fallback!r}")


def _chat_with_retries(client, prompt, parse_fn, clarification, policy):
    attempts = policy.max_retries + 1
    last_error = None
    for _ in range(attempts):
        reply = client.chat(prompt)
        try:
            return parse_fn(reply)
        except ProtocolError as e:
            last_error = e
            prompt = prompt.appended(
                ChatMessage("assistant", reply if reply else "(empty)"),
                ChatMessage("user", clarification),
            )
    raise last_error


def ground_llm(graph: SceneGraph, utterance: str, client: LlmClient,
               policy: RetryPolicy = RetryPolicy(), few_shot: bool = True) -> GroundingResult:
    """Two-prompt chat grounding: categories first, then the object id."""
    if not graph.nodes:
        raise ValidationError("cannot ground in an empty scene graph")
    try:
        return _ground_llm_inner(graph, utterance, client, policy, few_shot)
    except (ProtocolError, UnsatisfiableError):
        if policy.fallback == "strict":
            raise
        return ground_symbolic(graph, parse_instruction(utterance))


def _ground_llm_inner(graph, utterance, client, policy, few_shot) -> GroundingResult:
    target, anchors = _chat_with_retries(
        client,
        build_stage1_prompt(utterance, few_shot=few_shot),
        parse_stage1_response,
        "That reply could not be parsed. " + STAGE1_FORMAT_HINT,
        policy,
    )
    filtered = filter_graph(graph, {target, *anchors}, target_category=target)
    candidates = [n for n in filtered.nodes if n.category == target]
    if len(candidates) == 1:
        # unambiguous after filtering; the second question would be vacuous
        return GroundingResult(candidates[0].id, candidates[0].box, "llm")
    sentences = edge_sentences(filtered)
    if not sentences:
        raise UnsatisfiableError(
            f"{len(candidates)} candidates of category {target!r} but no relations to tell them apart"
        )
    object_id = _chat_with_retries(
        client,
        build_stage2_prompt(utterance, sentences, few_shot=few_shot),
        parse_stage2_response,
        "That reply could not be parsed. " + STAGE2_FORMAT_HINT,
        policy,
    )
    by_id = {n.id: n for n in filtered.nodes}
    if object_id not in by_id:
        if policy.fallback == "strict":
            raise ValidationError(f"answered id {object_id} is not in the filtered graph")
        # nearest category match: lowest-id candidate of the target category
        fallback_node = min(candidates, key=lambda n: n.id)
        return GroundingResult(fallback_node.id, fallback_node.box, "llm")
    node = by_id[object_id]
    return GroundingResult(node.id, node.box, "llm")


def ground_symbolic(graph: SceneGraph, parsed: ParsedInstruction) -> GroundingResult:
    """Deterministic grounding by matching the parsed template against the graph."""
    candidates = sorted(
        (n for n in graph.nodes if n.category == parsed.target_category), key=lambda n: n.id
    )
    if not candidates:
        raise GroundingImpossibleError(
            f"no object of target category {parsed.target_category!r} in the scene"
        )
    if parsed.relation is None:
        chosen = candidates[0]
        return GroundingResult(chosen.id, chosen.box, "symbolic")

    cat = {n.id: n.category for n in graph.nodes}
    for anchor in parsed.anchor_categories:
        if anchor not in graph.categories:
            raise UnsatisfiableError(f"anchor category {anchor!r} missing from the scene")

    if parsed.relation is SpatialRelation.BETWEEN:
        wanted = sorted(parsed.anchor_categories)
        satisfying = [
            c
            for c in candidates
            if any(
                s == c.id and sorted((cat[a1], cat[a2])) == wanted
                for s, a1, a2 in graph.between_edges
            )
        ]
    else:
        anchor_cat = parsed.anchor_categories[0]
        satisfying = [
            c
            for c in candidates
            if any(
                s == c.id and rel is parsed.relation and cat[o] == anchor_cat
                for s, rel, o in graph.binary_edges
            )
        ]
    if not satisfying:
        raise UnsatisfiableError(
            f"no {parsed.target_category!r} satisfies {parsed.relation.value} "
            f"w.r.t. {list(parsed.anchor_categories)}"
        )
    chosen = min(satisfying, key=lambda n: n.id)
    return GroundingResult(chosen.id, chosen.box, "symbolic")


def eval_grounding(pred: GroundingResult, gt_box: Aabb):
    """(hit at IoU 0.25, center distance in meters) against the ground-truth box."""
    hit = box_iou(pred.box, gt_box) > 0.25
    center_dist = float(np.linalg.norm(pred.center - gt_box.center))
    return hit, center_dist


def grounding_report(utterance: str, result: GroundingResult, gt_box: Aabb | None = None) -> dict:
    """JSON-ready grounding summary; hit/center_dist are null without ground truth."""
    hit, center_dist = (None, None)
    if gt_box is not None:
        hit, center_dist = eval_grounding(result, gt_box)
    return {
        "utterance": utterance,
        "method": result.method,
        "object_id": result.object_id,
        "center": [float(v) for v in result.center],
        "size": [float(v) for v in result.box.size],
        "hit": hit,
        "center_dist": center_dist,
    }

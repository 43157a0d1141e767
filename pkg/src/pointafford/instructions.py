"""Instruction/answer text generation: seed templates, the augmentation prompt,
a deterministic rule-based paraphraser, and the optional chat-completion
service client used for model-generated paraphrases.
"""

from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass, field

import httpx

MASK_TOKEN = "<mask token>"
N_AFFORDANCE_LABELS = 18

SEED_QUESTION = "What part of the {object} should we interact with to {affordance} it?"
SEED_ANSWER = "You can {affordance} the area " + MASK_TOKEN

ENDPOINT_ENV = "PAVLM_LLM_ENDPOINT"
API_KEY_ENV = "PAVLM_LLM_API_KEY"

# Question frames cycle deterministically; each mentions the object and the
# affordance exactly once. Frame 0 matches the evaluation-prompt phrasing used
# by the ablation harness.
QUESTION_FRAMES = (
    "Which specific region of the {object} should we target to provide {affordance}?",
    "Where on the {object} should we interact to {affordance} it?",
    "To {affordance} the {object}, which area should we touch?",
    "Which part of the {object} is best suited to {affordance} it?",
    "What region of the {object} allows one to {affordance}?",
)
ANSWER_FRAMES = (
    "You can {affordance} the area " + MASK_TOKEN,
    "The area " + MASK_TOKEN + " is where you can {affordance} it",
    "Try to {affordance} at the region " + MASK_TOKEN,
)


class ServiceError(RuntimeError):
    """The text-generation endpoint failed after all retries."""


@dataclass(frozen=True)
class AffordanceLabel:
    """One of the 18 affordance classes, identified by its manifest index."""

    id: int
    name: str

    def __post_init__(self):
        if not 0 <= self.id < N_AFFORDANCE_LABELS:
            raise ValueError(f"label id must be in [0, {N_AFFORDANCE_LABELS}), got {self.id}")
        if not self.name:
            raise ValueError("label name must be non-empty")


class AffordanceVocabulary:
    """The 18 affordance names, id = position; loaded from a dataset manifest."""

    def __init__(self, names):
        names = list(names)
        if len(names) != N_AFFORDANCE_LABELS:
            raise ValueError(f"expected {N_AFFORDANCE_LABELS} affordance names, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError("affordance names must be unique")
        self.names = names
        self._by_name = {name: AffordanceLabel(i, name) for i, name in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def get(self, name: str) -> AffordanceLabel:
        if name not in self._by_name:
            raise KeyError(f"unknown affordance label {name!r}")
        return self._by_name[name]

    def by_id(self, label_id: int) -> AffordanceLabel:
        return AffordanceLabel(label_id, self.names[label_id])


@dataclass
class InstructionRecord:
    """A question/answer pair bound to an object and an affordance label."""

    instruct_text: str
    object_name: str
    affordance: AffordanceLabel
    answer_text: str
    source: str = "seed"

    def __post_init__(self):
        if self.answer_text.count(MASK_TOKEN) != 1:
            raise ValueError("answer_text must contain the mask token exactly once")


def render_seed_qa(object_name: str, affordance: AffordanceLabel) -> InstructionRecord:
    """Byte-for-byte reproducible template substitution of the seed QA pair."""
    if not object_name:
        raise ValueError("object name must be non-empty")
    return InstructionRecord(
        instruct_text=SEED_QUESTION.format(object=object_name, affordance=affordance.name),
        object_name=object_name,
        affordance=affordance,
        answer_text=SEED_ANSWER.format(affordance=affordance.name),
        source="seed",
    )


def build_augmentation_prompt(object_name: str, affordance: AffordanceLabel, n_variants: int) -> str:
    """Single prompt string asking a text-generation model for paraphrased QA
    pairs that keep the object, the action and the literal mask token."""
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    seed = render_seed_qa(object_name, affordance)
    return (
        "You write training data describing where to act on 3D objects.\n"
        f"Seed question: {seed.instruct_text}\n"
        f"Seed answer: {seed.answer_text}\n"
        f"\nProduce {n_variants} varied paraphrases of this question/answer pair.\n"
        "Rules:\n"
        f'- every question mentions the object "{object_name}" and the action '
        f'"{affordance.name}"\n'
        f"- every answer contains the placeholder {MASK_TOKEN} exactly once, verbatim\n"
        "- number the pairs and format each one as\n"
        "  1. Q: <question>\n"
        "     A: <answer>\n"
        "Output only the numbered pairs."
    )


def rule_paraphrase(
    object_name: str, affordance: AffordanceLabel, n_variants: int, seed: int = 0
) -> list[InstructionRecord]:
    """Offline table-driven paraphrases; the seed picks where the frame cycle
    starts, so identical inputs always produce identical lists."""
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    if not object_name:
        raise ValueError("object name must be non-empty")
    records = []
    q_start = seed % len(QUESTION_FRAMES)
    a_start = seed % len(ANSWER_FRAMES)
    for v in range(n_variants):
        question = QUESTION_FRAMES[(q_start + v) % len(QUESTION_FRAMES)]
        answer = ANSWER_FRAMES[(a_start + v) % len(ANSWER_FRAMES)]
        records.append(
            InstructionRecord(
                instruct_text=question.format(object=object_name, affordance=affordance.name),
                object_name=object_name,
                affordance=affordance,
                answer_text=answer.format(affordance=affordance.name),
                source="rule",
            )
        )
    return records


@dataclass
class ServiceConfig:
    """Chat-completion endpoint settings; credentials come from the environment."""

    endpoint: str
    api_key: str = ""
    model: str = "llama-3.1-70b"
    timeout: float = 30.0
    max_retries: int = 3
    retry_wait: float = 0.5

    @classmethod
    def from_env(cls, **overrides) -> "ServiceConfig":
        endpoint = os.environ.get(ENDPOINT_ENV, "")
        if not endpoint:
            raise ServiceError(f"{ENDPOINT_ENV} is not set")
        return cls(endpoint=endpoint, api_key=os.environ.get(API_KEY_ENV, ""), **overrides)


@dataclass
class AugmentationResult:
    records: list[InstructionRecord] = field(default_factory=list)
    parse_warnings: int = 0


_PAIR_RE = re.compile(
    r"^\s*\d+[.)]\s*(?:Q:)?\s*(?P<q>.+?)\s*$\n\s*(?:A:)?\s*(?P<a>.+?)\s*$",
    re.MULTILINE,
)


def parse_numbered_pairs(text: str) -> list[tuple[str, str]]:
    """Extract (question, answer) pairs from a numbered-list response."""
    pairs = []
    for m in _PAIR_RE.finditer(text):
        pairs.append((m.group("q"), m.group("a")))
    return pairs


def _extract_text_body(response: httpx.Response) -> str:
    try:
        payload = response.json()
    except ValueError:
        return response.text
    if isinstance(payload, dict) and "choices" in payload:
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            pass
    return response.text


def augment_via_service(
    prompt: str,
    config: ServiceConfig,
    object_name: str,
    affordance: AffordanceLabel,
    transport: httpx.BaseTransport | None = None,
) -> AugmentationResult:
    """Request paraphrased QA pairs from the configured endpoint.

    Variants whose answer lacks the mask token (or that cannot be parsed as a
    QA pair) are dropped and counted as parse warnings. Network failures are
    retried up to ``config.max_retries`` times, then raised as ServiceError.
    """
    headers = {}
    if config.api_key:
        headers["Authorization"] = f"Bearer {config.api_key}"
    body = {"model": config.model, "messages": [{"role": "user", "content": prompt}]}

    last_error: Exception | None = None
    for attempt in range(config.max_retries):
        try:
            with httpx.Client(transport=transport, timeout=config.timeout) as client:
                response = client.post(config.endpoint, json=body, headers=headers)
                response.raise_for_status()
            break
        except httpx.HTTPError as exc:
            last_error = exc
            if attempt + 1 < config.max_retries:
                time.sleep(config.retry_wait)
    else:
        raise ServiceError(f"endpoint failed after {config.max_retries} attempts: {last_error}")

    text = _extract_text_body(response)
    result = AugmentationResult()
    numbered_lines = sum(1 for line in text.splitlines() if re.match(r"\s*\d+[.)]", line))
    for question, answer in parse_numbered_pairs(text):
        if answer.count(MASK_TOKEN) != 1:
            result.parse_warnings += 1
            continue
        result.records.append(
            InstructionRecord(
                instruct_text=question,
                object_name=object_name,
                affordance=affordance,
                answer_text=answer,
                source="service",
            )
        )
    # numbered entries that never produced a QA pair are malformed too
    result.parse_warnings += max(0, numbered_lines - len(parse_numbered_pairs(text)))
    return result

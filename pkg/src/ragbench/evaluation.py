"""Hallucination / answer-relevance judging and per-pipeline aggregation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

from .chunking import tokenize
from .generation import DecodingParams

logger = logging.getLogger(__name__)

STOPWORDS = frozenset("""
    the a an and or but of to in on at for with by from as
    is are was were be been it its this that these those what how
""".split())
_PUNCT = "\"'`.,;:!?()[]{}<>*_#|/\\-"
ORACLE_JUDGE_ID = "oracle-lexical"

JUDGE_RUBRIC = """You are grading an answer produced by a retrieval-augmented assistant.

Score two quantities, each a number between 0 and 1:
- "hallucination": the fraction of answer claims not supported by the provided context (0 = every claim is supported, 1 = nothing is supported).
- "relevance": how directly the answer addresses the question (0 = not at all, 1 = fully and directly).

Output strict JSON only, with exactly these keys:
{"hallucination": <number>, "relevance": <number>, "rationale": "<one or two sentences>"}
"""

REASK = "Your previous reply could not be parsed. Reply with the JSON object only, nothing else."

METRIC_ROWS = (("Answer Relevance", "answer_relevance_mean"), ("Hallucination", "hallucination_mean"))


class UnjudgeableError(RuntimeError):
    def __init__(self, query_id: str = "", raw: str = ""):
        super().__init__("unjudgeable")
        self.query_id = query_id
        self.raw = raw


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class JudgeVerdict:
    query_id: str
    hallucination: float
    relevance: float
    rationale: str = ""
    judge_id: str = ORACLE_JUDGE_ID
    warnings: tuple[str, ...] = ()

    def to_json(self) -> dict:
        out = {"query_id": self.query_id, "hallucination": self.hallucination,
               "relevance": self.relevance, "rationale": self.rationale, "judge_id": self.judge_id}
        if self.warnings:
            out["warnings"] = list(self.warnings)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "JudgeVerdict":
        return cls(obj["query_id"], float(obj["hallucination"]), float(obj["relevance"]),
                   obj.get("rationale", ""), obj.get("judge_id", ""), tuple(obj.get("warnings", ())))


def content_tokens(text: str) -> set[str]:
    out = set()
    for tok in tokenize(text.lower()):
        tok = tok.strip(_PUNCT)
        if tok and tok not in STOPWORDS:
            out.add(tok)
    return out


def _strip_answer_label(answer: str) -> str:
    s = answer.lstrip()
    return s[len("answer:"):] if s.lower().startswith("answer:") else answer


def _block_texts(context_blocks: Iterable) -> list[str]:
    return [b[1] if isinstance(b, (tuple, list)) else b for b in context_blocks]


def judge_oracle(query: str, context_blocks: Sequence, answer: str, query_id: str = "") -> JudgeVerdict:
    """Lexical stand-in for an LLM judge.

    hallucination = share of the answer's content tokens absent from the
    context; relevance = share of the query's content tokens present in
    the answer. A leading ``Answer:`` label is ignored.
    """
    ctx: set[str] = set()
    for text in _block_texts(context_blocks):
        ctx |= content_tokens(text)
    ans = content_tokens(_strip_answer_label(answer))
    q = content_tokens(query)
    hallucination = 1.0 - len(ans & ctx) / len(ans) if ans else 0.0
    relevance = len(ans & q) / len(q) if q else 0.0
    return JudgeVerdict(query_id, hallucination, relevance, "", ORACLE_JUDGE_ID)


def extract_first_json_object(text: str) -> dict | None:
    """Return the first ``{...}`` in ``text`` that decodes to a dict with both scores."""
    decoder = json.JSONDecoder()
    i = text.find("{")
    while i != -1:
        try:
            obj, _ = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and "hallucination" in obj and "relevance" in obj:
            try:
                float(obj["hallucination"]), float(obj["relevance"])
                return obj
            except (TypeError, ValueError):
                pass
        i = text.find("{", i + 1)
    return None


def _clamp(name: str, value: float, warnings: list[str]) -> float:
    if value < 0.0 or value > 1.0 or math.isnan(value):
        clamped = 0.0 if (math.isnan(value) or value < 0.0) else 1.0
        msg = f"{name} score {value} clamped to {clamped}"
        logger.warning(msg)
        warnings.append(msg)
        return clamped
    return value


def build_judge_prompt(query: str, context_blocks: Sequence, answer: str) -> str:
    ctx = "\n\n".join(f"[{i}] {t}" for i, t in enumerate(_block_texts(context_blocks), start=1))
    return f"{JUDGE_RUBRIC}\nQuestion:\n{query}\n\nContext:\n{ctx or '(none)'}\n\nAnswer:\n{answer}\n"


class Completer(Protocol):
    backend_id: str

    def complete(self, prompt: str, decoding: DecodingParams) -> str: ...


def judge_llm(endpoint: Completer, query: str, context_blocks: Sequence, answer: str,
              query_id: str = "", *, max_reasks: int = 2,
              decoding: DecodingParams | None = None) -> JudgeVerdict:
    """Ask an LLM judge for both scores; re-ask up to ``max_reasks`` times on garbage."""
    decoding = decoding or DecodingParams()
    prompt = build_judge_prompt(query, context_blocks, answer)
    reply = ""
    for attempt in range(max_reasks + 1):
        ask = prompt if attempt == 0 else f"{prompt}\n{REASK}"
        reply = endpoint.complete(ask, decoding)
        obj = extract_first_json_object(reply or "")
        if obj is not None:
            warnings: list[str] = []
            h = _clamp("hallucination", float(obj["hallucination"]), warnings)
            r = _clamp("relevance", float(obj["relevance"]), warnings)
            return JudgeVerdict(query_id, h, r, str(obj.get("rationale", "")),
                                getattr(endpoint, "backend_id", "llm"), tuple(warnings))
        logger.warning("judge reply for %s not parseable (attempt %d)", query_id or "?", attempt + 1)
    raise UnjudgeableError(query_id, reply)


@dataclass
class PipelineMetrics:
    answer_relevance_mean: float
    hallucination_mean: float
    n_queries: int
    n_missing: int
    per_query: list[JudgeVerdict]
    missing: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "answer_relevance_mean": self.answer_relevance_mean,
            "hallucination_mean": self.hallucination_mean,
            "n_queries": self.n_queries,
            "n_missing": self.n_missing,
            "missing": list(self.missing),
            "per_query": [v.to_json() for v in self.per_query],
        }


@dataclass
class MetricsReport:
    per_pipeline: dict[str, PipelineMetrics]
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"pipelines": {name: m.to_json() for name, m in self.per_pipeline.items()}}
        if self.notes:
            out["notes"] = self.notes
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        pipelines = {}
        for name, m in obj["pipelines"].items():
            pipelines[name] = PipelineMetrics(
                float(m["answer_relevance_mean"]), float(m["hallucination_mean"]),
                int(m["n_queries"]), int(m.get("n_missing", 0)),
                [JudgeVerdict.from_json(v) for v in m.get("per_query", [])],
                list(m.get("missing", [])),
            )
        return cls(pipelines, dict(obj.get("notes", {})))


def aggregate(verdicts: Mapping[str, Sequence[JudgeVerdict]],
              missing: Mapping[str, Sequence[str]] | None = None) -> MetricsReport:
    """Per-pipeline arithmetic means, independent of verdict input order.

    Verdicts are sorted by query_id and summed with ``math.fsum`` (exactly
    rounded), so permuting the input cannot change a single digit.
    Pipelines keep the mapping's order, which becomes the column order.
    """
    missing = missing or {}
    out: dict[str, PipelineMetrics] = {}
    for name, vs in verdicts.items():
        if not vs:
            raise AggregationError(f"pipeline {name!r} has zero verdicts")
        ordered = sorted(vs, key=lambda v: v.query_id)
        n = len(ordered)
        miss = sorted(missing.get(name, ()))
        out[name] = PipelineMetrics(
            answer_relevance_mean=math.fsum(v.relevance for v in ordered) / n,
            hallucination_mean=math.fsum(v.hallucination for v in ordered) / n,
            n_queries=n,
            n_missing=len(miss),
            per_query=ordered,
            missing=miss,
        )
    return MetricsReport(out)


def render_table(report: MetricsReport) -> str:
    """Fixed-width table: metric rows by pipeline columns, 2-decimal means."""
    if not report.per_pipeline:
        raise AggregationError("empty report")
    names = list(report.per_pipeline)
    first = max(len("Evaluation metrics"), *(len(label) for label, _ in METRIC_ROWS))
    widths = [max(len(n), 4) for n in names]
    lines = ["  ".join(["Evaluation metrics".ljust(first)] + [n.rjust(w) for n, w in zip(names, widths)])]
    for label, attr in METRIC_ROWS:
        cells = [f"{getattr(report.per_pipeline[n], attr):.2f}".rjust(w) for n, w in zip(names, widths)]
        lines.append("  ".join([label.ljust(first)] + cells))
    return "\n".join(lines) + "\n"

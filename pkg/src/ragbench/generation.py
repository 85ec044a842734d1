"""Budgeted prompt assembly and answer generation backends."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Protocol, Sequence

import httpx

from .chunking import count_tokens, tokenize, truncate_tokens
from .retrieval import RetrievalResult
from .transport import JsonClient, ProviderError

logger = logging.getLogger(__name__)

PREAMBLE = "You are a research assistant. Answer strictly from the provided context."
STUB_ANSWER_TOKENS = 60
NO_CONTEXT_ANSWER = "Answer: no context available"


class BudgetError(ValueError):
    pass


class DecodingStrategy(str, Enum):
    GREEDY = "greedy"
    NUCLEUS = "nucleus"


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.2
    strategy: DecodingStrategy = DecodingStrategy.GREEDY
    top_p: float = 0.9
    max_output_tokens: int = 512

    def __post_init__(self):
        object.__setattr__(self, "strategy", DecodingStrategy(self.strategy))
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    @property
    def effective_top_p(self) -> float:
        return 1.0 if self.strategy == DecodingStrategy.GREEDY else self.top_p


def _block_header(i: int, chunk_id: str) -> str:
    return f"Context [{i}] ({chunk_id}):"


def render_prompt(preamble: str, query: str, blocks: Sequence[tuple[str, str]]) -> str:
    parts = [preamble]
    for i, (cid, text) in enumerate(blocks, start=1):
        parts.append(f"{_block_header(i, cid)}\n{text}")
    parts.append(f"Question: {query}")
    return "\n\n".join(parts)


@dataclass(frozen=True)
class PromptBundle:
    system_preamble: str
    query: str
    context_blocks: tuple[tuple[str, str], ...]
    total_prompt_tokens: int
    window: int
    max_output_tokens: int = 512

    def __post_init__(self):
        if self.total_prompt_tokens + self.max_output_tokens > self.window:
            raise BudgetError(
                f"prompt ({self.total_prompt_tokens}) + output ({self.max_output_tokens}) "
                f"exceeds window {self.window}")

    @property
    def text(self) -> str:
        return render_prompt(self.system_preamble, self.query, self.context_blocks)

    def to_json(self) -> dict:
        return {
            "query": self.query,
            "context_blocks": [list(b) for b in self.context_blocks],
            "total_prompt_tokens": self.total_prompt_tokens,
            "window": self.window,
            "max_output_tokens": self.max_output_tokens,
        }


def assemble_prompt(query: str, result: RetrievalResult, chunks: dict[str, str], window: int,
                    decoding: DecodingParams, preamble: str = PREAMBLE) -> PromptBundle:
    """Fit retrieved chunks into ``window - max_output_tokens`` prompt tokens.

    ``chunks`` maps chunk_id to the text to show the model. Blocks are
    taken in retrieval order; the first block that does not fit whole is
    cut to the remaining budget and everything ranked below it is
    dropped. Block headers are charged against the budget.
    """
    fixed = count_tokens(render_prompt(preamble, query, ()))
    available = window - decoding.max_output_tokens - fixed
    if available < 0:
        raise BudgetError("query exceeds window")

    blocks: list[tuple[str, str]] = []
    for i, sel in enumerate(result.selected, start=1):
        text = chunks[sel.chunk_id]
        room = available - count_tokens(_block_header(i, sel.chunk_id))
        if room <= 0:
            break
        n = count_tokens(text)
        if n <= room:
            blocks.append((sel.chunk_id, text))
            available = room - n
            continue
        blocks.append((sel.chunk_id, truncate_tokens(text, room)))
        break

    total = count_tokens(render_prompt(preamble, query, blocks))
    return PromptBundle(preamble, query, tuple(blocks), total, window, decoding.max_output_tokens)


@dataclass(frozen=True)
class GenerationResponse:
    answer: str
    backend_id: str
    prompt_tokens: int
    output_tokens: int
    request: dict | None = None


class Backend(Protocol):
    backend_id: str

    def generate(self, bundle: PromptBundle, decoding: DecodingParams) -> GenerationResponse: ...


def stub_generate(seed: int, bundle: PromptBundle) -> GenerationResponse:
    """Extractive answer: leading tokens of the top-ranked context block."""
    if not bundle.context_blocks:
        answer = NO_CONTEXT_ANSWER
    else:
        words = tokenize(bundle.context_blocks[0][1])[:STUB_ANSWER_TOKENS]
        answer = "Answer: " + " ".join(words) if words else NO_CONTEXT_ANSWER
    return GenerationResponse(answer, f"stub:{seed}", bundle.total_prompt_tokens, count_tokens(answer))


class StubBackend:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.backend_id = f"stub:{seed}"

    def generate(self, bundle: PromptBundle, decoding: DecodingParams) -> GenerationResponse:
        return stub_generate(self.seed, bundle)


# --- remote dialects -------------------------------------------------------
# build(model, prompt, decoding) -> request body; parse(payload) -> text.

def _build_normalized(model: str, prompt: str, d: DecodingParams) -> dict:
    return {"model": model, "prompt": prompt, "temperature": d.temperature,
            "top_p": d.effective_top_p, "max_tokens": d.max_output_tokens}


def _build_openai_chat(model: str, prompt: str, d: DecodingParams) -> dict:
    return {"model": model, "messages": [{"role": "user", "content": prompt}],
            "temperature": d.temperature, "top_p": d.effective_top_p, "max_tokens": d.max_output_tokens}


def _build_openai_completion(model: str, prompt: str, d: DecodingParams) -> dict:
    return _build_normalized(model, prompt, d)


def _build_ollama(model: str, prompt: str, d: DecodingParams) -> dict:
    # no greedy switch in the options; greedy is sent as top_p=1.0
    return {"model": model, "prompt": prompt, "stream": False,
            "options": {"temperature": d.temperature, "top_p": d.effective_top_p,
                        "num_predict": d.max_output_tokens}}


def _build_hf_tgi(model: str, prompt: str, d: DecodingParams) -> dict:
    params: dict[str, Any] = {"temperature": d.temperature, "max_new_tokens": d.max_output_tokens,
                              "return_full_text": False,
                              "do_sample": d.strategy == DecodingStrategy.NUCLEUS}
    # TGI rejects top_p == 1.0, so greedy relies on do_sample=false alone
    if d.strategy == DecodingStrategy.NUCLEUS:
        params["top_p"] = d.top_p
    return {"inputs": prompt, "parameters": params}


def _parse_normalized(p: Any) -> str:
    return p["text"]


def _parse_openai_chat(p: Any) -> str:
    return p["choices"][0]["message"]["content"]


def _parse_openai_completion(p: Any) -> str:
    return p["choices"][0]["text"]


def _parse_ollama(p: Any) -> str:
    return p["response"]


def _parse_hf_tgi(p: Any) -> str:
    if isinstance(p, list):
        p = p[0]
    return p["generated_text"]


DIALECTS = {
    "normalized": (_build_normalized, _parse_normalized),
    "openai-chat": (_build_openai_chat, _parse_openai_chat),
    "openai-completion": (_build_openai_completion, _parse_openai_completion),
    "ollama": (_build_ollama, _parse_ollama),
    "hf-tgi": (_build_hf_tgi, _parse_hf_tgi),
}


class RemoteBackend:
    """One LLM endpoint reached through a dialect adapter.

    The most recent outgoing body is kept on ``last_request`` and each
    request's decoding fields are logged, so what was actually sent is
    auditable.
    """

    def __init__(self, endpoint_url: str, model: str, dialect: str = "normalized", *,
                 max_in_flight: int = 2, retries: int = 3, backoff: float = 0.5,
                 transport: httpx.BaseTransport | None = None):
        if dialect not in DIALECTS:
            raise ValueError(f"unknown generation dialect {dialect!r}")
        self.model = model
        self.dialect = dialect
        self.backend_id = f"{dialect}:{model}"
        self._build, self._parse = DIALECTS[dialect]
        self._client = JsonClient(endpoint_url, retries=retries, backoff=backoff, transport=transport)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.last_request: dict | None = None

    def build_request(self, prompt: str, decoding: DecodingParams) -> dict:
        return self._build(self.model, prompt, decoding)

    def _send(self, prompt: str, decoding: DecodingParams) -> tuple[str, dict]:
        body = self.build_request(prompt, decoding)
        self.last_request = body
        logger.info("POST %s decoding=%s", self.backend_id,
                    {k: v for k, v in body.items() if k not in ("prompt", "messages", "inputs")})
        with self._slots:
            payload = self._client.post(body)
        try:
            text = self._parse(payload)
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion from {self.backend_id}: {exc!r}") from None
        return (text or "").strip(), body

    def complete(self, prompt: str, decoding: DecodingParams) -> str:
        return self._send(prompt, decoding)[0]

    def generate(self, bundle: PromptBundle, decoding: DecodingParams) -> GenerationResponse:
        text, body = self._send(bundle.text, decoding)
        if not text:
            raise ProviderError("empty answer")
        request = {k: v for k, v in body.items() if k not in ("prompt", "messages", "inputs")}
        return GenerationResponse(text, self.backend_id, bundle.total_prompt_tokens, count_tokens(text), request)

    def close(self) -> None:
        self._client.close()


def generate(backend: Backend, bundle: PromptBundle, decoding: DecodingParams) -> GenerationResponse:
    """Check the window locally, then delegate to ``backend``."""
    if bundle.total_prompt_tokens + decoding.max_output_tokens > bundle.window:
        raise BudgetError(
            f"prompt ({bundle.total_prompt_tokens}) + output ({decoding.max_output_tokens}) "
            f"exceeds window {bundle.window}; refusing to send")
    resp = backend.generate(bundle, decoding)
    if not resp.answer.strip():
        raise ProviderError("empty answer")
    return resp

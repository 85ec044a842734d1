"""JSON-over-HTTP POST with bounded retries, shared by every remote provider."""

from __future__ import annotations

import logging
import os
import time
from typing import Any

import httpx

logger = logging.getLogger(__name__)

API_KEY_ENV = "RAGBENCH_API_KEY"


class ProviderError(RuntimeError):
    """A remote provider failed or returned something unusable."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message if status is None else f"{message} (HTTP {status})")
        self.status = status


def auth_headers() -> dict[str, str]:
    key = os.environ.get(API_KEY_ENV)
    return {"Authorization": f"Bearer {key}"} if key else {}


class JsonClient:
    """Thin httpx wrapper: POST a JSON body, retry transport errors, 429 and 5xx.

    ``retries`` counts attempts after the first, with delays of
    ``backoff * 2**i`` seconds between them.
    """

    def __init__(self, url: str, *, retries: int = 3, backoff: float = 0.5,
                 timeout: float = 120.0, transport: httpx.BaseTransport | None = None):
        self.url = url
        self.retries = retries
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def post(self, body: dict[str, Any]) -> Any:
        status = None
        last_error = "request failed"
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=body, headers=auth_headers())
            except httpx.HTTPError as exc:
                status, last_error = None, f"{type(exc).__name__}: {exc}"
                logger.warning("POST %s failed (attempt %d): %s", self.url, attempt + 1, last_error)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                status, last_error = resp.status_code, "server error"
                logger.warning("POST %s -> %d (attempt %d)", self.url, status, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"POST {self.url} rejected: {resp.text[:200]}", resp.status_code)
            try:
                return resp.json()
            except ValueError:
                raise ProviderError(f"POST {self.url} returned non-JSON body", resp.status_code) from None
        raise ProviderError(f"POST {self.url} failed after {self.retries} retries: {last_error}", status)

    def close(self) -> None:
        self._client.close()

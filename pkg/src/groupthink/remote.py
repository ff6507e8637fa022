"""Adapter for an OpenAI-compatible text completion server.

A completion endpoint regenerates from text on every call, so token-level
interleaving is approximated in chunks: each engine step asks the server for
up to ``chunk_tokens`` tokens per thinker, with the thinker's context rebuilt
from every chain it is allowed to see.  ``chunk_tokens=1`` is the faithful
but expensive setting.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, replace
from importlib import resources

import httpx
import numpy as np

from .engine import Request, SamplerConfig, SourceError
from .scheduler import GroupConfig
from .tokenizer import Token

log = logging.getLogger(__name__)

ENV_BASE_URL = "GROUPTHINK_BASE_URL"
ENV_MODEL = "GROUPTHINK_MODEL"
ENV_API_KEY = "GROUPTHINK_API_KEY"
RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteError(RuntimeError):
    pass


@dataclass(frozen=True)
class RemoteConfig:
    base_url: str | None = None
    model: str | None = None
    api_key: str | None = None
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 1.0
    chunk_tokens: int = 1

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.chunk_tokens < 1:
            raise ValueError("chunk_tokens must be >= 1")

    def resolved(self, env: Mapping[str, str] | None = None) -> RemoteConfig:
        """Fill unset endpoint fields from the environment."""
        env = os.environ if env is None else env
        cfg = replace(
            self,
            base_url=self.base_url or env.get(ENV_BASE_URL) or env.get("OPENAI_BASE_URL"),
            model=self.model or env.get(ENV_MODEL),
            api_key=self.api_key or env.get(ENV_API_KEY) or env.get("OPENAI_API_KEY"),
        )
        if not cfg.base_url:
            raise ValueError(f"remote source needs a base URL (set {ENV_BASE_URL})")
        if not cfg.model:
            raise ValueError(f"remote source needs a model name (set {ENV_MODEL})")
        return cfg

    @classmethod
    def from_dict(cls, d: Mapping) -> RemoteConfig:
        fields = {"base_url", "model", "api_key", "timeout", "retries", "backoff", "chunk_tokens"}
        extra = set(d) - fields
        if extra:
            raise ValueError(f"unknown remote fields: {sorted(extra)}")
        return cls(**d)


class CompletionClient:
    """Minimal ``/completions`` client with retry and exponential backoff."""

    def __init__(
        self,
        config: RemoteConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config.resolved() if not (config.base_url and config.model) else config
        headers = {}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        self._http = httpx.Client(
            base_url=self.config.base_url.rstrip("/"),
            headers=headers,
            timeout=self.config.timeout,
            transport=transport,
        )
        self._sleep = sleep
        self.calls = 0

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> CompletionClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def complete(
        self,
        prompt: str,
        max_tokens: int,
        *,
        temperature: float = 0.0,
        seed: int | None = None,
        stop: Sequence[str] | None = None,
    ) -> str:
        body = {
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": temperature,
        }
        if seed is not None:
            body["seed"] = seed
        if stop:
            body["stop"] = list(stop)
        last_error = "no attempt made"
        for attempt in range(self.config.retries + 1):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            self.calls += 1
            try:
                resp = self._http.post("/completions", json=body)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                log.warning("completion request failed (attempt %d): %s", attempt + 1, last_error)
                continue
            if resp.status_code in RETRY_STATUS:
                last_error = f"HTTP {resp.status_code}"
                log.warning("completion request returned %s (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code != 200:
                raise RemoteError(f"completion request failed with HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["text"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise RemoteError(f"malformed completion response: {exc}") from None
        raise RemoteError(f"completion request failed after {self.config.retries + 1} attempts ({last_error})")


def default_template() -> str:
    return resources.files("groupthink").joinpath("data/group_think_prompt.txt").read_text(encoding="utf-8")


def render_context(template: str, question: str, agent: int, chains: Mapping[int, Sequence[str]]) -> str:
    """Thinker prompt, then other visible thinkers' text, then the thinker's own text."""
    head = template.replace("{QUESTION}", question).replace("{ThinkerID}", str(agent))
    others = [(m, "".join(chains[m])) for m in sorted(chains) if m != agent]
    parts = [head.rstrip("\n")]
    if others:
        parts.append("\n\n[Other thinkers so far]")
        parts.extend(f"\nThinker{m}: {text}" for m, text in others)
        parts.append(f"\n\n[Thinker{agent}]")
    parts.append("\n" + "".join(chains.get(agent, [])))
    return "".join(parts)


class RemoteSource:
    """Token source that asks a completion server for one chunk per step."""

    def __init__(
        self,
        client: CompletionClient,
        question: str,
        *,
        template: str | None = None,
        temperature: float = 0.0,
        seed: int | None = None,
    ):
        self.client = client
        self.question = question
        self.template = default_template() if template is None else template
        self.temperature = temperature
        self.seed = seed
        self._vocab: dict[str, int] = {}

    @property
    def chunk_tokens(self) -> int:
        return self.client.config.chunk_tokens

    def begin(self, cfg: GroupConfig) -> None:
        self._vocab.clear()

    def _token(self, text: str) -> Token:
        return Token(self._vocab.setdefault(text, len(self._vocab)), text)

    def propose(self, requests: Sequence[Request]) -> list[Token | None]:
        out = []
        for r in requests:
            context = render_context(self.template, self.question, r.target.agent, r.chains())
            try:
                text = self.client.complete(
                    context, self.chunk_tokens, temperature=self.temperature, seed=self.seed
                )
            except RemoteError as exc:
                raise SourceError(str(exc)) from exc
            # an empty completion means the server stopped this thinker
            out.append(self._token(text) if text else None)
        return out

    def answer(self, context, budget, sampler: SamplerConfig, rng: np.random.Generator, end_token) -> list[Token]:
        text = "".join(t.text for t in context)
        try:
            reply = self.client.complete(text, budget, temperature=sampler.temperature, seed=sampler.seed)
        except RemoteError as exc:
            raise SourceError(str(exc)) from exc
        return [self._token(reply)] if reply else []


JUDGE_TEMPLATE = """Below is a multi-step coding problem, a reference solution, and a candidate response.
Reproduce the candidate response unchanged, inserting <DONE_STEP_i> right after the code that correctly implements step i,
or <PARTIAL_STEP_i> when step i is only partly implemented. Return JSON with the key "code_with_evaluation_tokens".

Problem:
{QUESTION}

Reference solution:
{STANDARD_ANSWER}

Candidate response:
{RESPONSE}
"""


class RemoteJudge:
    """Step-marker judge backed by the same completion client."""

    def __init__(self, client: CompletionClient, *, template: str = JUDGE_TEMPLATE, max_tokens: int = 4096):
        self.client = client
        self.template = template
        self.max_tokens = max_tokens

    def mark_steps(self, question: str, standard_answer: str, response: str) -> str:
        prompt = (
            self.template.replace("{QUESTION}", question)
            .replace("{STANDARD_ANSWER}", standard_answer)
            .replace("{RESPONSE}", response)
        )
        reply = self.client.complete(prompt, self.max_tokens)
        start, end = reply.find("{"), reply.rfind("}")
        if start != -1 and end > start:
            try:
                payload = json.loads(reply[start : end + 1])
            except ValueError:
                return reply
            if isinstance(payload, dict) and isinstance(payload.get("code_with_evaluation_tokens"), str):
                return payload["code_with_evaluation_tokens"]
        return reply

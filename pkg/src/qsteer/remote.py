"""Chat-completions client that lets a hosted language model act as the proposer.

Wire format: ``POST {base_url}/v1/chat/completions`` with ``model``,
``messages``, ``temperature`` and ``n``; each ``choices[i].message.content``
is parsed for its last ``Action: ...`` line.  The bearer token is read from
``Q_STEER_API_KEY``.
"""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass
from typing import Callable, Optional

import httpx
import numpy as np

from qsteer.env import canonicalize
from qsteer.policy import Context, dedup

log = logging.getLogger(__name__)

API_KEY_ENV = "Q_STEER_API_KEY"
INVALID_ACTION = "invalid[]"
PROMPT_VERSION = "react-v1"

SYSTEM_PROMPT = (
    "You are an agent acting in a text environment. At each turn, think step by step "
    "and then give exactly one action.\n"
    "Reply in the format:\n"
    "Thought: <your reasoning>\n"
    "Action: <one of the available actions, copied exactly>"
)

_ACTION_RE = re.compile(r"^\s*action\s*:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)


class RemoteError(RuntimeError):
    pass


class MalformedResponse(RemoteError):
    pass


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    timeout: float = 30.0
    attempts: int = 3
    backoff: float = 0.5
    api_key: Optional[str] = None

    def token(self) -> Optional[str]:
        return self.api_key if self.api_key is not None else os.environ.get(API_KEY_ENV)


def render_prompt(context: Context) -> list[dict]:
    """ReAct-style messages for one decision."""
    lines = [f"Instruction: {context.instruction.text}"]
    for action, obs in context.prefix:
        lines.append(f"Action: {action}")
        lines.append(f"Observation: {obs}")
    if not context.prefix:
        lines.append(f"Observation: {context.observation}")
    lines.append("Available actions: " + ", ".join(context.candidates))
    return [
        {"role": "system", "content": SYSTEM_PROMPT},
        {"role": "user", "content": "\n".join(lines)},
    ]


def parse_action(content: str) -> str:
    """The last ``Action:`` line of a completion (canonicalized), or the invalid-action sentinel."""
    found = _ACTION_RE.findall(content or "")
    return canonicalize(found[-1]) if found else INVALID_ACTION


def _retryable(exc: Exception) -> bool:
    if isinstance(exc, httpx.TransportError):
        return True
    return isinstance(exc, httpx.HTTPStatusError) and exc.response.status_code >= 500


def remote_propose(
    config: EndpointConfig,
    context: Context,
    n: int,
    temperature: float,
    client: Optional[httpx.Client] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[str]:
    """One request for ``n`` samples; returns deduplicated parsed actions.

    Transport errors and 5xx responses are retried with exponential backoff
    (``backoff * 2**k`` seconds); other HTTP errors fail immediately.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    body = {"model": config.model, "messages": render_prompt(context), "temperature": temperature, "n": n}
    headers = {}
    token = config.token()
    if token:
        headers["Authorization"] = f"Bearer {token}"
    url = config.base_url.rstrip("/") + "/v1/chat/completions"
    own = client is None
    client = client or httpx.Client(timeout=config.timeout)
    try:
        for attempt in range(config.attempts):
            try:
                resp = client.post(url, json=body, headers=headers)
                resp.raise_for_status()
                break
            except (httpx.TransportError, httpx.HTTPStatusError) as e:
                if not _retryable(e):
                    raise RemoteError(f"request failed: {e}") from e
                if attempt == config.attempts - 1:
                    raise RemoteError(f"endpoint unreachable after {config.attempts} attempts: {e}") from e
                delay = config.backoff * 2 ** attempt
                log.warning("attempt %d failed (%s); retrying in %.2fs", attempt + 1, e, delay)
                sleep(delay)
    finally:
        if own:
            client.close()
    try:
        choices = resp.json()["choices"]
        contents = [c["message"]["content"] for c in choices]
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedResponse(f"malformed completion body: {e}") from e
    if not contents:
        raise MalformedResponse("completion body has no choices")
    return dedup(parse_action(c) for c in contents)


@dataclass
class RemotePolicy:
    """Proposer backed by a chat-completions endpoint.  The rng is unused;
    sampling randomness lives on the server."""

    config: EndpointConfig

    def propose(self, context: Context, n: int, temperature: float, rng: np.random.Generator) -> list[str]:
        return remote_propose(self.config, context, n, temperature)

    def greedy(self, context: Context, rng: np.random.Generator) -> str:
        return remote_propose(self.config, context, 1, 0.0)[0]

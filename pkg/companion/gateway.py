from __future__ import annotations
import os
import re
import json
import time
import hashlib
import logging
import threading
from pathlib import Path
from logging import Logger
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional

import requests

from .logging import getLogger
from .data import Data, FormatError


DEFAULT_TEMPERATURE = 0.2
DEFAULT_TOP_P = 0.9
DEFAULT_MAX_TOKENS = 1024
MAX_IN_FLIGHT = 4
MAX_RETRIES = 3
RETRY_STATUS = (429, 500, 502, 503, 504)
API_KEY_VAR = "CA_LLM_API_KEY"
BASE_URL_VAR = "CA_LLM_BASE_URL"
MODEL_VAR = "CA_LLM_MODEL"

FENCED_BLOCK = re.compile(r"```[ \t]*(?:json|JSON)?[ \t]*\n?(.*?)```", re.DOTALL)


class GatewayError(Exception):
    """
    Base class of every failure to obtain a completion
    """


class TransportError(GatewayError):
    """
    The chat-completion endpoint could not be reached, even after retrying
    """


class MissingScriptError(GatewayError):
    """
    The mock gateway has no scripted response for a request
    """


class StructuredOutputError(ValueError):
    """
    A completion does not contain a parseable fenced JSON object
    """


def fingerprint(system_prompt: str, user_prompt: str) -> str:
    """
    Hash both prompts of a request

    Parameters
    ----------
    system_prompt : str
        The system prompt
    user_prompt : str
        The user prompt

    Returns
    -------
    str
        The hex SHA-256 digest of the UTF-8 bytes of both prompts, separated by a
        NUL byte
    """
    digest = hashlib.sha256()
    digest.update(system_prompt.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(user_prompt.encode("utf-8"))
    return digest.hexdigest()


@dataclass(frozen=True)
class ChatRequest:
    """
    A single chat-completion request

    Attributes
    ----------
    system_prompt : str
        Instructions for the model
    user_prompt : str
        The content of the request
    temperature : float
        The sampling temperature, in [0, 2]
    top_p : float
        The nucleus sampling mass, in (0, 1]
    max_tokens : int
        The maximum length of the completion
    model_id : str
        The model to ask. The gateway's own model is used if empty.
    """

    system_prompt: str
    user_prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int = DEFAULT_MAX_TOKENS
    model_id: str = ""

    def __post_init__(self):
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"Temperature {self.temperature} is not in [0, 2]")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p {self.top_p} is not in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, not {self.max_tokens}")

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.system_prompt, self.user_prompt)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Optional[dict] = None
    latency: float = 0.0


def extract_fenced_json(text: str) -> dict:
    """
    Parse the first fenced JSON block of a completion

    Parameters
    ----------
    text : str
        The completion text

    Returns
    -------
    dict
        The parsed JSON object

    Raises
    ------
    StructuredOutputError
        If there is no fenced block or it doesn't hold a JSON object
    """
    match = FENCED_BLOCK.search(text)
    if match is None:
        raise StructuredOutputError("The reply has no fenced JSON block")
    try:
        obj = json.loads(match.group(1))
    except json.JSONDecodeError as e:
        raise StructuredOutputError(f"The fenced block is not valid JSON: {e}")
    if not isinstance(obj, dict):
        raise StructuredOutputError("The fenced block must hold a JSON object")
    return obj


class Gateway(ABC):
    """
    The single point through which every LLM completion is obtained

    Attributes
    ----------
    model : str
        The model to ask when a request doesn't name one
    max_in_flight : int
        The maximum number of concurrent requests
    log: Logger
        A logging instance for recording debug statements.
    """

    def __init__(
        self, model: str = "", max_in_flight: int = MAX_IN_FLIGHT, log: Logger = None
    ):
        if max_in_flight < 1:
            raise ValueError("The gateway needs room for at least one request")
        self.model = model
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.log = log or logging.getLogger(self.__class__.__name__)

    @abstractmethod
    def _complete(self, request: ChatRequest) -> tuple[str, Optional[dict]]:
        """
        Obtain the completion text and token usage of a request

        Implementations hold one of :py:attr:`_slots` while a request is outstanding
        and release it before waiting to retry.
        """
        pass

    def chat(self, request: ChatRequest) -> ChatResponse:
        """
        Send a request and wait for its completion

        Parameters
        ----------
        request : ChatRequest
            The request

        Returns
        -------
        ChatResponse
            The completion

        Raises
        ------
        TransportError
            If the endpoint fails even after retrying
        MissingScriptError
            If a mock gateway has no response for the request
        """
        start = time.perf_counter()
        text, usage = self._complete(request)
        latency = time.perf_counter() - start
        self.log.debug(
            f"Completed request {request.fingerprint[:12]} in {latency:.3f}s"
        )
        return ChatResponse(text=text, usage=usage, latency=latency)

    def ask(self, system_prompt: str, user_prompt: str) -> str:
        """
        Send a request with the default decoding parameters and return its text
        """
        request = ChatRequest(system_prompt, user_prompt, model_id=self.model)
        return self.chat(request).text

    def ask_json(self, system_prompt: str, user_prompt: str) -> dict:
        """
        Send a request whose reply must be a fenced JSON object

        Raises
        ------
        GatewayError
            If the completion could not be obtained
        StructuredOutputError
            If the reply doesn't contain a fenced JSON object
        """
        return extract_fenced_json(self.ask(system_prompt, user_prompt))


class MockScript(Data):
    """
    A file of scripted completions, keyed by request fingerprint

    Attributes
    ----------
    data : dict[str, str]
        Maps a request fingerprint to its response text
    fname : Path | str
        The path to the file (named <name>.mockscript.json by convention)
    log: Logger
        A logging instance for recording debug statements.
    """

    @classmethod
    def load(cls: MockScript, fname: Path | str, log: Logger = None) -> MockScript:
        script = cls(fname, log=log)
        script.read()
        return script

    def read(self):
        """
        Read the scripted responses

        Raises
        ------
        FileNotFoundError
            If the file does not exist
        FormatError
            If the file isn't a JSON object of strings
        """
        super().read()
        with self.hook_compressed(self.fname, mode="r") as handle:
            try:
                obj = json.load(handle)
            except json.JSONDecodeError as e:
                raise FormatError(f"{self.fname} is not valid JSON: {e}") from e
        if not isinstance(obj, dict) or not all(
            isinstance(v, str) for v in obj.values()
        ):
            raise FormatError(f"{self.fname} must map fingerprints to response text")
        self.data = obj
        self.log.info(f"Loaded {len(obj)} scripted responses from {self.fname}")

    def __iter__(self):
        if self.unset():
            self.read()
        return iter(self.data.items())

    def write(self):
        self._write_text(
            json.dumps(self.data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        )


class MockGateway(Gateway):
    """
    A deterministic gateway that replays scripted responses

    Attributes
    ----------
    script : dict[str, str]
        Maps a request fingerprint to its response text
    """

    def __init__(
        self,
        script: dict[str, str] = None,
        max_in_flight: int = MAX_IN_FLIGHT,
        log: Logger = None,
    ):
        super().__init__(model="mock", max_in_flight=max_in_flight, log=log)
        self.script = dict(script or {})

    @classmethod
    def from_file(
        cls: MockGateway,
        fname: Path | str,
        max_in_flight: int = MAX_IN_FLIGHT,
        log: Logger = None,
    ):
        return cls(MockScript.load(fname, log=log).data, max_in_flight, log=log)

    @classmethod
    def scripted(cls: MockGateway, responses: dict, log: Logger = None):
        """
        Create a mock gateway from a map of (system prompt, user prompt) to text
        """
        return cls(
            {fingerprint(*prompts): text for prompts, text in responses.items()},
            log=log,
        )

    def _complete(self, request: ChatRequest) -> tuple[str, Optional[dict]]:
        try:
            with self._slots:
                return self.script[request.fingerprint], None
        except KeyError:
            raise MissingScriptError(
                f"No scripted response for request {request.fingerprint}"
            ) from None


class HTTPGateway(Gateway):
    """
    A client for an OpenAI-compatible chat-completion endpoint

    Transient failures (timeouts, connection errors, 429 and 5xx responses) are
    retried with exponential backoff

    Attributes
    ----------
    base_url : str
        The URL below which /chat/completions is found
    api_key : str, optional
        The bearer credential, read from CA_LLM_API_KEY by default
    timeout : float
        The number of seconds to wait for a single response
    max_retries : int
        How many times to retry a transient failure
    backoff : float
        The delay before the first retry. It doubles for each further retry.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "",
        api_key: str = None,
        timeout: float = 60.0,
        max_retries: int = MAX_RETRIES,
        backoff: float = 1.0,
        max_in_flight: int = MAX_IN_FLIGHT,
        session: requests.Session = None,
        sleep: Callable[[float], None] = time.sleep,
        log: Logger = None,
    ):
        super().__init__(model=model, max_in_flight=max_in_flight, log=log)
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_VAR)
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self._sleep = sleep

    def _payload(self, request: ChatRequest) -> dict:
        return {
            "model": request.model_id or self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }

    def _complete(self, request: ChatRequest) -> tuple[str, Optional[dict]]:
        url = self.base_url + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = self._payload(request)
        problem = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                delay = self.backoff * 2 ** (attempt - 1)
                self.log.warning(f"{problem}; retrying in {delay:g}s")
                self._sleep(delay)
            try:
                with self._slots:
                    resp = self.session.post(
                        url, json=payload, headers=headers, timeout=self.timeout
                    )
            except (requests.Timeout, requests.ConnectionError) as e:
                problem = f"Request to {url} failed ({e.__class__.__name__})"
                continue
            if resp.status_code in RETRY_STATUS:
                problem = f"Request to {url} returned HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise TransportError(
                    f"Request to {url} returned HTTP {resp.status_code}: {resp.text}"
                )
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise TransportError(f"Unexpected response from {url}: {e!r}")
            if text is None:
                raise TransportError(f"The response from {url} has no text")
            return text, body.get("usage")
        raise TransportError(f"{problem} after {self.max_retries + 1} attempts")


def make_gateway(
    mock_script: Path = None,
    base_url: str = None,
    model: str = None,
    max_in_flight: int = MAX_IN_FLIGHT,
    log: Logger = None,
) -> Optional[Gateway]:
    """
    Create the gateway described by command-line settings and the environment

    Parameters
    ----------
    mock_script : Path, optional
        A .mockscript.json file. If provided, a mock gateway is returned.
    base_url : str, optional
        The endpoint of a live gateway. Defaults to CA_LLM_BASE_URL.
    model : str, optional
        The model of a live gateway. Defaults to CA_LLM_MODEL.
    max_in_flight : int, optional
        The maximum number of concurrent requests
    log : Logger, optional
        A logging instance

    Returns
    -------
    Gateway | None
        None if neither a mock script nor an endpoint is configured, in which case
        every component uses its offline fallback
    """
    if log is None:
        log = getLogger(name="gateway", level="ERROR")
    if mock_script is not None:
        log.info(f"Using scripted responses from {mock_script}")
        return MockGateway.from_file(mock_script, max_in_flight, log=log)
    base_url = base_url or os.environ.get(BASE_URL_VAR)
    if base_url:
        model = model or os.environ.get(MODEL_VAR, "")
        log.info(f"Using the chat-completion endpoint at {base_url}")
        return HTTPGateway(base_url, model=model, max_in_flight=max_in_flight, log=log)
    log.info("No LLM configured. Offline fallbacks will be used.")
    return None

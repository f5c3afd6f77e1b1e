"""JSON prompt protocol for vision-language predictors.

A layout is serialized to a list of element records plus the rendered layout
(target removed), sent to a chat endpoint, and the reply is parsed back into a
box. Endpoints are pluggable: :class:`HttpChatEndpoint` speaks the common
chat-completions JSON shape and :class:`MockEndpoint` is deterministic for tests.

Endpoint configuration is read from the environment:

    TEXTPLACE_BASE_URL   e.g. https://api.example.com/v1
    TEXTPLACE_API_KEY
    TEXTPLACE_MODEL
    TEXTPLACE_TIMEOUT    seconds, default 60
    TEXTPLACE_RETRIES    default 3
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from .layout import BBox, Layout, Raster, render_layout, validate_layout

log = logging.getLogger(__name__)

BLANK = "{blank}"
PREAMBLE_VERSION = "v1"
KEYS = ("type", "text", "left", "top", "width", "height")
BOX_KEYS = ("left", "top", "width", "height")
STATUSES = ("valid", "invalid_format", "out_of_range_clamped")
SORTS = ("reading", "column", "input")


def load_preamble(version: str = PREAMBLE_VERSION) -> str:
    return resources.files("textplace.resources").joinpath(f"preamble_{version}.txt").read_text("utf-8")


@dataclass(frozen=True)
class PromptRecord:
    type: str
    text: str
    left: float | None
    top: float | None
    width: float | None
    height: float | None

    def to_json(self) -> str:
        """Canonical form: fixed key order, six-decimal numbers, no spaces."""
        parts = [f'"type":{json.dumps(self.type)}', f'"text":{json.dumps(self.text)}']
        for key in BOX_KEYS:
            value = getattr(self, key)
            parts.append(f'"{key}":' + ("null" if value is None else f"{value:.6f}"))
        return "{" + ",".join(parts) + "}"


@dataclass(frozen=True)
class PromptDocument:
    layout_id: str
    records: tuple[PromptRecord, ...]
    image: Raster

    @property
    def target(self) -> PromptRecord:
        return self.records[-1]

    def records_json(self) -> str:
        return "[\n" + ",\n".join(r.to_json() for r in self.records) + "\n]\n"

    def to_bytes(self) -> bytes:
        """Everything the predictor sees, image first."""
        return self.image.to_ppm() + self.records_json().encode("utf-8")


def _sort_key(sort: str) -> Callable:
    if sort == "reading":
        return lambda item: (item[1].bbox.top, item[1].bbox.left, item[0])
    if sort == "column":
        return lambda item: (item[1].bbox.left, item[1].bbox.top, item[0])
    if sort == "input":
        return lambda item: item[0]
    raise ValueError(f"unknown sort {sort!r}; expected one of {SORTS}")


def serialize_prompt(layout: Layout, sort: str = "reading") -> PromptDocument:
    problems = validate_layout(layout)
    if problems:
        raise ValueError(f"invalid layout {layout.id!r}: {'; '.join(problems)}")
    records = []
    for _, el in sorted(layout.context(), key=_sort_key(sort)):
        text = el.text if el.kind.value == "textElement" else BLANK
        b = el.bbox
        records.append(PromptRecord(el.kind.value, text, b.left, b.top, b.width, b.height))
    target = layout.target
    records.append(PromptRecord(target.kind.value, target.text, None, None, None, None))
    return PromptDocument(layout.id, tuple(records), render_layout(layout, exclude_target=True))


@dataclass(frozen=True)
class PredictorResponse:
    raw: str
    parsed: BBox | None
    status: str
    latency: float | None = None
    retries: int = 0

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if (self.parsed is None) != (self.status == "invalid_format"):
            raise ValueError("parsed box must be present exactly when the format is valid")


def format_bbox_response(bbox: BBox) -> str:
    """Canonical reply for a box; :func:`parse_response` inverts it exactly."""
    return json.dumps(dict(zip(BOX_KEYS, bbox.as_tuple())))


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _first_box_object(raw: str) -> dict | None:
    decoder = json.JSONDecoder()
    pos = raw.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(raw, pos)
        except ValueError:
            obj = None
        if isinstance(obj, dict) and all(k in obj for k in BOX_KEYS):
            return obj
        pos = raw.find("{", pos + 1)
    return None


def parse_response(raw: str) -> PredictorResponse:
    obj = _first_box_object(raw)
    if obj is None or not all(_is_number(obj[k]) for k in BOX_KEYS):
        return PredictorResponse(raw, None, "invalid_format")
    values = [float(obj[k]) for k in BOX_KEYS]
    clamped = [min(1.0, max(0.0, v)) for v in values]
    status = "valid" if clamped == values else "out_of_range_clamped"
    return PredictorResponse(raw, BBox(*clamped), status)


@dataclass(frozen=True)
class Tally:
    valid: int = 0
    invalid_format: int = 0
    out_of_range_clamped: int = 0

    def __add__(self, other: "Tally") -> "Tally":
        return Tally(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.valid, self.invalid_format, self.out_of_range_clamped)

    def as_dict(self) -> dict[str, int]:
        return dict(zip(STATUSES, self.as_tuple()))


def tally_invalid(responses: Iterable[PredictorResponse | str]) -> Tally:
    counts = dict.fromkeys(STATUSES, 0)
    for r in responses:
        counts[r if isinstance(r, str) else r.status] += 1
    return Tally(**counts)


class PredictorError(RuntimeError):
    pass


class PredictorUnavailable(PredictorError):
    def __init__(self, cause: str = ""):
        super().__init__("predictor unavailable" + (f": {cause}" if cause else ""))


class Unauthorized(PredictorError):
    def __init__(self, cause: str = ""):
        super().__init__("unauthorized" + (f": {cause}" if cause else ""))


class TransientError(PredictorError):
    """A failure worth retrying (transport error, timeout, 429, 5xx)."""


def raster_png(raster: Raster) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(raster.to_array()).save(buf, format="PNG")
    return buf.getvalue()


def build_messages(prompt: PromptDocument, preamble: str) -> list[dict]:
    """Chat messages with the image placed before the element records."""
    data_url = "data:image/png;base64," + base64.b64encode(raster_png(prompt.image)).decode("ascii")
    return [
        {"role": "system", "content": preamble},
        {"role": "user", "content": [
            {"type": "image_url", "image_url": {"url": data_url}},
            {"type": "text", "text": prompt.records_json()},
        ]},
    ]


class PredictorEndpoint(Protocol):
    def complete(self, messages: list[dict]) -> str: ...


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    api_key: str = ""
    model: str = ""
    timeout: float = 60.0
    retries: int = 3

    @classmethod
    def from_env(cls, env: dict | None = None) -> "EndpointConfig":
        env = os.environ if env is None else env
        base_url = env.get("TEXTPLACE_BASE_URL", "").strip()
        if not base_url:
            raise PredictorError("TEXTPLACE_BASE_URL is not set")
        return cls(
            base_url=base_url,
            api_key=env.get("TEXTPLACE_API_KEY", ""),
            model=env.get("TEXTPLACE_MODEL", ""),
            timeout=float(env.get("TEXTPLACE_TIMEOUT", 60)),
            retries=int(env.get("TEXTPLACE_RETRIES", 3)),
        )


class HttpChatEndpoint:
    """POSTs ``{"model", "messages"}`` to ``<base_url>/chat/completions``."""

    def __init__(self, config: EndpointConfig, client=None):
        import httpx

        self.config = config
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=config.timeout)

    def complete(self, messages: list[dict]) -> str:
        httpx = self._httpx
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {self.config.api_key}"} if self.config.api_key else {}
        body = {"model": self.config.model, "messages": messages, "temperature": 0}
        try:
            resp = self._client.post(url, json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransientError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code in (401, 403):
            raise Unauthorized(f"HTTP {resp.status_code}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise PredictorError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise PredictorError(f"malformed chat response: {exc}") from exc

    def close(self) -> None:
        self._client.close()


class MockEndpoint:
    """Deterministic endpoint: replies with ``reply`` after failing ``failures`` times."""

    def __init__(self, reply: str | Callable[[list[dict]], str], failures: int = 0,
                 unauthorized: bool = False):
        self.reply = reply
        self.failures = failures
        self.unauthorized = unauthorized
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def fixed(cls, bbox, **kw) -> "MockEndpoint":
        return cls(format_bbox_response(BBox.of(bbox)), **kw)

    @classmethod
    def prose(cls, **kw) -> "MockEndpoint":
        return cls("I think the text should go near the top of the design.", **kw)

    def complete(self, messages: list[dict]) -> str:
        with self._lock:
            self.calls += 1
            call = self.calls
        if self.unauthorized:
            raise Unauthorized("mock")
        if call <= self.failures:
            raise TransientError(f"mock failure {call}")
        return self.reply(messages) if callable(self.reply) else self.reply


class TranscriptLog:
    """Thread-safe JSON Lines log of requests and replies."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, entry: dict) -> None:
        line = json.dumps(entry, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def query_predictor(prompt: PromptDocument, endpoint: PredictorEndpoint, *, retries: int = 3,
                    backoff: float = 0.5, sleep: Callable[[float], None] = time.sleep,
                    preamble: str | None = None, transcript: TranscriptLog | None = None,
                    ) -> PredictorResponse:
    """Send one prompt, retrying transient failures with exponential backoff."""
    messages = build_messages(prompt, load_preamble() if preamble is None else preamble)
    entry = {
        "layout_id": prompt.layout_id,
        "preamble_version": PREAMBLE_VERSION if preamble is None else "custom",
        "records": prompt.records_json(),
        "image_sha256": hashlib.sha256(prompt.image.pixels).hexdigest(),
    }
    started = time.perf_counter()
    attempt = 0
    while True:
        try:
            raw = endpoint.complete(messages)
            break
        except TransientError as exc:
            if attempt >= retries:
                error = PredictorUnavailable(str(exc))
                _log_failure(transcript, entry, attempt, error)
                raise error from exc
            delay = backoff * 2 ** attempt
            attempt += 1
            log.warning("layout %s: retry %d/%d after %s (sleep %.2fs)",
                        prompt.layout_id, attempt, retries, exc, delay)
            sleep(delay)
        except PredictorError as exc:
            _log_failure(transcript, entry, attempt, exc)
            raise
    parsed = parse_response(raw)
    response = PredictorResponse(raw, parsed.parsed, parsed.status,
                                 time.perf_counter() - started, attempt)
    if transcript is not None:
        transcript.write({**entry, "raw": raw, "status": response.status,
                          "parsed": None if response.parsed is None else list(response.parsed.as_tuple()),
                          "latency": response.latency, "retries": attempt})
    return response


def _log_failure(transcript: TranscriptLog | None, entry: dict, retries: int, exc: Exception) -> None:
    if transcript is not None:
        transcript.write({**entry, "error": str(exc), "retries": retries})


def query_many(prompts: Sequence[PromptDocument], endpoint: PredictorEndpoint, max_in_flight: int = 4,
               **kwargs) -> list[PredictorResponse | PredictorError]:
    """Query concurrently with at most ``max_in_flight`` outstanding requests.

    Results keep the order of ``prompts``; failures are returned, not raised.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be at least 1")

    def one(prompt):
        try:
            return query_predictor(prompt, endpoint, **kwargs)
        except PredictorError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, prompts))


@dataclass
class VLMPredictor:
    """Layout -> :class:`PredictorResponse` through an endpoint."""

    endpoint: PredictorEndpoint
    name: str = "vlm"
    retries: int = 3
    backoff: float = 0.5
    sort: str = "reading"
    transcript: TranscriptLog | None = None
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)

    def __call__(self, layout: Layout) -> PredictorResponse:
        return query_predictor(serialize_prompt(layout, self.sort), self.endpoint, retries=self.retries,
                               backoff=self.backoff, sleep=self.sleep, transcript=self.transcript)

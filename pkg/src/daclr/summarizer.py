"""Event-summary generation.

Summaries come either from an OpenAI-compatible multimodal chat endpoint or
from a deterministic rule-based extractor that needs no network.
"""

from __future__ import annotations

import base64
import json
import logging
import mimetypes
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator

import httpx

from .events import (
    Claim,
    EventSummary,
    EvidenceDoc,
    Modality,
    mask_structure,
    validate_summary,
)

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "DACLR_API_KEY"
PREPOSITIONS = frozenset({"in", "on", "at", "of", "from", "to"})

_PLACEHOLDER_RE = re.compile(r"\{(input_text|modality)\}")
_TOKEN_RE = re.compile(r"[^\W_]+")


class TemplateError(ValueError):
    pass


class ParseError(ValueError):
    pass


class SummaryQualityError(ValueError):
    pass


class TransportError(RuntimeError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_text: str
    version: str

    def __post_init__(self) -> None:
        for name in ("input_text", "modality"):
            n = self.template_text.count("{%s}" % name)
            if n != 1:
                raise TemplateError(f"template must contain {{{name}}} exactly once, found {n}")

    @classmethod
    def default(cls) -> "PromptTemplate":
        text = resources.files("daclr.assets").joinpath("event_prompt_v1.txt").read_text("utf-8")
        return cls(text, "v1")


@dataclass(frozen=True)
class MllmClientConfig:
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4o"
    api_key_source: str = DEFAULT_API_KEY_ENV
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: float = 1.0
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if not 0 <= self.max_retries <= 10:
            raise ValueError("max_retries must be in [0, 10]")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


def render_prompt(template: PromptTemplate, input_text: str, modality: str) -> str:
    values = {"input_text": input_text, "modality": modality}
    # single pass, so placeholder-like text inside input_text is left alone
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template.template_text)


# ----------------------------------------------------------------------------
# response parsing


def _first_json_object(raw: str) -> dict[str, Any]:
    decoder = json.JSONDecoder()
    i = raw.find("{")
    while i != -1:
        try:
            obj, _ = decoder.raw_decode(raw, i)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            return obj
        i = raw.find("{", i + 1)
    raise ParseError("no JSON object found in response")


def _span_list(value: Any, key: str) -> tuple[str, ...]:
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SummaryQualityError(f"{key!r} must be a list of strings")
    return tuple(v.strip() for v in value)


def parse_response(raw: str, require_structure: bool = False) -> EventSummary:
    """Parse the first JSON object in ``raw`` into a validated EventSummary.

    Surrounding prose and code fences are ignored and keys are matched
    case-insensitively.  A missing ``structure`` is rebuilt by masking the
    summary, unless ``require_structure`` is set.
    """
    obj = {str(k).strip().lower(): v for k, v in _first_json_object(raw).items()}
    summary = obj.get("summary")
    if not isinstance(summary, str) or not summary.strip():
        raise SummaryQualityError("missing or empty 'summary'")
    summary = summary.strip()
    participants = _span_list(obj.get("participants"), "participants")
    attributes = _span_list(obj.get("attributes"), "attributes")
    structure = obj.get("structure")
    if structure is None:
        if require_structure:
            raise SummaryQualityError("missing 'structure'")
        structure = mask_structure(summary, participants, attributes)
    elif not isinstance(structure, str):
        raise SummaryQualityError("'structure' must be a string")
    s = EventSummary(summary, participants, attributes, structure)
    check = validate_summary(s)
    if not check.ok:
        raise SummaryQualityError("; ".join(check.violations))
    return s


# ----------------------------------------------------------------------------
# offline extractor


def fallback_extract(raw_text: str) -> EventSummary:
    """Rule-based event summary used when no MLLM is available.

    Participants are maximal runs of capitalised alphabetic tokens.  Attributes
    are numbers and the word right after one of a few prepositions.
    """
    summary = raw_text.strip()
    if not summary:
        raise EmptyInput("raw_text is empty")
    toks = [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(summary)]

    participants: list[str] = []
    in_run = [False] * len(toks)
    i = 0
    while i < len(toks):
        w, start, end = toks[i]
        if not (w.isalpha() and w[0].isupper()):
            i += 1
            continue
        j = i
        while (
            j + 1 < len(toks)
            and toks[j + 1][0].isalpha()
            and toks[j + 1][0][0].isupper()
            and summary[toks[j][2] : toks[j + 1][1]].isspace()
        ):
            j += 1
        for k in range(i, j + 1):
            in_run[k] = True
        span = summary[start : toks[j][2]]
        if span not in participants:
            participants.append(span)
        i = j + 1

    picked: set[int] = set()
    for k, (w, _, _) in enumerate(toks):
        if w.isdecimal():
            picked.add(k)
        if w.lower() in PREPOSITIONS and k + 1 < len(toks):
            picked.add(k + 1)
    attributes: list[str] = []
    for k in sorted(picked):
        w = toks[k][0]
        if in_run[k] or w in participants or w in attributes:
            continue
        attributes.append(w)

    return EventSummary(
        summary=summary,
        participants=tuple(participants),
        attributes=tuple(attributes),
        structure=mask_structure(summary, participants, attributes),
    )


# ----------------------------------------------------------------------------
# MLLM client


def _doc_payload(doc: Claim | EvidenceDoc) -> tuple[str, str, str | None]:
    """(input_text, modality, media_path) for a claim or evidence record."""
    if isinstance(doc, Claim):
        return doc.raw_text, Modality.TEXT.value, None
    return doc.raw_text, Modality(doc.modality).value, doc.media_path


def _image_part(path: str) -> dict[str, Any]:
    mime = mimetypes.guess_type(path)[0] or "image/png"
    data = base64.b64encode(Path(path).read_bytes()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}


class MllmClient:
    """Minimal OpenAI-compatible chat-completions client with retries."""

    RETRY_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})

    def __init__(
        self,
        cfg: MllmClientConfig,
        template: PromptTemplate | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ):
        self.cfg = cfg
        self.template = template or PromptTemplate.default()
        self._sleep = sleep
        self._http = httpx.Client(
            base_url=cfg.base_url.rstrip("/"), timeout=cfg.timeout, transport=transport
        )
        self._slots = threading.BoundedSemaphore(cfg.max_concurrency)

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "MllmClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _api_key(self) -> str:
        key = os.environ.get(self.cfg.api_key_source)
        if not key:
            raise TransportError(f"environment variable {self.cfg.api_key_source} is not set")
        return key

    def build_messages(self, doc: Claim | EvidenceDoc) -> list[dict[str, Any]]:
        text, modality, media = _doc_payload(doc)
        parts: list[dict[str, Any]] = [
            {"type": "text", "text": render_prompt(self.template, text, modality)}
        ]
        if modality == Modality.IMAGE.value and media:
            parts.append(_image_part(media))
        return [{"role": "user", "content": parts}]

    def _backoff(self, attempt: int, resp: httpx.Response | None) -> float:
        if resp is not None:
            hint = resp.headers.get("retry-after")
            if hint:
                try:
                    return max(0.0, float(hint))
                except ValueError:
                    pass
        return self.cfg.retry_backoff * (2**attempt)

    def chat(self, messages: list[dict[str, Any]]) -> str:
        body = {"model": self.cfg.model_name, "messages": messages, "temperature": 0}
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        last = "no attempt made"
        for attempt in range(self.cfg.max_retries + 1):
            resp = None
            with self._slots:
                try:
                    resp = self._http.post("/chat/completions", json=body, headers=headers)
                except httpx.HTTPError as e:
                    last = f"{type(e).__name__}: {e}"
                else:
                    if resp.status_code == 200:
                        try:
                            return resp.json()["choices"][0]["message"]["content"]
                        except (ValueError, KeyError, IndexError, TypeError) as e:
                            raise TransportError(f"malformed completion payload: {e}") from e
                    last = f"HTTP {resp.status_code}"
                    if resp.status_code not in self.RETRY_STATUS:
                        raise TransportError(last)
            if attempt < self.cfg.max_retries:
                delay = self._backoff(attempt, resp)
                log.warning("chat request failed (%s); retrying in %.2fs", last, delay)
                self._sleep(delay)
        raise TransportError(f"giving up after {self.cfg.max_retries + 1} attempts: {last}")

    def request_summary(self, doc: Claim | EvidenceDoc) -> EventSummary:
        messages = self.build_messages(doc)
        reply = self.chat(messages)
        try:
            return parse_response(reply, require_structure=True)
        except (ParseError, SummaryQualityError) as e:
            log.info("summary for %s rejected (%s); asking for a repair", doc.id, e)
            messages = messages + [
                {"role": "assistant", "content": reply},
                {
                    "role": "user",
                    "content": (
                        f"That answer was not usable: {e}. Reply with only the corrected JSON "
                        "object with keys summary, participants, attributes and structure."
                    ),
                },
            ]
            reply = self.chat(messages)
            try:
                return parse_response(reply, require_structure=True)
            except (ParseError, SummaryQualityError) as e2:
                raise SummaryQualityError(f"{doc.id}: {e2}") from e2


def request_summary(
    cfg: MllmClientConfig, template: PromptTemplate, doc: Claim | EvidenceDoc, **client_kw
) -> EventSummary:
    with MllmClient(cfg, template, **client_kw) as client:
        return client.request_summary(doc)


def summarize(doc: Claim | EvidenceDoc, client: MllmClient | None = None) -> EventSummary:
    """Summarise one record, falling back to the offline extractor if needed."""
    if client is not None:
        try:
            return client.request_summary(doc)
        except SummaryQualityError as e:
            log.warning("falling back to rule-based summary for %s: %s", doc.id, e)
    return fallback_extract(doc.raw_text)


# ----------------------------------------------------------------------------
# batch mode


def read_summaries(path: str | Path) -> dict[str, EventSummary]:
    out: dict[str, EventSummary] = {}
    p = Path(path)
    if not p.exists():
        return out
    with p.open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = EventSummary.from_dict(rec)
    return out


def summarize_batch(
    docs: Iterable[Claim | EvidenceDoc],
    out_path: str | Path,
    client: MllmClient | None = None,
    max_workers: int = 1,
) -> int:
    """Append summaries for records not yet in ``out_path``; returns how many were written."""
    done = set(read_summaries(out_path))
    todo = [d for d in docs if d.id not in done]
    if not todo:
        return 0

    def work(d):
        try:
            return d.id, summarize(d, client)
        except EmptyInput:
            # a caption-less image with no client: leave it for an online pass
            log.warning("skipping %s: no text to summarise offline", d.id)
            return d.id, None

    def results() -> Iterator[tuple[str, EventSummary]]:
        if max_workers <= 1:
            yield from map(work, todo)
        else:
            with ThreadPoolExecutor(max_workers=max_workers) as ex:
                yield from ex.map(work, todo)

    n = 0
    with Path(out_path).open("a", encoding="utf-8") as f:
        for doc_id, s in results():
            if s is None:
                continue
            f.write(json.dumps({"id": doc_id, **s.to_dict()}, ensure_ascii=False) + "\n")
            f.flush()
            n += 1
    return n

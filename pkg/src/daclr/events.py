"""Event-summary records and the deterministic text views built from them.

An event summary decomposes a claim or evidence item into a free-text
summary, the participant and attribute spans it mentions, and a masked
"structure" in which every such span is replaced by ``[Mask]``.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

MASK = "[Mask]"

_MASK_RE = re.compile(re.escape(MASK))
_MASK_LIKE_RE = re.compile(r"\[\s*mask\s*\]", re.IGNORECASE)


class EmptyView(ValueError):
    """Raised when the Sent view of a summary has nothing to show."""


class ViewKind(str, enum.Enum):
    FULL = "full"
    SENT = "sent"
    STRUCT = "struct"


class Modality(str, enum.Enum):
    TEXT = "text"
    IMAGE = "image"
    TABLE = "table"


@dataclass(frozen=True)
class EventSummary:
    summary: str
    participants: tuple[str, ...] = ()
    attributes: tuple[str, ...] = ()
    structure: str = ""

    def __post_init__(self) -> None:
        # accept lists from callers, store tuples so the record stays hashable
        object.__setattr__(self, "participants", tuple(self.participants))
        object.__setattr__(self, "attributes", tuple(self.attributes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "summary": self.summary,
            "participants": list(self.participants),
            "attributes": list(self.attributes),
            "structure": self.structure,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EventSummary":
        return cls(
            summary=d["summary"],
            participants=tuple(d.get("participants", ())),
            attributes=tuple(d.get("attributes", ())),
            structure=d["structure"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


@dataclass(frozen=True)
class Claim:
    id: str
    raw_text: str
    summary: EventSummary | None = None


@dataclass(frozen=True)
class EvidenceDoc:
    id: str
    modality: Modality
    raw_text: str
    media_path: str | None = None
    summary: EventSummary | None = None
    page: str | None = None

    @property
    def page_id(self) -> str:
        return self.page if self.page is not None else self.id


def _protected_regions(text: str) -> list[tuple[int, int]]:
    return [(m.start(), m.end()) for m in _MASK_RE.finditer(text)]


def _is_word_char(ch: str) -> bool:
    return ch.isalnum()


def find_span(text: str, span: str, start: int = 0) -> int:
    """Index of the next whole-span occurrence of ``span`` at or after ``start``.

    A whole-span occurrence is not glued to a letter or digit on either side
    and does not overlap an existing ``[Mask]`` token.  Returns -1 if none.
    """
    if not span:
        return -1
    regions = _protected_regions(text)
    i = text.find(span, start)
    while i != -1:
        j = i + len(span)
        left_ok = i == 0 or not (_is_word_char(text[i - 1]) and _is_word_char(span[0]))
        right_ok = j == len(text) or not (_is_word_char(text[j]) and _is_word_char(span[-1]))
        if left_ok and right_ok and not any(a < j and i < b for a, b in regions):
            return i
        i = text.find(span, i + 1)
    return -1


def _mask_one(text: str, span: str) -> str:
    out = []
    pos = 0
    while True:
        i = find_span(text, span, pos)
        if i == -1:
            break
        out.append(text[pos:i])
        out.append(MASK)
        pos = i + len(span)
    out.append(text[pos:])
    return "".join(out)


def _masking_order(spans: Iterable[str]) -> list[str]:
    seen: dict[str, int] = {}
    for s in spans:
        if s and s not in seen:
            seen[s] = len(seen)
    return sorted(seen, key=lambda s: (-len(s), seen[s]))


def mask_structure(
    summary_text: str, participants: Sequence[str], attributes: Sequence[str]
) -> str:
    """Replace every whole-span entity mention in ``summary_text`` with ``[Mask]``.

    Longer spans go first so that "New York mayor" wins over "New York";
    within one span, occurrences are replaced left to right.
    """
    text = summary_text
    for span in _masking_order([*participants, *attributes]):
        text = _mask_one(text, span)
    return text


def view(summary: EventSummary, kind: ViewKind) -> str:
    kind = ViewKind(kind)
    if kind is ViewKind.FULL:
        return summary.summary
    if kind is ViewKind.STRUCT:
        return summary.structure
    parts = [*summary.participants, *summary.attributes]
    if not parts:
        raise EmptyView("summary has no participants or attributes")
    return " ".join(parts)


@dataclass
class Validation:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_summary(s: EventSummary) -> Validation:
    """Check the EventSummary invariants; violations are returned, not raised."""
    v: list[str] = []
    for name, spans in (("participant", s.participants), ("attribute", s.attributes)):
        seen: set[str] = set()
        for span in spans:
            if not isinstance(span, str) or not span.strip():
                v.append(f"empty {name} span")
                continue
            if span in seen:
                v.append(f"duplicate {name} span: {span!r}")
            seen.add(span)
            if find_span(s.structure, span) != -1:
                v.append(f"unmasked {name}: {span!r}")
    for m in _MASK_LIKE_RE.finditer(s.structure):
        if m.group(0) != MASK:
            v.append(f"malformed mask token: {m.group(0)!r}")
    return Validation(v)

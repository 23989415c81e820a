"""Prompt rendering for compensatory-query synthesis and verification, and output parsing.

Every rendered prompt starts with a sentinel line such as::

    [[hive:verify v=verify-v1@3f2a9c01d4 q=5e0c...  k=10]]

which records the request kind, template version, a fingerprint of the
(query text, image caption) pair and, for verification, the number of ids
requested. The mock oracle keys on it; real models can ignore it.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

HYPOTHESIS = "hypothesis"
VERIFY = "verify"

DOC_CHAR_CAP = 2000
PROMPT_CHAR_BUDGET = 60000
ELLIPSIS = " ...[truncated]"
NO_IMAGE = "(no image provided)"

REASK_NOTE = (
    "\n\nNOTE: a previous reply did not contain a JSON array of document IDs. "
    "Reply with the JSON array only."
)

_SYSTEM = {
    HYPOTHESIS: "You analyse search results and write targeted search queries.",
    VERIFY: "You verify and rank search results. You always finish with a JSON array of document IDs.",
}
_SLOTS = {
    HYPOTHESIS: ("query_text", "image_caption", "documents"),
    VERIFY: ("query_text", "image_caption", "documents", "k_f"),
}

_SENTINEL_RE = re.compile(r"\[\[hive:(?P<kind>[a-z]+)(?P<attrs>[^\]\n]*)\]\]")
_DOC_HEADER_RE = re.compile(r"^\[(\d+)\] id: (.+)$", re.MULTILINE)
_TAGGED_RE = re.compile(
    r"^[\s>*_#`-]*compensatory[ _-]query[\s*_`]*[:：]\s*(?P<q>.*)$",
    re.IGNORECASE | re.MULTILINE,
)
_QUOTES = " \t\r\n\"'`“”‘’*"


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    name: str
    body: str
    system_text: str

    def __post_init__(self):
        if self.kind not in _SLOTS:
            raise ValueError(f"unknown template kind {self.kind!r}")
        missing = [s for s in _SLOTS[self.kind] if "{" + s + "}" not in self.body]
        if missing:
            raise ValueError(f"{self.kind} template {self.name!r} lacks slots {missing}")

    @property
    def version(self) -> str:
        digest = hashlib.sha256((self.system_text + "\x00" + self.body).encode("utf-8")).hexdigest()
        return f"{self.name}@{digest[:10]}"


@dataclass(frozen=True)
class Sentinel:
    kind: str
    version: str
    fingerprint: str
    k: int | None = None


@dataclass(frozen=True)
class Document:
    """What a prompt needs to know about a candidate document."""

    doc_id: str
    text: str


@lru_cache(maxsize=None)
def default_template(kind: str) -> PromptTemplate:
    body = resources.files("hive_retrieval").joinpath(f"templates/{kind}_v1.txt").read_text("utf-8")
    return PromptTemplate(kind, f"{kind}-v1", body, _SYSTEM[kind])


def load_template(kind: str, path) -> PromptTemplate:
    """Load an override template from a plain-text file with the same named slots."""
    path = Path(path)
    return PromptTemplate(kind, path.stem, path.read_text(encoding="utf-8"), _SYSTEM[kind])


def query_fingerprint(query_text: str, caption: str) -> str:
    return hashlib.sha256(f"{query_text}\x1f{caption}".encode("utf-8")).hexdigest()[:16]


def truncate(text: str, cap: int) -> str:
    if len(text) <= cap:
        return text
    if cap <= len(ELLIPSIS):
        return ELLIPSIS[:cap]
    return text[: cap - len(ELLIPSIS)] + ELLIPSIS


def _render_documents(docs: Sequence[Document], cap: int) -> str:
    return "\n".join(
        f"[{rank}] id: {doc.doc_id}\n{truncate(doc.text, cap)}\n" for rank, doc in enumerate(docs, start=1)
    )


def _sentinel_line(template: PromptTemplate, fingerprint: str, k: int | None) -> str:
    line = f"[[hive:{template.kind} v={template.version} q={fingerprint}"
    if k is not None:
        line += f" k={k}"
    return line + "]]\n"


def _render(
    template: PromptTemplate,
    query_text: str,
    caption: str,
    docs: Sequence[Document],
    k: int | None,
    doc_cap: int,
    budget: int,
    suffix: str = "",
) -> str:
    head = _sentinel_line(template, query_fingerprint(query_text, caption), k)
    slots = {
        "query_text": query_text,
        "image_caption": caption or NO_IMAGE,
        "k_f": "" if k is None else str(k),
    }

    def fill(cap: int) -> str:
        return head + template.body.format_map({**slots, "documents": _render_documents(docs, cap)}) + suffix

    text = fill(doc_cap)
    if len(text) > budget and docs:
        # Shrink every document by the same amount before touching anything else.
        overhead = len(fill(0))
        shared = (budget - overhead) // len(docs)
        text = fill(max(0, min(doc_cap, shared)))
    if len(text) > budget:
        text = truncate(text, budget)
    return text


def build_hypothesis_prompt(
    query_text: str,
    caption: str,
    probe_docs: Sequence[Document],
    template: PromptTemplate | None = None,
    doc_cap: int = DOC_CHAR_CAP,
    budget: int = PROMPT_CHAR_BUDGET,
) -> str:
    template = template or default_template(HYPOTHESIS)
    return _render(template, query_text, caption, probe_docs, None, doc_cap, budget)


def build_verify_prompt(
    query_text: str,
    caption: str,
    candidates: Sequence[Document],
    k_f: int,
    template: PromptTemplate | None = None,
    doc_cap: int = DOC_CHAR_CAP,
    budget: int = PROMPT_CHAR_BUDGET,
    reask: bool = False,
) -> str:
    """Render the verification prompt.

    When ``k_f`` exceeds the number of candidates the prompt asks for all
    of them, ranked.
    """
    template = template or default_template(VERIFY)
    k = min(k_f, len(candidates))
    return _render(
        template, query_text, caption, candidates, k, doc_cap, budget, REASK_NOTE if reask else ""
    )


def system_text(kind: str, template: PromptTemplate | None = None) -> str:
    return (template or default_template(kind)).system_text


def parse_sentinel(text: str) -> Sentinel | None:
    m = _SENTINEL_RE.search(text)
    if m is None:
        return None
    attrs = dict(part.split("=", 1) for part in m.group("attrs").split() if "=" in part)
    k = attrs.get("k")
    return Sentinel(
        kind=m.group("kind"),
        version=attrs.get("v", ""),
        fingerprint=attrs.get("q", ""),
        k=int(k) if k is not None and k.isdigit() else None,
    )


def parse_document_ids(prompt_text: str) -> list[str]:
    return [m.group(2).strip() for m in _DOC_HEADER_RE.finditer(prompt_text)]


def parse_compensatory_query(llm_text: str | None) -> str | None:
    """Pull the compensatory query out of a model reply; ``None`` means synthesis failed."""
    if not llm_text or not llm_text.strip():
        return None
    tagged = [m.group("q").strip(_QUOTES) for m in _TAGGED_RE.finditer(llm_text)]
    tagged = [t for t in tagged if t]
    if tagged:
        return tagged[-1]
    paragraphs = [p.strip(_QUOTES) for p in re.split(r"\n\s*\n", llm_text.strip())]
    paragraphs = [p for p in paragraphs if p]
    return paragraphs[-1] if paragraphs else None


def _first_string_array(text: str) -> list[str] | None:
    decoder = json.JSONDecoder()
    pos = text.find("[")
    while pos != -1:
        try:
            value, _ = decoder.raw_decode(text, pos)
        except (ValueError, RecursionError):
            value = None
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return value
        pos = text.find("[", pos + 1)
    return None


def parse_ranked_list(llm_text: str | None, valid_ids, k_f: int) -> list[str] | None:
    """First JSON array of strings in the reply, validated against ``valid_ids``.

    Unknown ids are dropped, repeats keep their first position, and the
    result is cut to ``k_f``. Returns ``None`` when no array is present.
    """
    if not llm_text:
        return None
    found = _first_string_array(llm_text)
    if found is None:
        return None
    valid = set(valid_ids)
    out: list[str] = []
    seen: set[str] = set()
    for doc_id in found:
        doc_id = doc_id.strip()
        if doc_id in valid and doc_id not in seen:
            seen.add(doc_id)
            out.append(doc_id)
    return out[: max(k_f, 0)]

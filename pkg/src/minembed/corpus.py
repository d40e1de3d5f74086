"""Corpus preparation: cleaning, segmentation, filtering, dedup, splitting.

Turns raw extracted text into a deterministic manifest of sentence records
with train/val/test labels, plus summary statistics.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test"
SPLIT_UNASSIGNED = "unassigned"
SPLITS = (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)

MIN_SENTENCE_CHARS = 20

# Sentence-boundary exceptions: a period ending one of these does not split,
# nor does a period after a single-letter initial.
ABBREVIATIONS = ("fig.", "e.g.", "i.e.", "dr.", "et al.", "vs.", "no.")

_HTML_TAG_RE = re.compile(r"<[^<>]*>")
_MD_HEADING_RE = re.compile(r"(?m)^[^\S\n]*#{1,6}(?=\s|$)[^\S\n]*")
_MD_IMAGE_RE = re.compile(r"!\[([^\]]*)\]\([^)]*\)")
_MD_LINK_RE = re.compile(r"\[([^\]]+)\]\([^)]*\)")
_MD_EMPHASIS_RE = re.compile(r"\*\*|__|[*`]|(?<!\w)_|_(?!\w)")
_CITATION_RE = re.compile(r"\[\d+(?:\s*[,–-]\s*\d+)*\]")
_PARAGRAPH_RE = re.compile(r"\n\s*\n")
_BOUNDARY_RE = re.compile(r"[.!?](?=\s+[A-Z0-9])")
_INITIAL_RE = re.compile(r"(?:^|[\s(\"'])[A-Za-z]\.$")


@dataclass
class RawDocument:
    """One input document: identifier, originating source, full text."""

    doc_id: str
    source_name: str
    text: str


@dataclass
class SentenceRecord:
    """One cleaned sentence with its source and split assignment."""

    sent_id: str
    source_name: str
    text: str
    char_len: int
    split: str = SPLIT_UNASSIGNED

    def to_row(self) -> dict:
        return {
            "sent_id": self.sent_id,
            "source_name": self.source_name,
            "text": self.text,
            "char_len": self.char_len,
            "split": self.split,
        }

    @classmethod
    def from_row(cls, row: dict) -> "SentenceRecord":
        return cls(
            sent_id=str(row["sent_id"]),
            source_name=str(row["source_name"]),
            text=str(row["text"]),
            char_len=int(row["char_len"]),
            split=str(row.get("split", SPLIT_UNASSIGNED)),
        )


@dataclass
class CorpusManifest:
    """Ordered sentence records plus per-source tallies and the split seed."""

    records: list[SentenceRecord]
    per_source_counts: dict[str, int] = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.per_source_counts:
            self.per_source_counts = dict(Counter(r.source_name for r in self.records))

    def subset(self, split: str) -> list[SentenceRecord]:
        return [r for r in self.records if r.split == split]


@dataclass
class CorpusStats:
    """Corpus-level counts and token-length moments."""

    sentence_count: int
    word_count: int
    unique_term_count: int
    token_count: int
    mean_len_tokens: float
    sd_len_tokens: float

    def to_dict(self) -> dict:
        return {
            "sentence_count": self.sentence_count,
            "word_count": self.word_count,
            "unique_term_count": self.unique_term_count,
            "token_count": self.token_count,
            "mean_len_tokens": self.mean_len_tokens,
            "sd_len_tokens": self.sd_len_tokens,
        }


def _strip_markup(text: str) -> str:
    # Nested constructs ("<<a>>", "[[x](u)](v)", "[*a]*(b)") require repeated
    # passes; every substitution strictly shortens the text, so this
    # terminates.
    while True:
        updated = _HTML_TAG_RE.sub(" ", text)
        updated = _MD_HEADING_RE.sub("", updated)
        updated = _MD_EMPHASIS_RE.sub("", updated)
        updated = _CITATION_RE.sub(" ", updated)
        updated = _MD_IMAGE_RE.sub(r"\1", updated)
        updated = _MD_LINK_RE.sub(r"\1", updated)
        if updated == text:
            return text
        text = updated


def clean_text(raw: str) -> str:
    """Strip markup and layout noise from extracted text.

    Rule order is fixed (tags, markdown, citations, page-number lines,
    whitespace) so that cleaning is idempotent. Paragraph breaks survive as
    a single blank line; all other whitespace runs collapse to one space.
    """
    text = _strip_markup(raw)
    text = "\n".join(ln for ln in text.split("\n") if not ln.strip().isdigit())
    paragraphs = [" ".join(p.split()) for p in _PARAGRAPH_RE.split(text)]
    return "\n\n".join(p for p in paragraphs if p)


def _is_abbreviation_boundary(prefix: str) -> bool:
    lowered = prefix.lower()
    if any(lowered.endswith(abbr) for abbr in ABBREVIATIONS):
        return True
    return bool(_INITIAL_RE.search(prefix))


def segment_sentences(text: str) -> list[str]:
    """Split cleaned text into sentences.

    Paragraph breaks always split. Within a paragraph, a terminator in
    ``.!?`` followed by whitespace and an uppercase letter or digit splits,
    except after a known abbreviation or single-letter initial.
    """
    sentences: list[str] = []
    for paragraph in re.split(r"\n+", text):
        if not paragraph.strip():
            continue
        start = 0
        for match in _BOUNDARY_RE.finditer(paragraph):
            end = match.end()
            if paragraph[end - 1] == "." and _is_abbreviation_boundary(paragraph[start:end]):
                continue
            piece = paragraph[start:end].strip()
            if piece:
                sentences.append(piece)
            start = end
        tail = paragraph[start:].strip()
        if tail:
            sentences.append(tail)
    return sentences


def filter_short(sentences: Sequence[str], min_chars: int = MIN_SENTENCE_CHARS) -> list[str]:
    """Keep sentences with at least ``min_chars`` characters, preserving order."""
    return [s for s in sentences if len(s) >= min_chars]


def normalized_form(text: str) -> str:
    """Duplicate-detection key: lowercased, whitespace-collapsed, no terminal punctuation."""
    return " ".join(text.lower().split()).rstrip(".!?")


def deduplicate(records: Sequence[SentenceRecord]) -> list[SentenceRecord]:
    """Drop records whose normalized form matched an earlier record."""
    seen: set[str] = set()
    kept: list[SentenceRecord] = []
    for record in records:
        key = normalized_form(record.text)
        if key in seen:
            continue
        seen.add(key)
        kept.append(record)
    return kept


def _document_records(doc: RawDocument, min_chars: int) -> list[SentenceRecord]:
    sentences = filter_short(segment_sentences(clean_text(doc.text)), min_chars)
    return [
        SentenceRecord(
            sent_id=f"{doc.doc_id}:{i:05d}",
            source_name=doc.source_name,
            text=s,
            char_len=len(s),
        )
        for i, s in enumerate(sentences)
    ]


def build_manifest(
    docs: Sequence[RawDocument],
    min_chars: int = MIN_SENTENCE_CHARS,
    threads: int = 1,
) -> CorpusManifest:
    """Clean, segment, and filter documents into a deduplicated manifest.

    Documents may be processed in parallel; the merge order is always
    (source_name, original document position), so output is deterministic.
    """
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        raise DataError("E_IO", "duplicate doc_id in input documents")
    ordered = sorted(range(len(docs)), key=lambda i: (docs[i].source_name, i))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_doc = list(pool.map(lambda i: _document_records(docs[i], min_chars), ordered))
    else:
        per_doc = [_document_records(docs[i], min_chars) for i in ordered]
    records = [rec for doc_records in per_doc for rec in doc_records]
    return CorpusManifest(records=deduplicate(records))


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def stratified_split(
    manifest: CorpusManifest,
    train_frac: float = 0.9,
    seed: int = 0,
    test_frac: float = 0.0,
) -> CorpusManifest:
    """Assign train/val (and optionally test) splits per source.

    Within each source the records are permuted by a seeded generator; the
    first round(train_frac * n) become train, then round(test_frac * n)
    become test, and the remainder val. Record order is unchanged.
    """
    if not 0.0 < train_frac < 1.0:
        raise DataError("E_BAD_FRACTION", f"train_frac must be in (0, 1), got {train_frac}")
    if test_frac < 0.0 or train_frac + test_frac > 1.0:
        raise DataError("E_BAD_FRACTION", f"train_frac + test_frac must be <= 1, got {train_frac + test_frac}")
    for record in manifest.records:
        if record.split != SPLIT_UNASSIGNED:
            raise DataError("E_ALREADY_SPLIT", f"record {record.sent_id} already assigned to {record.split!r}")

    by_source: dict[str, list[int]] = {}
    for idx, record in enumerate(manifest.records):
        by_source.setdefault(record.source_name, []).append(idx)

    assignment = [SPLIT_VAL] * len(manifest.records)
    rng = np.random.default_rng(seed)
    for source in sorted(by_source):
        indices = by_source[source]
        perm = rng.permutation(len(indices))
        n_train = _round_half_up(train_frac * len(indices))
        n_test = min(_round_half_up(test_frac * len(indices)), len(indices) - n_train)
        for pos, j in enumerate(perm):
            if pos < n_train:
                assignment[indices[j]] = SPLIT_TRAIN
            elif pos < n_train + n_test:
                assignment[indices[j]] = SPLIT_TEST

    records = [replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)]
    return CorpusManifest(records=records, seed=seed)


def corpus_stats(manifest: CorpusManifest, tokenizer: Callable[[str], list[int]]) -> CorpusStats:
    """Word, term, and token counts plus token-length mean and population SD."""
    if not manifest.records:
        raise DataError("E_EMPTY_CORPUS", "corpus statistics need at least one sentence")
    word_count = 0
    terms: set[str] = set()
    token_lens = np.empty(len(manifest.records), dtype=np.int64)
    for i, record in enumerate(manifest.records):
        words = record.text.split()
        word_count += len(words)
        terms.update(w.lower() for w in words)
        token_lens[i] = len(tokenizer(record.text))
    mean = float(np.mean(token_lens))
    sd = float(np.sqrt(np.mean((token_lens - mean) ** 2)))
    return CorpusStats(
        sentence_count=len(manifest.records),
        word_count=word_count,
        unique_term_count=len(terms),
        token_count=int(token_lens.sum()),
        mean_len_tokens=mean,
        sd_len_tokens=sd,
    )


def manifest_to_rows(manifest: CorpusManifest) -> list[dict]:
    return [r.to_row() for r in manifest.records]


def manifest_from_rows(rows: Iterable[dict], seed: int | None = None) -> CorpusManifest:
    return CorpusManifest(records=[SentenceRecord.from_row(r) for r in rows], seed=seed)

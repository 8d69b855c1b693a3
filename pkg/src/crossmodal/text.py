"""Caption normalization, n-gram extraction, vocabularies, and featurization."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import Caption
from .errors import EmptySequenceError, VocabularyError

MODES = ("unigram", "bigram", "trigram", "trigram_skip")
ARTICLES = frozenset({"a", "an", "the"})

# alphanumeric runs; underscore is a separator so it can join n-gram parts
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

SKIP_TAG = "*"


@dataclass
class Vocabulary:
    mode: str
    term_to_index: dict[str, int]
    doc_freq: dict[str, int]
    n_docs: int
    max_size: int

    @property
    def size(self) -> int:
        return len(self.term_to_index)


@dataclass
class SparseVector:
    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray  # float64, same length

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class TokenSequence:
    indices: np.ndarray  # int64, order-preserving

    def __len__(self) -> int:
        return len(self.indices)


def normalize_tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric characters, drop the articles."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if t not in ARTICLES]


def extract_terms(tokens: list[str], mode: str) -> list[str]:
    """Expand a token list into the terms of the given mode.

    unigram keeps tokens as-is; bigram/trigram join adjacent tuples with
    ``_``. trigram_skip adds, for every 4-token window, the two triples that
    omit exactly one interior token, marked with a trailing ``*`` so they
    never collide with contiguous trigrams. Token lists shorter than the
    n-gram order collapse to one term joining all tokens (empty list -> no
    terms).
    """
    if mode not in MODES:
        raise ValueError(f"unknown term mode {mode!r}")
    if mode == "unigram":
        return list(tokens)
    n = 2 if mode == "bigram" else 3
    if not tokens:
        return []
    if len(tokens) < n:
        return ["_".join(tokens)]
    terms = ["_".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    if mode == "trigram_skip":
        for i in range(len(tokens) - 3):
            a, b, c, d = tokens[i : i + 4]
            terms.append(f"{a}_{c}_{d}{SKIP_TAG}")
            terms.append(f"{a}_{b}_{d}{SKIP_TAG}")
    return terms


def _caption_tokens(cap: Caption) -> list[str]:
    return cap.tokens if cap.tokens is not None else normalize_tokenize(cap.text)


def build_vocabulary(captions: list[Caption], mode: str, max_size: int) -> Vocabulary:
    """Keep the ``max_size`` most frequent terms over the training captions.

    Ties at the cut are broken lexicographically (smaller term wins), and
    the retained terms are indexed by descending total count with the same
    tie-break, so construction is fully deterministic.
    """
    if not captions:
        raise ValueError("cannot build a vocabulary from zero captions")
    if max_size < 1:
        raise ValueError("max_size must be positive")
    totals: Counter[str] = Counter()
    doc_freq: Counter[str] = Counter()
    for cap in captions:
        terms = extract_terms(_caption_tokens(cap), mode)
        totals.update(terms)
        doc_freq.update(set(terms))
    if not totals:
        raise VocabularyError("no terms found in the training captions")
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    term_to_index = {term: i for i, (term, _) in enumerate(ranked)}
    return Vocabulary(
        mode=mode,
        term_to_index=term_to_index,
        doc_freq={term: doc_freq[term] for term, _ in ranked},
        n_docs=len(captions),
        max_size=max_size,
    )


def featurize(tokens: list[str], vocab: Vocabulary, weighting: str) -> SparseVector:
    """Turn a token list into a sparse feature vector over the vocabulary.

    binary: value 1.0 for every distinct in-vocabulary term. tfidf: value
    (count(w, d) / len_d) * ln(n_docs / doc_freq[w]) where len_d counts the
    caption's in-vocabulary term occurrences. Out-of-vocabulary terms are
    dropped; a caption with no in-vocabulary terms yields an empty vector.
    """
    if weighting not in ("binary", "tfidf"):
        raise ValueError(f"unknown weighting {weighting!r}")
    present = [t for t in extract_terms(tokens, vocab.mode) if t in vocab.term_to_index]
    if not present:
        return SparseVector(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    counts = Counter(present)
    indexed = sorted((vocab.term_to_index[t], t) for t in counts)
    indices = np.array([i for i, _ in indexed], dtype=np.int64)
    if weighting == "binary":
        values = np.ones(len(indexed), dtype=np.float64)
    else:
        len_d = len(present)
        values = np.array(
            [
                (counts[t] / len_d) * math.log(vocab.n_docs / vocab.doc_freq[t])
                for _, t in indexed
            ],
            dtype=np.float64,
        )
    return SparseVector(indices, values)


def encode_sequence(tokens: list[str], vocab: Vocabulary) -> TokenSequence:
    """Map tokens to vocabulary indices in order, dropping OOV tokens."""
    if vocab.mode != "unigram":
        raise ValueError("sequence encoding requires a unigram vocabulary")
    indices = [vocab.term_to_index[t] for t in tokens if t in vocab.term_to_index]
    if not indices:
        raise EmptySequenceError("no in-vocabulary tokens in caption")
    return TokenSequence(np.array(indices, dtype=np.int64))


def vocabulary_text(vocab: Vocabulary) -> str:
    """Canonical serialized form, also used for integrity digests."""
    lines = [f"{vocab.mode} {vocab.size} {vocab.n_docs}\n"]
    for term, index in sorted(vocab.term_to_index.items(), key=lambda kv: kv[1]):
        lines.append(f"{term}\t{index}\t{vocab.doc_freq[term]}\n")
    return "".join(lines)


def save_vocabulary(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(vocabulary_text(vocab))


def load_vocabulary(path: str) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] not in MODES:
            raise VocabularyError(f"{path}:1: expected header 'mode size n_docs'")
        mode, size, n_docs = header[0], int(header[1]), int(header[2])
        term_to_index: dict[str, int] = {}
        doc_freq: dict[str, int] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise VocabularyError(f"{path}:{lineno}: expected 'term<TAB>index<TAB>doc_freq'")
            term_to_index[parts[0]] = int(parts[1])
            doc_freq[parts[0]] = int(parts[2])
    if len(term_to_index) != size:
        raise VocabularyError(f"{path}: header declares {size} terms, found {len(term_to_index)}")
    return Vocabulary(mode=mode, term_to_index=term_to_index, doc_freq=doc_freq, n_docs=n_docs, max_size=size)

"""Rule-based labeling of free-text radiology reports.

Deterministic NegEx-style pipeline: lowercase tokenization, longest-match
trigger-phrase scan per sentence, then cue classification against a fixed
pre-trigger window.  Negation outranks uncertainty; per-pathology mentions
aggregate with priority Present > Uncertain > Absent, and no mention at all
means NotMentioned.

Sentences end at '.', ';', or a newline.  The scope window counts tokens
backwards from the trigger within the same sentence only, so a negation in
one sentence never reaches a finding in the next.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import ConfigError
from .labels import N_PATHOLOGIES, PATHOLOGIES, PATHOLOGY_INDEX, LabelState

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\w\s]")

#: tokens that close a sentence
SENTENCE_TERMINATORS = frozenset({".", ";", "\n"})


class Polarity(Enum):
    PRESENT = "present"
    UNCERTAIN = "uncertain"
    ABSENT = "absent"


@dataclass(frozen=True)
class Mention:
    """One matched trigger phrase with its classified polarity."""

    pathology: str
    start: int  # global token index, inclusive
    end: int    # exclusive
    polarity: Polarity


@dataclass
class MentionLexicon:
    """Trigger phrases per pathology plus global cue lists.

    ``window`` is the number of tokens scanned backwards from a trigger for
    negation/uncertainty cues (same sentence only).
    """

    pathologies: Dict[str, List[str]]
    negation: List[str]
    uncertainty: List[str]
    window: int = 6

    # derived lookup tables, built in __post_init__
    _phrase_map: Dict[str, List[Tuple[Tuple[str, ...], str]]] = field(
        init=False, repr=False, default_factory=dict)
    _neg_cues: frozenset = field(init=False, repr=False, default=frozenset())
    _unc_cues: frozenset = field(init=False, repr=False, default=frozenset())
    _max_cue_len: int = field(init=False, repr=False, default=1)

    def __post_init__(self):
        seen: Dict[Tuple[str, ...], str] = {}
        for name, phrases in self.pathologies.items():
            if name not in PATHOLOGY_INDEX:
                raise ConfigError(f"unknown pathology {name!r} in lexicon")
            if not phrases:
                raise ConfigError(f"pathology {name!r} has an empty phrase list")
            for phrase in phrases:
                toks = tuple(normalize(phrase))
                if not toks:
                    raise ConfigError(f"empty phrase for {name!r}")
                if toks in seen and seen[toks] != name:
                    raise ConfigError(
                        f"phrase {phrase!r} maps to both {seen[toks]!r} and {name!r}")
                seen[toks] = name
                self._phrase_map.setdefault(toks[0], []).append((toks, name))
        for bucket in self._phrase_map.values():
            bucket.sort(key=lambda item: len(item[0]), reverse=True)
        self._neg_cues = frozenset(tuple(normalize(c)) for c in self.negation)
        self._unc_cues = frozenset(tuple(normalize(c)) for c in self.uncertainty)
        cue_lens = [len(c) for c in self._neg_cues | self._unc_cues] or [1]
        self._max_cue_len = max(cue_lens)
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")

    @classmethod
    def from_dict(cls, d: dict) -> "MentionLexicon":
        return cls(
            pathologies={k: list(v) for k, v in d["pathologies"].items()},
            negation=list(d.get("negation", [])),
            uncertainty=list(d.get("uncertainty", [])),
            window=int(d.get("window", 6)),
        )

    @classmethod
    def from_file(cls, path) -> "MentionLexicon":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "MentionLexicon":
        text = resources.files("cxrfusion").joinpath("default_lexicon.json").read_text()
        return cls.from_dict(json.loads(text))


def normalize(text: str) -> List[str]:
    """Lowercase, punctuation-separated tokens; newlines become boundary tokens."""
    tokens: List[str] = []
    lines = text.lower().split("\n")
    for i, line in enumerate(lines):
        if i > 0 and tokens and tokens[-1] not in SENTENCE_TERMINATORS:
            tokens.append("\n")
        tokens.extend(_TOKEN_RE.findall(line))
    return tokens


def _sentences(tokens: Sequence[str]) -> List[Tuple[int, int]]:
    """(start, end) global spans of sentences, terminators excluded."""
    spans = []
    start = 0
    for i, tok in enumerate(tokens):
        if tok in SENTENCE_TERMINATORS:
            if i > start:
                spans.append((start, i))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def _cue_in_window(tokens: Sequence[str], sent_start: int, trigger_start: int,
                   cues: frozenset, window: int, max_cue_len: int) -> bool:
    lo = max(sent_start, trigger_start - window)
    for pos in range(lo, trigger_start):
        for length in range(1, min(max_cue_len, trigger_start - pos) + 1):
            if tuple(tokens[pos:pos + length]) in cues:
                return True
    return False


def find_mentions(tokens: Sequence[str], lex: MentionLexicon) -> List[Mention]:
    """Longest-match trigger scan with NegEx-style cue classification.

    Matches do not overlap: after a phrase match the scan resumes past it.
    A negation cue in the window wins over an uncertainty cue.
    """
    mentions: List[Mention] = []
    for sent_start, sent_end in _sentences(tokens):
        i = sent_start
        while i < sent_end:
            matched = None
            for phrase, pathology in lex._phrase_map.get(tokens[i], ()):
                j = i + len(phrase)
                if j <= sent_end and tuple(tokens[i:j]) == phrase:
                    matched = (pathology, j)
                    break  # buckets are longest-first
            if matched is None:
                i += 1
                continue
            pathology, j = matched
            if _cue_in_window(tokens, sent_start, i, lex._neg_cues,
                              lex.window, lex._max_cue_len):
                polarity = Polarity.ABSENT
            elif _cue_in_window(tokens, sent_start, i, lex._unc_cues,
                                lex.window, lex._max_cue_len):
                polarity = Polarity.UNCERTAIN
            else:
                polarity = Polarity.PRESENT
            mentions.append(Mention(pathology, i, j, polarity))
            i = j
    return mentions


_POLARITY_RANK = {Polarity.PRESENT: 2, Polarity.UNCERTAIN: 1, Polarity.ABSENT: 0}

_POLARITY_TO_STATE = {
    Polarity.PRESENT: LabelState.POSITIVE,
    Polarity.UNCERTAIN: LabelState.UNCERTAIN,
    Polarity.ABSENT: LabelState.NEGATIVE,
}


def aggregate_mentions(mentions: Sequence[Mention]) -> Dict[str, LabelState]:
    """Fold mentions per pathology with priority Present > Uncertain > Absent."""
    best: Dict[str, Polarity] = {}
    for m in mentions:
        cur = best.get(m.pathology)
        if cur is None or _POLARITY_RANK[m.polarity] > _POLARITY_RANK[cur]:
            best[m.pathology] = m.polarity
    return {p: _POLARITY_TO_STATE[pol] for p, pol in best.items()}


def label_report(text: str, lex: Optional[MentionLexicon] = None) -> List[LabelState]:
    """Label one report into the 14-state canonical vector.

    ``no_finding`` goes POSITIVE only when a normal-study phrase matched with
    Present polarity and no other pathology aggregated to POSITIVE; a normal
    phrase alongside a positive finding downgrades no_finding to NEGATIVE.
    """
    if lex is None:
        lex = MentionLexicon.default()
    states = aggregate_mentions(find_mentions(normalize(text), lex))
    any_other_positive = any(
        s is LabelState.POSITIVE for p, s in states.items() if p != "no_finding")
    if states.get("no_finding") is LabelState.POSITIVE and any_other_positive:
        states["no_finding"] = LabelState.NEGATIVE
    return [states.get(p, LabelState.NOT_MENTIONED) for p in PATHOLOGIES]


def label_reports(texts: Sequence[str],
                  lex: Optional[MentionLexicon] = None) -> List[List[LabelState]]:
    if lex is None:
        lex = MentionLexicon.default()
    return [label_report(t, lex) for t in texts]

"""Role decomposition of action descriptions.

Each description is split into semantic-role groups (by default a Predicate
verb phrase and an Object span) either with the built-in lexicon matcher or
by importing precomputed role spans. Groups with identical canonical keys
are merged corpus-wide so that every surviving record id lives in exactly
one group.
"""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .corpus import ActionRecord
from .errors import SchemaMismatch, SpanOutOfRange, UnknownRoleLabel

logger = logging.getLogger(__name__)

PREDICATE = "Predicate"
OBJECT = "Object"

# Tokens that end the object span: they introduce trailing modifiers
# (instruments, locations) which are outside the configured role set.
_MODIFIER_HEADS = frozenset({
    "with", "in", "on", "into", "onto", "from", "to", "at", "by", "for",
    "using", "after", "before", "until", "towards", "toward", "under",
    "over", "off",
})

_ARTICLES = ("a", "an", "the")
_SENTENCE_SPLIT = re.compile(r"[.!?;]")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True, slots=True)
class RoleSet:
    """Ordered, duplicate-free role names."""

    roles: tuple[str, ...] = (PREDICATE, OBJECT)

    def __post_init__(self):
        if not self.roles:
            raise ValueError("role set must be non-empty")
        if len(set(self.roles)) != len(self.roles):
            raise ValueError(f"duplicate role names: {self.roles}")

    def __iter__(self):
        return iter(self.roles)

    def __len__(self):
        return len(self.roles)

    def __contains__(self, role: str) -> bool:
        return role in self.roles


DEFAULT_ROLES = RoleSet()


@dataclass(frozen=True, slots=True)
class RoleSpan:
    surface: str
    canonical: str


@dataclass(slots=True)
class SemanticGroups:
    """The role decomposition of one description, later merged with every
    record sharing the same canonical keys."""

    description: str
    role_map: dict[str, RoleSpan]
    source_record_ids: list[str] = field(default_factory=list)
    # Per-role taxonomy class ids, resolved from source records (None when
    # the sources carry no taxonomy annotation for that role).
    taxonomy_keys: dict[str, int | str | None] = field(default_factory=dict)
    # True when the predicate was taken from an unknown leading token
    # rather than a lexicon match.
    lexicon_fallback: bool = False

    @property
    def group_id(self) -> str:
        return "|".join(self.role_map[r].canonical for r in self.role_map)

    def canonical_tuple(self, roles: RoleSet) -> tuple[str, ...]:
        return tuple(self.role_map[r].canonical for r in roles)


@dataclass(frozen=True, slots=True)
class Rejection:
    """A description the parser could not decompose into the full role set."""

    reason: str  # "missing_role" | "empty"
    description: str
    detail: str = ""


def canonicalize(surface: str) -> str:
    """Normalize a role surface for character-level matching.

    Lowercase, strip punctuation, collapse whitespace, drop leading
    articles. Idempotent; the result is empty only for article-only input.
    """
    text = surface.lower().translate(_PUNCT_TABLE)
    tokens = text.split()
    while tokens and tokens[0] in _ARTICLES:
        tokens = tokens[1:]
    return " ".join(tokens)


class VerbLexicon:
    """Verb phrases (particles included) matched longest-first at the start
    of a description."""

    def __init__(self, phrases: Iterable[str]):
        self._phrases: set[tuple[str, ...]] = set()
        for phrase in phrases:
            tokens = tuple(phrase.lower().split())
            if tokens:
                self._phrases.add(tokens)
        if not self._phrases:
            raise ValueError("verb lexicon is empty")
        self._max_len = max(len(p) for p in self._phrases)

    def __len__(self) -> int:
        return len(self._phrases)

    def __contains__(self, phrase: str) -> bool:
        return tuple(phrase.lower().split()) in self._phrases

    def match_prefix(self, tokens: Sequence[str]) -> int:
        """Length of the longest phrase matching the token start, 0 if none."""
        lowered = [t.lower() for t in tokens[: self._max_len]]
        for length in range(min(self._max_len, len(lowered)), 0, -1):
            if tuple(lowered[:length]) in self._phrases:
                return length
        return 0

    @classmethod
    def from_file(cls, path: str | Path) -> "VerbLexicon":
        """Load a lexicon file: one verb phrase per line, '#' comments."""
        phrases = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                phrases.append(line)
        return cls(phrases)

    @classmethod
    def bundled(cls) -> "VerbLexicon":
        text = resources.files("misalign.data").joinpath("verbs.txt").read_text("utf-8")
        phrases = [ln.strip() for ln in text.splitlines()
                   if ln.strip() and not ln.strip().startswith("#")]
        return cls(phrases)


_BUNDLED: VerbLexicon | None = None


def default_lexicon() -> VerbLexicon:
    global _BUNDLED
    if _BUNDLED is None:
        _BUNDLED = VerbLexicon.bundled()
    return _BUNDLED


def parse_description(text: str, roles: RoleSet = DEFAULT_ROLES,
                      lexicon: VerbLexicon | None = None) -> SemanticGroups | Rejection:
    """Decompose a description into Predicate and Object groups.

    Only the first sentence is parsed. The Predicate is the longest lexicon
    phrase at the token start; when no phrase matches, the first token is
    taken as the Predicate and the parse is flagged as a lexicon fallback.
    The Object is the remaining span, cut before any trailing-modifier head
    ("with", "on", ...). Descriptions that do not yield every configured
    role are rejected.
    """
    if tuple(roles) != (PREDICATE, OBJECT):
        raise ValueError(
            f"built-in parser supports the ({PREDICATE}, {OBJECT}) role set; "
            f"import external role spans for {tuple(roles)}"
        )
    lexicon = lexicon or default_lexicon()

    stripped = text.strip()
    if not stripped:
        return Rejection("empty", text)
    first_sentence = _SENTENCE_SPLIT.split(stripped, maxsplit=1)[0].strip()
    tokens = first_sentence.split()
    if not tokens:
        return Rejection("empty", text)

    matched = lexicon.match_prefix(tokens)
    fallback = matched == 0
    if fallback:
        matched = 1
        logger.debug("no lexicon phrase at start of %r; first token taken as predicate", text)

    predicate_tokens = tokens[:matched]
    object_tokens = tokens[matched:]
    for position, token in enumerate(object_tokens):
        if token.lower() in _MODIFIER_HEADS and position > 0:
            object_tokens = object_tokens[:position]
            break

    predicate = RoleSpan(" ".join(predicate_tokens), canonicalize(" ".join(predicate_tokens)))
    obj = RoleSpan(" ".join(object_tokens), canonicalize(" ".join(object_tokens)))
    if not predicate.canonical or not obj.canonical:
        missing = PREDICATE if not predicate.canonical else OBJECT
        return Rejection("missing_role", text, detail=missing)

    return SemanticGroups(
        description=text,
        role_map={PREDICATE: predicate, OBJECT: obj},
        lexicon_fallback=fallback,
    )


@dataclass(slots=True)
class GroupingResult:
    """Merged groups plus rejection/fallback counters."""

    groups: list[SemanticGroups]
    parsed_records: int = 0
    rejected_records: int = 0
    rejections: Counter = field(default_factory=Counter)
    lexicon_fallbacks: int = 0
    taxonomy_conflicts: int = 0

    def counters(self) -> dict:
        return {
            "parsed_records": self.parsed_records,
            "rejected_records": self.rejected_records,
            "rejections": dict(self.rejections),
            "lexicon_fallbacks": self.lexicon_fallbacks,
            "taxonomy_conflicts": self.taxonomy_conflicts,
            "groups": len(self.groups),
        }


def _taxonomy_of(record: ActionRecord, role: str) -> int | str | None:
    if role == PREDICATE:
        return record.taxonomy_verb
    if role == OBJECT:
        return record.taxonomy_noun
    return None


def _resolve_taxonomy(values: list[int | str], result: GroupingResult) -> int | str | None:
    """Majority taxonomy id of a merged group, ties broken by string order."""
    if not values:
        return None
    counts = Counter(values)
    if len(counts) > 1:
        result.taxonomy_conflicts += 1
    top = max(counts.values())
    winners = sorted((str(v), v) for v, n in counts.items() if n == top)
    return winners[0][1]


def group_corpus(records: Iterable[ActionRecord], roles: RoleSet = DEFAULT_ROLES,
                 lexicon: VerbLexicon | None = None,
                 parse_fn: Callable[[str], SemanticGroups | Rejection] | None = None,
                 ) -> GroupingResult:
    """Parse every record's description and merge identical canonical role
    tuples into one group with pooled source record ids.

    ``parse_fn`` overrides the built-in parser (used for imported external
    role spans). Output order is deterministic: groups sorted by canonical
    tuple.
    """
    if parse_fn is None:
        lex = lexicon or default_lexicon()
        parse_fn = lambda text: parse_description(text, roles, lex)

    result = GroupingResult(groups=[])
    parse_cache: dict[str, SemanticGroups | Rejection] = {}
    merged: dict[tuple[str, ...], SemanticGroups] = {}
    taxonomy_pool: dict[tuple[str, ...], dict[str, list]] = {}

    for record in records:
        parsed = parse_cache.get(record.description)
        if parsed is None:
            parsed = parse_fn(record.description)
            parse_cache[record.description] = parsed
        if isinstance(parsed, Rejection):
            result.rejected_records += 1
            result.rejections[parsed.reason] += 1
            continue
        result.parsed_records += 1
        if parsed.lexicon_fallback:
            result.lexicon_fallbacks += 1

        key = parsed.canonical_tuple(roles)
        group = merged.get(key)
        if group is None:
            group = SemanticGroups(
                description=parsed.description,
                role_map=dict(parsed.role_map),
                lexicon_fallback=parsed.lexicon_fallback,
            )
            merged[key] = group
            taxonomy_pool[key] = {role: [] for role in roles}
        group.source_record_ids.append(record.record_id)
        for role in roles:
            value = _taxonomy_of(record, role)
            if value is not None:
                taxonomy_pool[key][role].append(value)

    for key in sorted(merged):
        group = merged[key]
        group.source_record_ids.sort()
        group.taxonomy_keys = {
            role: _resolve_taxonomy(taxonomy_pool[key][role], result) for role in roles
        }
        result.groups.append(group)
    return result


def import_external_srl(parse_file: str | Path,
                        roles: RoleSet = DEFAULT_ROLES) -> tuple[list[SemanticGroups], int]:
    """Import precomputed role spans instead of running the built-in parser.

    File format: one JSON object per line,
    ``{"description": "...", "spans": {"Predicate": [0, 2], "Object": [2, 4]}}``
    where spans are half-open ``[start, end)`` token indexes over the
    whitespace tokenization of the description. Entries that do not cover
    every configured role are rejected and counted; the rejected count is
    returned alongside the parses.
    """
    parses: list[SemanticGroups] = []
    rejected = 0
    with open(parse_file, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaMismatch(f"line {line_number}: not valid JSON ({exc})")
            if not isinstance(entry, dict) or "description" not in entry:
                raise SchemaMismatch(f"line {line_number}: entry needs a 'description'")
            spans = entry.get("spans")
            if not isinstance(spans, dict):
                raise SchemaMismatch(f"line {line_number}: entry needs a 'spans' object")

            for label in spans:
                if label not in roles:
                    raise UnknownRoleLabel(label, tuple(roles))

            description = str(entry["description"])
            tokens = description.split()
            if any(role not in spans for role in roles):
                rejected += 1
                continue

            role_map: dict[str, RoleSpan] = {}
            incomplete = False
            for role in roles:
                span = spans[role]
                if not (isinstance(span, (list, tuple)) and len(span) == 2):
                    raise SchemaMismatch(f"line {line_number}: span for {role} must be [start, end)")
                start, end = int(span[0]), int(span[1])
                if not (0 <= start < end <= len(tokens)):
                    raise SpanOutOfRange((start, end), len(tokens), description)
                surface = " ".join(tokens[start:end])
                canonical = canonicalize(surface)
                if not canonical:
                    incomplete = True
                    break
                role_map[role] = RoleSpan(surface, canonical)
            if incomplete:
                rejected += 1
                continue

            group = SemanticGroups(description=description, role_map=role_map)
            if entry.get("record_ids"):
                group.source_record_ids = [str(r) for r in entry["record_ids"]]
            parses.append(group)
    return parses, rejected


GROUPS_FORMAT = "misalign/groups"
GROUPS_VERSION = 1


def save_groups(groups: Iterable[SemanticGroups], path: str | Path,
                meta: dict | None = None) -> None:
    """Persist merged groups as a headered line-delimited file."""
    from .io import dumps, make_header, write_headered_lines

    groups = list(groups)
    header = make_header(GROUPS_FORMAT, GROUPS_VERSION, count=len(groups), **(meta or {}))

    def encode(group: SemanticGroups) -> str:
        data = {
            "group_id": group.group_id,
            "description": group.description,
            "roles": {r: {"surface": s.surface, "canonical": s.canonical}
                      for r, s in group.role_map.items()},
            "source_record_ids": group.source_record_ids,
            "taxonomy_keys": {r: v for r, v in group.taxonomy_keys.items() if v is not None},
            "lexicon_fallback": group.lexicon_fallback,
        }
        return dumps(data)

    write_headered_lines(path, header, (encode(g) for g in groups))


def load_groups(path: str | Path, roles: RoleSet = DEFAULT_ROLES) -> list[SemanticGroups]:
    from .io import read_headered_lines

    _, lines = read_headered_lines(path, GROUPS_FORMAT, GROUPS_VERSION)
    out = []
    for line_number, line in lines:
        try:
            data = json.loads(line)
            role_map = {r: RoleSpan(v["surface"], v["canonical"])
                        for r, v in data["roles"].items()}
            group = SemanticGroups(
                description=data["description"],
                role_map=role_map,
                source_record_ids=list(data.get("source_record_ids", [])),
                taxonomy_keys={r: data.get("taxonomy_keys", {}).get(r) for r in role_map},
                lexicon_fallback=bool(data.get("lexicon_fallback", False)),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise SchemaMismatch(f"groups file line {line_number}: {exc}")
        for role in roles:
            if role not in group.role_map:
                raise SchemaMismatch(
                    f"groups file line {line_number}: missing role {role!r}")
        out.append(group)
    return out


def external_parse_fn(parses: Iterable[SemanticGroups]
                      ) -> Callable[[str], SemanticGroups | Rejection]:
    """Adapt imported parses into a parse function keyed by description text.

    Descriptions absent from the import are rejected as missing_role, so
    the same grouping path serves both parser backends.
    """
    table = {p.description: p for p in parses}

    def lookup(text: str) -> SemanticGroups | Rejection:
        parsed = table.get(text)
        if parsed is None:
            return Rejection("missing_role", text, detail="not in external parse file")
        return SemanticGroups(description=parsed.description,
                              role_map=dict(parsed.role_map))

    return lookup

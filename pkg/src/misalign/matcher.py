"""Role-wise comparison of semantic groups and the inverted index that
makes category-constrained candidate retrieval scale.

A misalignment category is the subset of roles on which two descriptions
disagree (empty set = no mistake). With ``k`` configured roles there are
``2**k`` categories; for the default two-role set this coincides with the
four categories no-mistake / predicate / object / both. Candidate retrieval
never scans all pairs: it intersects and subtracts equal-key posting lists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Literal, Mapping, Sequence

from .errors import MissingTaxonomy
from .roles import RoleSet, SemanticGroups, DEFAULT_ROLES

CHARACTER = "character"
TAXONOMY = "taxonomy"


@dataclass(frozen=True, slots=True)
class Comparator:
    """Equality test between same-role groups.

    ``character`` compares canonical keys; ``taxonomy`` compares the class
    ids resolved from source records. ``per_role`` overrides the mode for
    individual roles.
    """

    mode: Literal["character", "taxonomy"] = CHARACTER
    per_role: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for mode in (self.mode, *self.per_role.values()):
            if mode not in (CHARACTER, TAXONOMY):
                raise ValueError(f"unknown comparator mode {mode!r}")

    def mode_for(self, role: str) -> str:
        return self.per_role.get(role, self.mode)

    def key_for(self, group: SemanticGroups, role: str) -> str:
        """The matching key of ``group`` for ``role`` under this comparator."""
        if self.mode_for(role) == CHARACTER:
            return group.role_map[role].canonical
        value = group.taxonomy_keys.get(role)
        if value is None:
            raise MissingTaxonomy(group.group_id, role)
        return f"t:{value}"

    def describe(self) -> dict:
        out: dict = {"mode": self.mode}
        if self.per_role:
            out["per_role"] = dict(self.per_role)
        return out


@dataclass(frozen=True)
class MisalignmentCategory:
    """The subset of roles on which instruction and attempt disagree."""

    mistaken_roles: frozenset[str]

    @classmethod
    def of(cls, *roles: str) -> "MisalignmentCategory":
        return cls(frozenset(roles))

    @classmethod
    def no_mistake(cls) -> "MisalignmentCategory":
        return cls(frozenset())

    @classmethod
    def all_categories(cls, roles: RoleSet) -> list["MisalignmentCategory"]:
        """All 2**k categories in canonical (bitmask over role order) order."""
        ordered = tuple(roles)
        out = []
        for mask in range(1 << len(ordered)):
            out.append(cls(frozenset(r for i, r in enumerate(ordered) if mask >> i & 1)))
        return out

    def bitmask(self, roles: RoleSet) -> int:
        return sum(1 << i for i, r in enumerate(roles) if r in self.mistaken_roles)

    def sorted_roles(self, roles: RoleSet) -> list[str]:
        return [r for r in roles if r in self.mistaken_roles]

    def name(self, roles: RoleSet) -> str:
        if not self.mistaken_roles:
            return "no_mistake"
        return "_".join(r.lower() for r in self.sorted_roles(roles)) + "_mistake"

    def __contains__(self, role: str) -> bool:
        return role in self.mistaken_roles

    def __len__(self) -> int:
        return len(self.mistaken_roles)

    def __iter__(self):
        return iter(self.mistaken_roles)


def groups_equal(cmp: Comparator, a: SemanticGroups, b: SemanticGroups, role: str) -> bool:
    return cmp.key_for(a, role) == cmp.key_for(b, role)


def misalignment_category(cmp: Comparator, a: SemanticGroups,
                          b: SemanticGroups) -> MisalignmentCategory:
    """The set of roles on which ``a`` and ``b`` disagree."""
    if set(a.role_map) != set(b.role_map):
        raise ValueError("groups must share the same role set")
    return MisalignmentCategory(frozenset(
        role for role in a.role_map if not groups_equal(cmp, a, b, role)
    ))


class RoleIndex:
    """Inverted index over groups: per role (and per role subset) a map from
    matching key to the sorted ids of groups carrying that key.

    Ids are positions in a deterministic ordering of the input (sorted by
    key tuple, then description, then source ids), so rebuilding from a
    shuffled copy of the same groups yields an identical index.
    """

    def __init__(self, groups: Sequence[SemanticGroups], roles: RoleSet, cmp: Comparator):
        self.roles = roles
        self.comparator = cmp
        ordered = tuple(roles)

        decorated = []
        for group in groups:
            keys = tuple(cmp.key_for(group, role) for role in ordered)
            decorated.append((keys, group.description, tuple(group.source_record_ids), group))
        decorated.sort(key=lambda item: item[:3])

        self.groups: list[SemanticGroups] = [item[3] for item in decorated]
        self.keys: list[tuple[str, ...]] = [item[0] for item in decorated]
        self._position: dict[int, int] = {id(g): i for i, g in enumerate(self.groups)}

        # Posting lists for every non-empty role subset; ids appended in
        # position order are already ascending.
        self.role_positions = {role: i for i, role in enumerate(ordered)}
        self.subsets: list[tuple[int, ...]] = []
        for size in range(1, len(ordered) + 1):
            self.subsets.extend(combinations(range(len(ordered)), size))
        self._postings: dict[tuple[int, ...], dict[tuple[str, ...], list[int]]] = {
            subset: {} for subset in self.subsets
        }
        for gid, keys in enumerate(self.keys):
            for subset in self.subsets:
                key = tuple(keys[i] for i in subset)
                self._postings[subset].setdefault(key, []).append(gid)

    def __len__(self) -> int:
        return len(self.groups)

    def group(self, gid: int) -> SemanticGroups:
        return self.groups[gid]

    def position_of(self, g: SemanticGroups) -> int:
        gid = self._position.get(id(g))
        if gid is None:
            raise KeyError(f"group {g.group_id!r} is not indexed")
        return gid

    def _subset_of(self, role_names: Iterable[str]) -> tuple[int, ...]:
        return tuple(sorted(self.role_positions[r] for r in role_names))

    def ids_agreeing(self, gid: int, role_names: Iterable[str]) -> list[int]:
        """Sorted ids sharing this group's keys on every role in the subset
        (the group itself included)."""
        subset = self._subset_of(role_names)
        if not subset:
            return list(range(len(self.groups)))
        key = tuple(self.keys[gid][i] for i in subset)
        return self._postings[subset].get(key, [])

    def count_agreeing(self, gid: int, role_names: Iterable[str]) -> int:
        subset = self._subset_of(role_names)
        if not subset:
            return len(self.groups)
        key = tuple(self.keys[gid][i] for i in subset)
        return len(self._postings[subset].get(key, ()))

    def key_histograms(self) -> dict[str, dict[str, int]]:
        """Per role: matching key -> group count (diagnostics)."""
        out: dict[str, dict[str, int]] = {}
        for role, pos in self.role_positions.items():
            postings = self._postings[(pos,)]
            out[role] = {key[0]: len(ids) for key, ids in sorted(postings.items())}
        return out


def build_index(groups: Sequence[SemanticGroups], cmp: Comparator,
                roles: RoleSet = DEFAULT_ROLES) -> RoleIndex:
    return RoleIndex(groups, roles, cmp)


def candidates(index: RoleIndex, g: SemanticGroups | int,
               cat: MisalignmentCategory) -> list[int]:
    """Ids of the groups whose misalignment category against ``g`` is
    exactly ``cat``, via posting-list set algebra (never an all-pairs scan).

    ``g`` may be an indexed group or its id. The returned ids are sorted and
    never include ``g`` itself.
    """
    gid = g if isinstance(g, int) else index.position_of(g)
    ordered = tuple(index.roles)
    unknown = set(cat.mistaken_roles) - set(ordered)
    if unknown:
        raise ValueError(f"category contains unknown roles {sorted(unknown)}")
    must_equal = [r for r in ordered if r not in cat]
    must_differ = [r for r in ordered if r in cat]

    if must_equal:
        pool = set(index.ids_agreeing(gid, must_equal))
        for role in must_differ:
            pool.difference_update(index.ids_agreeing(gid, [*must_equal, role]))
    else:
        pool = set(range(len(index)))
        for role in must_differ:
            pool.difference_update(index.ids_agreeing(gid, [role]))
    pool.discard(gid)
    return sorted(pool)


def count_candidates(index: RoleIndex, gid: int, cat: MisalignmentCategory) -> int:
    """|candidates(index, gid, cat)| by inclusion-exclusion over posting
    list sizes, without materializing the set."""
    ordered = tuple(index.roles)
    must_equal = [r for r in ordered if r not in cat]
    differ = [r for r in ordered if r in cat]
    total = 0
    for size in range(len(differ) + 1):
        for subset in combinations(differ, size):
            total += (-1) ** size * index.count_agreeing(gid, [*must_equal, *subset])
    # The formula counts gid itself exactly when cat is empty.
    if not cat.mistaken_roles:
        total -= 1
    return total

"""Two-level label taxonomy: coarse categories partitioned into fine classes."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence


class TaxonomyError(ValueError):
    """Raised for malformed or inconsistent taxonomy definitions."""


@dataclass(frozen=True)
class CoarseLabel:
    id: int
    name: str


@dataclass(frozen=True)
class FineLabel:
    id: int
    name: str


def _norm(name: str) -> str:
    return re.sub(r"[\s_\-]+", " ", name.strip().lower())


@dataclass(frozen=True)
class Taxonomy:
    """Immutable two-level tree.

    Fine and coarse ids are dense and assigned by file order. ``parent[f]`` is
    the coarse id owning fine class ``f``.
    """

    coarse: tuple[CoarseLabel, ...]
    fine: tuple[FineLabel, ...]
    parent: tuple[int, ...]
    _children: tuple[tuple[int, ...], ...] = field(repr=False, compare=False, default=())
    _lookup: dict = field(repr=False, compare=False, default_factory=dict)

    @classmethod
    def from_groups(cls, groups: Sequence[tuple[str, Sequence[str]]]) -> "Taxonomy":
        """Build and validate a taxonomy from ``[(coarse_name, [fine_name, ...]), ...]``."""
        if not groups:
            raise TaxonomyError("taxonomy has no coarse categories")
        coarse: list[CoarseLabel] = []
        fine: list[FineLabel] = []
        parent: list[int] = []
        seen_coarse: set[str] = set()
        seen_fine: dict[str, str] = {}
        for cname, members in groups:
            if not isinstance(cname, str) or not cname.strip():
                raise TaxonomyError("coarse category with empty name")
            if _norm(cname) in seen_coarse:
                raise TaxonomyError(f"duplicate coarse label: {cname!r}")
            seen_coarse.add(_norm(cname))
            if not members:
                raise TaxonomyError(f"empty coarse category: {cname!r}")
            cid = len(coarse)
            coarse.append(CoarseLabel(cid, cname))
            for fname in members:
                if not isinstance(fname, str) or not fname.strip():
                    raise TaxonomyError(f"orphan fine label (empty name) under {cname!r}")
                key = _norm(fname)
                if key in seen_fine:
                    raise TaxonomyError(
                        f"duplicate fine label: {fname!r} appears under "
                        f"{seen_fine[key]!r} and {cname!r}"
                    )
                seen_fine[key] = cname
                fine.append(FineLabel(len(fine), fname))
                parent.append(cid)
        return cls.from_parts(coarse, fine, parent)

    @classmethod
    def from_parts(cls, coarse, fine, parent) -> "Taxonomy":
        coarse = tuple(coarse)
        fine = tuple(fine)
        parent = tuple(int(p) for p in parent)
        if [c.id for c in coarse] != list(range(len(coarse))):
            raise TaxonomyError("coarse ids must be dense 0..C-1")
        if [f.id for f in fine] != list(range(len(fine))):
            raise TaxonomyError("fine ids must be dense 0..F-1")
        if len(parent) != len(fine):
            raise TaxonomyError("parent map is not total over fine labels")
        children: list[list[int]] = [[] for _ in coarse]
        for f, c in enumerate(parent):
            if not 0 <= c < len(coarse):
                raise TaxonomyError(f"orphan fine label: {fine[f].name!r} has no valid parent")
            children[c].append(f)
        for c, kids in enumerate(children):
            if not kids:
                raise TaxonomyError(f"empty coarse category: {coarse[c].name!r}")
        lookup = {}
        for f in fine:
            lookup[("fine", _norm(f.name))] = f.id
        for c in coarse:
            lookup[("coarse", _norm(c.name))] = c.id
        return cls(coarse, fine, parent, tuple(tuple(k) for k in children), lookup)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse)

    @property
    def n_fine(self) -> int:
        return len(self.fine)

    def coarse_of(self, f: int) -> int:
        if not 0 <= f < len(self.fine):
            raise IndexError(f"fine label id {f} out of range 0..{len(self.fine) - 1}")
        return self.parent[f]

    def fine_set(self, c: int) -> list[int]:
        if not 0 <= c < len(self.coarse):
            raise IndexError(f"coarse label id {c} out of range 0..{len(self.coarse) - 1}")
        return list(self._children[c])

    def fine_id(self, name: str) -> int:
        """Resolve a fine name; case, underscores and hyphens are ignored."""
        try:
            return self._lookup[("fine", _norm(name))]
        except KeyError:
            raise KeyError(f"unknown fine label: {name!r}") from None

    def coarse_id(self, name: str) -> int:
        try:
            return self._lookup[("coarse", _norm(name))]
        except KeyError:
            raise KeyError(f"unknown coarse label: {name!r}") from None

    def local_index(self, f: int) -> int:
        """Position of fine class ``f`` inside its parent's fine set."""
        return self._children[self.coarse_of(f)].index(f)

    def to_dict(self) -> dict:
        return {
            "coarse": [
                {"name": c.name, "fine": [self.fine[f].name for f in self._children[c.id]]}
                for c in self.coarse
            ]
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def taxonomy_from_dict(doc: dict) -> Taxonomy:
    if not isinstance(doc, dict) or not isinstance(doc.get("coarse"), list):
        raise TaxonomyError('taxonomy JSON must be an object with a "coarse" list')
    groups = []
    for i, entry in enumerate(doc["coarse"]):
        if not isinstance(entry, dict) or "name" not in entry or "fine" not in entry:
            raise TaxonomyError(f'coarse entry {i} needs "name" and "fine" keys')
        if not isinstance(entry["fine"], list):
            raise TaxonomyError(f'coarse entry {entry["name"]!r}: "fine" must be a list')
        groups.append((entry["name"], entry["fine"]))
    return Taxonomy.from_groups(groups)


def load_taxonomy(path: str | Path) -> Taxonomy:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise TaxonomyError(f"cannot read taxonomy file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"parse error in {path}: {exc}") from exc
    return taxonomy_from_dict(doc)


def save_taxonomy(t: Taxonomy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(t.to_dict(), indent=2) + "\n", encoding="utf-8")


def nw45_path() -> Path:
    return Path(str(resources.files("hiercascade") / "data" / "nw45.taxonomy.json"))


def load_nw45() -> Taxonomy:
    return load_taxonomy(nw45_path())


def coarse_of(t: Taxonomy, f: int) -> int:
    return t.coarse_of(f)


def fine_set(t: Taxonomy, c: int) -> list[int]:
    return t.fine_set(c)


def synthetic_taxonomy(sizes: Iterable[int], prefix: str = "") -> Taxonomy:
    """Taxonomy with ``len(sizes)`` coarse groups named ``C0..`` holding ``c0f0..`` style leaves."""
    groups = [
        (f"{prefix}C{c}", [f"{prefix}c{c}f{j}" for j in range(n)])
        for c, n in enumerate(sizes)
    ]
    return Taxonomy.from_groups(groups)

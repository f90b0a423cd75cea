"""Eligibility-logic core: boolean trees, DNF normalization, clause model.

A structured trial is a disjunction of conjunctive clauses: a patient is
eligible iff at least one clause is fully satisfied. Clause atoms are opaque
normalized strings at this layer; ontology-coded identity lives in
`trialmatch.ontology`.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace

from .errors import ExpansionLimitExceeded, NoJsonFound, SchemaViolation

logger = logging.getLogger(__name__)

DNF_CONJUNCTION_CAP = 512

CLAUSE_KEYS = (
    "cohort",
    "disease_state",
    "histology_inclusion",
    "biomarker_inclusion",
    "histology_exclusion",
    "biomarker_exclusion",
)
_WS = re.compile(r"\s+")


def canonical_text(text: str) -> str:
    """Lowercase and collapse runs of whitespace; the atom identity used everywhere."""
    return _WS.sub(" ", text).strip().lower()


# ---------------------------------------------------------------------------
# Boolean expression trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Atom:
    text: str
    category: str = ""


@dataclass(frozen=True)
class And:
    children: tuple

    def __init__(self, *children):
        if not children:
            raise ValueError("And requires at least one child")
        object.__setattr__(self, "children", tuple(children))


@dataclass(frozen=True)
class Or:
    children: tuple

    def __init__(self, *children):
        if not children:
            raise ValueError("Or requires at least one child")
        object.__setattr__(self, "children", tuple(children))


@dataclass(frozen=True)
class Not:
    child: object


BoolExpr = Atom | And | Or | Not


@dataclass(frozen=True, order=True)
class Literal:
    """An atom or its negation; the leaf unit of a DNF conjunction."""

    text: str
    category: str = ""
    negated: bool = False

    @property
    def atom(self) -> Atom:
        return Atom(self.text, self.category)

    def complement(self) -> "Literal":
        return replace(self, negated=not self.negated)


def _nnf(expr: BoolExpr, negate: bool):
    """Push negations down to atoms (De Morgan), returning an And/Or/Literal tree."""
    if isinstance(expr, Atom):
        return Literal(expr.text, expr.category, negated=negate)
    if isinstance(expr, Not):
        return _nnf(expr.child, not negate)
    if isinstance(expr, And):
        kids = tuple(_nnf(c, negate) for c in expr.children)
        return Or(*kids) if negate else And(*kids)
    if isinstance(expr, Or):
        kids = tuple(_nnf(c, negate) for c in expr.children)
        return And(*kids) if negate else Or(*kids)
    raise TypeError(f"not a boolean expression node: {expr!r}")


def _contradictory(conj: frozenset) -> bool:
    return any(lit.complement() in conj for lit in conj)


def _distribute(node, cap: int) -> list:
    """Bottom-up distribution of AND over OR into a list of literal frozensets."""
    if isinstance(node, Literal):
        return [frozenset([node])]
    if isinstance(node, Or):
        out = []
        seen = set()
        for child in node.children:
            for conj in _distribute(child, cap):
                if conj not in seen:
                    seen.add(conj)
                    out.append(conj)
            if len(out) > cap:
                raise ExpansionLimitExceeded(
                    f"DNF expansion exceeded {cap} conjunctions"
                )
        return out
    if isinstance(node, And):
        acc = [frozenset()]
        for child in node.children:
            child_sets = _distribute(child, cap)
            merged = []
            seen = set()
            for a in acc:
                for b in child_sets:
                    c = a | b
                    # contradictions (x AND not x) are pruned as they form
                    if c in seen or _contradictory(c):
                        continue
                    seen.add(c)
                    merged.append(c)
                if len(merged) > cap:
                    raise ExpansionLimitExceeded(
                        f"DNF expansion exceeded {cap} conjunctions"
                    )
            acc = merged
        return acc
    raise TypeError(f"unexpected NNF node: {node!r}")


def _drop_subsumed(conjunctions: list) -> list:
    """Remove any conjunction that is a superset of another (it is redundant)."""
    by_size = sorted(set(conjunctions), key=len)
    kept: list = []
    for conj in by_size:
        if not any(other < conj or other == conj for other in kept):
            kept.append(conj)
    return kept


def to_dnf(expr: BoolExpr, max_conjunctions: int = DNF_CONJUNCTION_CAP) -> list[list[Literal]]:
    """Normalize a boolean tree into a disjunction of conjunctions.

    Negations are pushed to the atoms, AND is distributed over OR,
    contradictory/duplicate/subsumed conjunctions are removed, and the
    result is deterministically ordered. An empty result means the
    expression is unsatisfiable.

    Raises ExpansionLimitExceeded when distribution would produce more
    than `max_conjunctions` conjunctions (pathological nesting).
    """
    nnf = _nnf(expr, negate=False)
    conjunctions = _drop_subsumed(_distribute(nnf, max_conjunctions))
    ordered = [sorted(conj) for conj in conjunctions]
    ordered.sort(key=lambda lits: [(l.text, l.category, l.negated) for l in lits])
    return ordered


# ---------------------------------------------------------------------------
# Eligibility clauses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EligibilityClause:
    """One conjunctive way to qualify for a trial.

    Satisfied iff the histology inclusion and every biomarker inclusion hold
    and no exclusion atom holds.
    """

    cohort: str = ""
    disease_state: str = ""
    histology_inclusion: str = ""
    biomarker_inclusion: tuple[str, ...] = ()
    histology_exclusion: tuple[str, ...] = ()
    biomarker_exclusion: tuple[str, ...] = ()

    def inclusion_exclusion_overlap(self) -> set[str]:
        """Canonical atoms appearing on both sides of the clause (invalid)."""
        inc = {canonical_text(self.histology_inclusion)} - {""}
        inc |= {canonical_text(a) for a in self.biomarker_inclusion}
        exc = {canonical_text(a) for a in self.histology_exclusion}
        exc |= {canonical_text(a) for a in self.biomarker_exclusion}
        return inc & exc

    def to_json_dict(self) -> dict:
        return {
            "cohort": self.cohort,
            "disease_state": self.disease_state,
            "histology_inclusion": self.histology_inclusion,
            "biomarker_inclusion": list(self.biomarker_inclusion),
            "histology_exclusion": list(self.histology_exclusion),
            "biomarker_exclusion": list(self.biomarker_exclusion),
        }


@dataclass(frozen=True, order=True)
class CanonicalClause:
    """Order/case/whitespace-insensitive clause identity (cohort excluded)."""

    disease_state: str
    histology_inclusion: str
    biomarker_inclusion: tuple[str, ...]
    histology_exclusion: tuple[str, ...]
    biomarker_exclusion: tuple[str, ...]


def canonicalize(clause: EligibilityClause) -> CanonicalClause:
    """Normalize a clause for equality: lowercase, collapse whitespace, sort lists."""

    def norm_list(atoms) -> tuple[str, ...]:
        return tuple(sorted({canonical_text(a) for a in atoms} - {""}))

    return CanonicalClause(
        disease_state=canonical_text(clause.disease_state),
        histology_inclusion=canonical_text(clause.histology_inclusion),
        biomarker_inclusion=norm_list(clause.biomarker_inclusion),
        histology_exclusion=norm_list(clause.histology_exclusion),
        biomarker_exclusion=norm_list(clause.biomarker_exclusion),
    )


def dedupe_clauses(clauses: list[EligibilityClause]) -> list[EligibilityClause]:
    """Drop clauses whose canonical form was already seen, keeping first occurrence."""
    seen: set[CanonicalClause] = set()
    out = []
    for clause in clauses:
        key = canonicalize(clause)
        if key not in seen:
            seen.add(key)
            out.append(clause)
    return out


@dataclass
class StructuredTrial:
    """A trial's eligibility as a disjunction of clauses."""

    nct_id: str
    clauses: list[EligibilityClause] = field(default_factory=list)
    provenance: dict | None = field(default=None, compare=False)

    def to_json_dict(self) -> dict:
        doc = {
            "nct_id": self.nct_id,
            "clauses": [c.to_json_dict() for c in self.clauses],
        }
        if self.provenance is not None:
            doc["provenance"] = self.provenance
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict, strict: bool = False) -> "StructuredTrial":
        clauses = []
        for raw in doc.get("clauses", []):
            clause = _clause_from_mapping(raw)
            if strict:
                if not clause.histology_inclusion.strip():
                    raise SchemaViolation(
                        f"{doc.get('nct_id')}: clause without histology_inclusion"
                    )
                overlap = clause.inclusion_exclusion_overlap()
                if overlap:
                    raise SchemaViolation(
                        f"{doc.get('nct_id')}: atom(s) on both sides: {sorted(overlap)}"
                    )
            clauses.append(clause)
        return cls(
            nct_id=doc["nct_id"],
            clauses=clauses,
            provenance=doc.get("provenance"),
        )


def load_structured_trials(path, strict: bool = False) -> list[StructuredTrial]:
    """Read StructuredTrial JSONL (also the gold-annotation file format)."""
    trials = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                trials.append(StructuredTrial.from_json_dict(json.loads(line), strict=strict))
    return trials


def write_structured_trials(path, trials) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trial in trials:
            fh.write(json.dumps(trial.to_json_dict(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Extractor-output parsing
# ---------------------------------------------------------------------------

def _coerce_str(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, list):
        # some backends emit a single-element list for a scalar field
        return _coerce_str(value[0]) if value else ""
    return str(value)


def _coerce_list(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,) if value.strip() else ()
    if isinstance(value, list):
        return tuple(s for s in (_coerce_str(v) for v in value) if s.strip())
    return (str(value),)


def _clause_from_mapping(raw: dict) -> EligibilityClause:
    return EligibilityClause(
        cohort=_coerce_str(raw.get("cohort")),
        disease_state=_coerce_str(raw.get("disease_state")),
        histology_inclusion=_coerce_str(raw.get("histology_inclusion")),
        biomarker_inclusion=_coerce_list(raw.get("biomarker_inclusion")),
        histology_exclusion=_coerce_list(raw.get("histology_exclusion")),
        biomarker_exclusion=_coerce_list(raw.get("biomarker_exclusion")),
    )


def _scan_json_array(text: str):
    """Yield (start, end) slices of balanced top-level [...] regions."""
    idx = 0
    while True:
        start = text.find("[", idx)
        if start < 0:
            return
        depth = 0
        in_string = False
        escaped = False
        for pos in range(start, len(text)):
            ch = text[pos]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
                if depth == 0:
                    yield start, pos + 1
                    break
        idx = start + 1


def parse_extractor_json(text: str) -> list[EligibilityClause]:
    """Recover the clause array from a backend response.

    The response may wrap the JSON in prose or code fences; the first
    balanced array that parses as JSON wins. Clauses with an empty
    histology_inclusion are dropped (they carry no usable inclusion
    anchor), as are clauses with an atom on both an inclusion and an
    exclusion side. Unknown keys are dropped with a warning.

    Raises NoJsonFound / SchemaViolation; callers running batches catch
    these per trial.
    """
    payload = None
    for start, end in _scan_json_array(text):
        try:
            candidate = json.loads(text[start:end])
        except json.JSONDecodeError:
            continue
        if isinstance(candidate, list):
            payload = candidate
            break
    if payload is None:
        raise NoJsonFound("no parseable JSON array in response")

    clauses = []
    for element in payload:
        if not isinstance(element, dict):
            raise SchemaViolation(f"array element is not an object: {element!r}")
        unknown = set(element) - set(CLAUSE_KEYS)
        if unknown:
            logger.warning("dropping unknown clause keys: %s", sorted(unknown))
        clause = _clause_from_mapping(element)
        if not clause.histology_inclusion.strip():
            logger.warning("dropping clause without histology_inclusion: %s", element)
            continue
        overlap = clause.inclusion_exclusion_overlap()
        if overlap:
            logger.warning("dropping clause with atoms on both sides: %s", sorted(overlap))
            continue
        clauses.append(clause)
    return clauses

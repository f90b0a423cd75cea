"""Histology and biomarker normalization plus subsumption queries.

Histologies live in a rooted hierarchy of coded concepts; a criterion
concept subsumes a patient concept when it is the same node or an ancestor.
A designated "solid tumor" code is special: it covers every node whose
ancestry reaches one of the configured solid-tumor roots, because real
hierarchies have no single solid-tumor node.

Biomarkers are classified onto an abstraction chain
amino_acid < exon < gene < pathway; a criterion subsumes a patient
biomarker when its level is equal or more abstract, the gene lines up
(directly or through a pathway gene set), alteration kinds are compatible,
and polarity agrees. Phenotype markers (MSI/TMB/MMR/PD-L1/HR/ER/PR/HER2
status) compare by normalized label and polarity only; chromosomal
alterations compare by string equality.

Alteration-kind compatibility (flagged for review — the clinical rules are
fuzzier than any fixed table):
  - identical kinds are compatible;
  - a criterion of kind "status" (bare positive/alteration wording) is a
    wildcard over patient kinds;
  - a "mutation" criterion additionally covers intragenic indels, i.e.
    patient deletions at amino-acid or exon level; it does NOT cover
    gene-level amplifications or deletions (copy-number events).

Known limitations: an exon-level criterion does not check its exon number
against amino-acid-level patient variants (placing a protein change in an
exon needs coordinate data, which is out of scope), and chromosomal events
have no positional subsumption.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

from .criteria_logic import canonical_text
from .errors import (
    CycleDetected,
    DuplicateCode,
    UnknownCode,
    UnknownParent,
    UnparseableBiomarker,
)

SOLID_TUMOR_CODE = "SOLID_TUMOR"

# top-level codes treated as non-solid when deriving the default solid root set
HEMATOLOGIC_ROOTS = frozenset({"LYMPH", "MYELOID", "BLOOD", "HEME", "LYMPHOID"})

GENE_ALIASES = {"HER2": "ERBB2"}

LEVEL_RANK = {"amino_acid": 0, "exon": 1, "gene": 2, "pathway": 3}


# ---------------------------------------------------------------------------
# Histology hierarchy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HistologyConcept:
    code: str
    label: str
    parent_code: str | None = None
    synonyms: tuple[str, ...] = ()


class OncoTree:
    """Loaded histology hierarchy with synonym and ancestor indexes."""

    def __init__(
        self,
        concepts: list[HistologyConcept],
        solid_tumor_code: str = SOLID_TUMOR_CODE,
        solid_tumor_roots: set[str] | None = None,
    ):
        self.nodes: dict[str, HistologyConcept] = {}
        for concept in concepts:
            if concept.code in self.nodes:
                raise DuplicateCode(concept.code)
            self.nodes[concept.code] = concept
        for concept in concepts:
            if concept.parent_code and concept.parent_code not in self.nodes:
                raise UnknownParent(f"{concept.code} -> {concept.parent_code}")

        self._ancestors: dict[str, frozenset[str]] = {}
        for code in self.nodes:
            self._ancestors[code] = self._walk_ancestors(code)

        self._label_index: dict[str, list[str]] = {}
        self._synonym_index: dict[str, list[str]] = {}
        for concept in concepts:
            self._label_index.setdefault(canonical_text(concept.label), []).append(concept.code)
            for syn in concept.synonyms:
                self._synonym_index.setdefault(canonical_text(syn), []).append(concept.code)

        self.solid_tumor_code = solid_tumor_code
        if solid_tumor_roots is not None:
            self.solid_tumor_roots = frozenset(solid_tumor_roots)
        elif solid_tumor_code in self.nodes:
            self.solid_tumor_roots = frozenset(
                c.code
                for c in concepts
                if c.parent_code is not None
                and self.nodes[c.parent_code].parent_code is None
                and c.code not in HEMATOLOGIC_ROOTS
                and c.code != solid_tumor_code
            )
        else:
            self.solid_tumor_roots = frozenset()

    def _walk_ancestors(self, code: str) -> frozenset[str]:
        seen = []
        current = self.nodes[code].parent_code
        while current is not None:
            if current == code or current in seen:
                raise CycleDetected(f"parent chain loops at {current}")
            seen.append(current)
            current = self.nodes[current].parent_code
        return frozenset(seen)

    def get(self, code: str) -> HistologyConcept:
        try:
            return self.nodes[code]
        except KeyError:
            raise UnknownCode(code) from None

    def ancestors(self, code: str) -> frozenset[str]:
        if code not in self._ancestors:
            raise UnknownCode(code)
        return self._ancestors[code]

    def normalize(self, text: str) -> list[HistologyConcept]:
        """Resolve free text to concepts: exact label, synonym, then longest substring.

        Returns an empty list when nothing resolves; never guesses.
        """
        query = canonical_text(text)
        if not query:
            return []
        codes = self._label_index.get(query)
        if codes:
            return [self.nodes[c] for c in sorted(codes)]
        codes = self._synonym_index.get(query)
        if codes:
            return [self.nodes[c] for c in sorted(codes)]
        # longest name (label or synonym) occurring inside the query text
        hits: list[tuple[int, str]] = []
        for index in (self._label_index, self._synonym_index):
            for name, owner_codes in index.items():
                if name and name in query:
                    hits.extend((len(name), c) for c in owner_codes)
        if not hits:
            return []
        best = max(length for length, _ in hits)
        best_codes = sorted({c for length, c in hits if length == best})
        return [self.nodes[c] for c in best_codes]

    def subsumes(self, criterion: HistologyConcept, patient: HistologyConcept) -> bool:
        """True iff the criterion concept is the patient concept or an ancestor."""
        if criterion.code not in self.nodes:
            raise UnknownCode(criterion.code)
        if patient.code not in self.nodes:
            raise UnknownCode(patient.code)
        if criterion.code == self.solid_tumor_code:
            lineage = {patient.code} | self._ancestors[patient.code]
            return patient.code == self.solid_tumor_code or bool(
                lineage & self.solid_tumor_roots
            )
        return criterion.code == patient.code or criterion.code in self._ancestors[patient.code]


def load_oncotree(path=None, **kwargs) -> OncoTree:
    """Load a hierarchy file (JSON list of {code, label, parent, synonyms}).

    With no path, loads the bundled mini hierarchy.
    """
    if path is None:
        text = resources.files("trialmatch.data").joinpath("oncotree.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    concepts = [
        HistologyConcept(
            code=entry["code"],
            label=entry.get("label", entry["code"]),
            parent_code=entry.get("parent") or None,
            synonyms=tuple(entry.get("synonyms", ())),
        )
        for entry in raw
    ]
    return OncoTree(concepts, **kwargs)


def subsumes_histology(tree: OncoTree, criterion: HistologyConcept, patient: HistologyConcept) -> bool:
    return tree.subsumes(criterion, patient)


def normalize_histology(tree: OncoTree, text: str) -> list[HistologyConcept]:
    return tree.normalize(text)


# ---------------------------------------------------------------------------
# Pathway map
# ---------------------------------------------------------------------------

def _canonical_pathway_name(name: str) -> str:
    cleaned = canonical_text(name)
    cleaned = re.sub(r"\s*/\s*", "/", cleaned)
    cleaned = re.sub(r"\b(pathway|signaling|signalling)\b", " ", cleaned)
    return canonical_text(cleaned).upper()


class PathwayMap:
    """Pathway name -> gene symbol set, with normalized name lookup."""

    def __init__(self, pathways: dict[str, set[str]]):
        self._genes: dict[str, frozenset[str]] = {}
        for name, genes in pathways.items():
            key = _canonical_pathway_name(name)
            if not genes:
                raise ValueError(f"pathway {name!r} has an empty gene set")
            if key in self._genes:
                raise ValueError(f"duplicate pathway name {name!r}")
            self._genes[key] = frozenset(g.upper() for g in genes)

    def genes(self, name: str) -> frozenset[str] | None:
        return self._genes.get(_canonical_pathway_name(name))

    def names(self) -> frozenset[str]:
        return frozenset(self._genes)

    def __contains__(self, name: str) -> bool:
        return _canonical_pathway_name(name) in self._genes


def load_pathways(path=None) -> PathwayMap:
    if path is None:
        text = resources.files("trialmatch.data").joinpath("pathways.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    raw = json.loads(text)
    return PathwayMap({name: set(genes) for name, genes in raw.items()})


_DEFAULT_PATHWAYS: PathwayMap | None = None


def default_pathways() -> PathwayMap:
    global _DEFAULT_PATHWAYS
    if _DEFAULT_PATHWAYS is None:
        _DEFAULT_PATHWAYS = load_pathways()
    return _DEFAULT_PATHWAYS


# ---------------------------------------------------------------------------
# Biomarker parsing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Biomarker:
    gene: str | None
    level: str  # amino_acid | exon | chromosomal | gene | pathway | phenotype
    detail: str
    alteration_kind: str  # mutation | amplification | deletion | fusion | expression | status
    polarity: str  # positive | negative
    source_text: str = ""

    def identity(self) -> str:
        """Stable key for normalized-equality comparisons."""
        return "|".join(
            (self.level, self.gene or "", canonical_text(self.detail),
             self.alteration_kind, self.polarity)
        )


_NEGATIVE_CUE = re.compile(
    r"\bnegative\b|\bwild[\s-]?type\b|\bwildtype\b|\babsence of\b|\bwithout\b|\bno\b|\bnon[\s-]?mutated\b",
    re.IGNORECASE,
)

_PHENOTYPE_PATTERNS: list[tuple[re.Pattern, str]] = [
    (re.compile(r"\bmsi[\s-]?h(igh)?\b|\bmicrosatellite instability[\s-]?high\b", re.I), "MSI-H"),
    (re.compile(r"\bmsi[\s-]?l(ow)?\b|\bmicrosatellite instability[\s-]?low\b", re.I), "MSI-L"),
    (re.compile(r"\bmss\b|\bmicrosatellite stable\b", re.I), "MSS"),
    (re.compile(r"\bmicrosatellite instability\b|\bmsi\b", re.I), "MSI"),
    (re.compile(r"\btmb[\s-]?h(igh)?\b|\btumor mutational burden[\s-]?high\b", re.I), "TMB-H"),
    (re.compile(r"\btmb[\s-]?l(ow)?\b|\btumor mutational burden[\s-]?low\b", re.I), "TMB-L"),
    (re.compile(r"\btumor (mutational|molecular) burden\b|\btmb\b", re.I), "TMB"),
    (re.compile(r"\bdmmr\b|\bdeficient mismatch repair\b|\bmismatch repair[\s-]?deficien\w*\b|\bmmr[\s-]?deficien\w*\b", re.I), "dMMR"),
    (re.compile(r"\bpmmr\b|\bproficient mismatch repair\b|\bmismatch repair[\s-]?proficien\w*\b|\bmmr[\s-]?proficien\w*\b", re.I), "pMMR"),
    (re.compile(r"\bpd[\s-]?l1\b", re.I), "PD-L1"),
    (re.compile(r"\bher2[\s-]?(positive|negative|\+|\-)", re.I), "HER2"),
    (re.compile(r"\bhormone receptor[\s-]?(positive|negative)|\bhr[\s-]?(positive|negative|\+|\-)", re.I), "HR"),
    (re.compile(r"\ber[\s-]?(positive|negative|\+|\-)|\bestrogen receptor[\s-]?(positive|negative)", re.I), "ER"),
    (re.compile(r"\bpr[\s-]?(positive|negative|\+|\-)|\bprogesterone receptor[\s-]?(positive|negative)", re.I), "PR"),
]

_PATHWAY = re.compile(r"\b([A-Za-z0-9][A-Za-z0-9/\-]*(?:\s+[A-Za-z0-9/\-]+)*?)\s+pathway\b")
_GENE_TOKEN = re.compile(r"^[A-Z][A-Z0-9-]{1,9}$")
_AMINO = re.compile(
    r"\b([A-Za-z][A-Za-z0-9-]{1,9})\s+(?:p\.)?([A-Z]\d+(?:[A-Z*]|fs\*?\d*|del|dup|ins)\w*)(?!\w)"
)
_EXON = re.compile(
    r"\b([A-Za-z][A-Za-z0-9-]{1,9})\s+exon\s+(\d+)\s*(deletion|insertion|mutation|skipping|alteration)?",
    re.IGNORECASE,
)
_CHROMOSOMAL = re.compile(
    r"\bdel\(\d{1,2}[pq]\d*\)"
    r"|\b(?:chromosome\s+\d{1,2}(?:[pq]\d*)?|\d{1,2}[pq](?:\d+(?:\.\d+)?)?)"
    r"(?:/\d{1,2}[pq]\d*)?\s*(?:deletion|loss|gain|amplification|codeletion)"
    r"|\b(?:monosomy|trisomy)\s+\d{1,2}\b",
    re.IGNORECASE,
)
_GENE_EVENT = re.compile(
    r"\b([A-Za-z][A-Za-z0-9-]{1,9})[\s-]+"
    r"(mutations?|mutant|mutated|amplifications?|amplified|deletions?|loss|"
    r"fusions?|rearrangements?|translocations?|overexpression|expression|expressing|"
    r"alterations?|altered|positive|negative|wild[\s-]?type|wildtype)\b",
    re.IGNORECASE,
)

_KIND_WORDS = [
    (re.compile(r"\bamplif", re.I), "amplification"),
    (re.compile(r"\bfusion|\brearrangement|\btranslocation", re.I), "fusion"),
    (re.compile(r"\bexpress", re.I), "expression"),
    (re.compile(r"\bdeletion|\bloss\b", re.I), "deletion"),
    (re.compile(r"\bmutat|\bmutant|\bwild[\s-]?type|\bwildtype", re.I), "mutation"),
    (re.compile(r"\balter|\bpositive\b|\bnegative\b|\bstatus\b", re.I), "status"),
]


def _kind_from_text(text: str, default: str = "mutation") -> str:
    for pattern, kind in _KIND_WORDS:
        if pattern.search(text):
            return kind
    return default


def _polarity(text: str) -> str:
    return "negative" if _NEGATIVE_CUE.search(text) else "positive"


def _resolve_gene(token: str) -> str:
    symbol = token.upper()
    return GENE_ALIASES.get(symbol, symbol)


def parse_biomarker(text: str, known_pathways: PathwayMap | None = None) -> Biomarker:
    """Classify free-text biomarker wording into a leveled Biomarker.

    Raises UnparseableBiomarker when no level pattern applies; callers keep
    such atoms opaque and match them by string equality only.
    """
    source = " ".join(text.split())
    if not source:
        raise UnparseableBiomarker("empty biomarker text")
    pathways = known_pathways or default_pathways()
    polarity = _polarity(source)

    for pattern, label in _PHENOTYPE_PATTERNS:
        if pattern.search(source):
            return Biomarker(
                gene=None, level="phenotype", detail=label,
                alteration_kind="status", polarity=polarity, source_text=text,
            )

    match = _PATHWAY.search(source)
    if match:
        name = _canonical_pathway_name(match.group(1))
        # keep only the trailing phrase that is an actual pathway name when prose precedes it
        if name not in pathways.names():
            parts = name.split()
            while parts and " ".join(parts) not in pathways.names():
                parts = parts[1:]
            if parts:
                name = " ".join(parts)
        return Biomarker(
            gene=None, level="pathway", detail=name,
            alteration_kind=_kind_from_text(source), polarity=polarity, source_text=text,
        )

    chrom = _CHROMOSOMAL.search(source)
    if chrom:
        return Biomarker(
            gene=None, level="chromosomal", detail=canonical_text(chrom.group(0)),
            alteration_kind=_kind_from_text(chrom.group(0), default="deletion"),
            polarity=polarity, source_text=text,
        )

    exon = _EXON.search(source)
    if exon and _GENE_TOKEN.match(exon.group(1)):
        qualifier = (exon.group(3) or "mutation").lower()
        kind = {
            "deletion": "deletion", "insertion": "mutation", "mutation": "mutation",
            "skipping": "mutation", "alteration": "status",
        }[qualifier]
        return Biomarker(
            gene=_resolve_gene(exon.group(1)), level="exon", detail=f"exon {exon.group(2)}",
            alteration_kind=kind, polarity=polarity, source_text=text,
        )

    amino = _AMINO.search(source)
    if amino and _GENE_TOKEN.match(amino.group(1)):
        token = amino.group(1).upper()
        if token not in pathways.names():
            return Biomarker(
                gene=_resolve_gene(amino.group(1)), level="amino_acid",
                detail=amino.group(2).upper(),
                alteration_kind=_kind_from_text(source), polarity=polarity, source_text=text,
            )

    event = _GENE_EVENT.search(source)
    if event and _GENE_TOKEN.match(event.group(1)):
        token = event.group(1).upper()
        kind = _kind_from_text(event.group(2))
        if token in pathways.names():
            return Biomarker(
                gene=None, level="pathway", detail=_canonical_pathway_name(token),
                alteration_kind=kind, polarity=polarity, source_text=text,
            )
        return Biomarker(
            gene=_resolve_gene(token), level="gene", detail="",
            alteration_kind=kind, polarity=polarity, source_text=text,
        )

    raise UnparseableBiomarker(text)


# ---------------------------------------------------------------------------
# Biomarker subsumption
# ---------------------------------------------------------------------------

def _kinds_compatible(criterion: Biomarker, patient: Biomarker) -> bool:
    if criterion.alteration_kind == "status":
        return True
    if criterion.alteration_kind == patient.alteration_kind:
        return True
    # intragenic indels count as mutations; copy-number events do not
    return (
        criterion.alteration_kind == "mutation"
        and patient.alteration_kind == "deletion"
        and patient.level in ("amino_acid", "exon")
    )


def subsumes_biomarker(
    criterion: Biomarker, patient: Biomarker, pathways: PathwayMap | None = None
) -> bool:
    """True iff the criterion covers the patient biomarker.

    The criterion's level must be equal or more abstract on the chain
    amino_acid < exon < gene < pathway; genes must line up (directly or via
    the pathway gene set); kinds must be compatible; polarity must agree.
    """
    pathways = pathways or default_pathways()
    if criterion.polarity != patient.polarity:
        return False

    if criterion.level == "phenotype" or patient.level == "phenotype":
        return (
            criterion.level == "phenotype"
            and patient.level == "phenotype"
            and canonical_text(criterion.detail) == canonical_text(patient.detail)
        )

    if criterion.level == "chromosomal" or patient.level == "chromosomal":
        return (
            criterion.level == "chromosomal"
            and patient.level == "chromosomal"
            and canonical_text(criterion.detail) == canonical_text(patient.detail)
        )

    if LEVEL_RANK[criterion.level] < LEVEL_RANK[patient.level]:
        return False
    if not _kinds_compatible(criterion, patient):
        return False

    if criterion.level == "pathway":
        if patient.level == "pathway":
            return _canonical_pathway_name(criterion.detail) == _canonical_pathway_name(patient.detail)
        gene_set = pathways.genes(criterion.detail)
        return bool(gene_set and patient.gene and patient.gene.upper() in gene_set)

    if not (criterion.gene and patient.gene) or criterion.gene.upper() != patient.gene.upper():
        return False

    if criterion.level == "gene":
        return True
    if criterion.level == "exon":
        # exon id is only checkable against exon-level patient data
        return patient.level == "amino_acid" or canonical_text(criterion.detail) == canonical_text(patient.detail)
    # amino_acid: exact variant required
    return canonical_text(criterion.detail) == canonical_text(patient.detail)


def biomarker_identity(text: str, pathways: PathwayMap | None = None) -> str:
    """Normalized comparison key for an atom; canonical text when unparseable."""
    try:
        return parse_biomarker(text, pathways).identity()
    except UnparseableBiomarker:
        return canonical_text(text)

"""Registry trial XML ingestion: parse, oncology filter, criteria preparation.

TrialDoc JSONL (one object per line, UTF-8, field names as in the dataclass)
is the pipeline interchange format between `ingest` and `structure`.
"""

from __future__ import annotations

import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources

from .errors import MalformedXml, MissingIdentifier

DEFAULT_MAX_LINES = 40

_NCT_ID = re.compile(r"^NCT\d{8}$")


def _default_config() -> dict:
    text = resources.files("trialmatch.data").joinpath("ingest_defaults.json").read_text("utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class ArmGroup:
    label: str = ""
    type: str = ""
    description: str = ""


@dataclass(frozen=True)
class TrialDoc:
    """Raw fields extracted from one registry trial XML document.

    criteria_text preserves the original line breaks; line-based truncation
    depends on them.
    """

    nct_id: str
    brief_title: str = ""
    official_title: str = ""
    brief_summary: str = ""
    primary_purpose: str = ""
    study_type: str = ""
    conditions: tuple[str, ...] = ()
    arm_groups: tuple[ArmGroup, ...] = ()
    criteria_text: str = ""

    def to_json_dict(self) -> dict:
        return {
            "nct_id": self.nct_id,
            "brief_title": self.brief_title,
            "official_title": self.official_title,
            "brief_summary": self.brief_summary,
            "primary_purpose": self.primary_purpose,
            "study_type": self.study_type,
            "conditions": list(self.conditions),
            "arm_groups": [
                {"label": a.label, "type": a.type, "description": a.description}
                for a in self.arm_groups
            ],
            "criteria_text": self.criteria_text,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrialDoc":
        return cls(
            nct_id=doc["nct_id"],
            brief_title=doc.get("brief_title", ""),
            official_title=doc.get("official_title", ""),
            brief_summary=doc.get("brief_summary", ""),
            primary_purpose=doc.get("primary_purpose", ""),
            study_type=doc.get("study_type", ""),
            conditions=tuple(doc.get("conditions", ())),
            arm_groups=tuple(
                ArmGroup(a.get("label", ""), a.get("type", ""), a.get("description", ""))
                for a in doc.get("arm_groups", ())
            ),
            criteria_text=doc.get("criteria_text", ""),
        )


@dataclass
class IngestFilter:
    """Oncology treatment-trial filter; keywords are matched case-insensitively."""

    primary_purpose: str = "Treatment"
    study_type: str = "Interventional"
    disease_keywords: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.disease_keywords:
            self.disease_keywords = list(_default_config()["disease_keywords"])
        self.disease_keywords = [k.lower() for k in self.disease_keywords]

    @classmethod
    def from_config(cls, doc: dict) -> "IngestFilter":
        return cls(
            primary_purpose=doc.get("primary_purpose", "Treatment"),
            study_type=doc.get("study_type", "Interventional"),
            disease_keywords=list(doc.get("disease_keywords", ())),
        )


def _findtext(root: ET.Element, path: str) -> str:
    value = root.findtext(path)
    return value.strip() if value else ""


def parse_trial_xml(xml_bytes: bytes) -> TrialDoc:
    """Parse one registry XML document into a TrialDoc.

    Missing optional elements become empty strings/lists. Raises
    MalformedXml for unparseable input or a non-trial root, and
    MissingIdentifier when no well-formed nct_id is present.
    """
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != "clinical_study":
        raise MalformedXml(f"expected clinical_study root, got {root.tag!r}")

    nct_id = _findtext(root, "id_info/nct_id") or _findtext(root, "nct_id")
    if not _NCT_ID.match(nct_id):
        raise MissingIdentifier(f"missing or malformed nct_id: {nct_id!r}")

    arm_groups = tuple(
        ArmGroup(
            label=_findtext(ag, "arm_group_label"),
            type=_findtext(ag, "arm_group_type"),
            description=_findtext(ag, "description"),
        )
        for ag in root.findall("arm_group")
    )
    # criteria keeps raw line structure; only outer blank padding is trimmed
    criteria = root.findtext("eligibility/criteria/textblock") or ""

    return TrialDoc(
        nct_id=nct_id,
        brief_title=_findtext(root, "brief_title"),
        official_title=_findtext(root, "official_title"),
        brief_summary=_findtext(root, "brief_summary/textblock"),
        primary_purpose=_findtext(root, "study_design_info/primary_purpose"),
        study_type=_findtext(root, "study_type"),
        conditions=tuple(c.text.strip() for c in root.findall("condition") if c.text),
        arm_groups=arm_groups,
        criteria_text=criteria.strip("\n").rstrip(),
    )


def is_oncology_treatment_trial(doc: TrialDoc, filt: IngestFilter) -> bool:
    """True iff purpose/type match the filter and a disease keyword occurs anywhere.

    Keywords are searched case-insensitively across titles, summary,
    conditions, and criteria text.
    """
    if filt.primary_purpose and doc.primary_purpose.strip().lower() != filt.primary_purpose.lower():
        return False
    if filt.study_type and doc.study_type.strip().lower() != filt.study_type.lower():
        return False
    blob = " ".join(
        (
            doc.brief_title,
            doc.official_title,
            doc.brief_summary,
            doc.criteria_text,
            *doc.conditions,
        )
    ).lower()
    return any(kw in blob for kw in filt.disease_keywords)


def default_drop_patterns() -> list[re.Pattern]:
    return [re.compile(p, re.IGNORECASE) for p in _default_config()["drop_line_patterns"]]


def prepare_criteria_text(
    doc: TrialDoc,
    max_lines: int = DEFAULT_MAX_LINES,
    drop_patterns: list[re.Pattern] | None = None,
) -> str:
    """First `max_lines` criteria lines after dropping known-irrelevant ones.

    Lines hitting any drop pattern (consent, pregnancy, organ-function
    boilerplate, ...) are removed before truncation, so relevant lines
    displaced past the budget by boilerplate are retained. Original line
    order is preserved.
    """
    if max_lines < 1:
        raise ValueError("max_lines must be >= 1")
    if not doc.criteria_text:
        return ""
    patterns = default_drop_patterns() if drop_patterns is None else drop_patterns
    kept = [
        line
        for line in doc.criteria_text.splitlines()
        if not any(p.search(line) for p in patterns)
    ]
    return "\n".join(kept[:max_lines])


def with_prepared_criteria(
    doc: TrialDoc,
    max_lines: int = DEFAULT_MAX_LINES,
    drop_patterns: list[re.Pattern] | None = None,
) -> TrialDoc:
    """Copy of the doc with criteria_text replaced by its prepared form."""
    import dataclasses

    return dataclasses.replace(
        doc, criteria_text=prepare_criteria_text(doc, max_lines, drop_patterns)
    )


def load_trial_docs(path) -> list[TrialDoc]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                docs.append(TrialDoc.from_json_dict(json.loads(line)))
    return docs


def write_trial_docs(path, docs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_json_dict(), ensure_ascii=False) + "\n")

"""Exception types shared across the pipeline."""


class TrialMatchError(Exception):
    """Base class for all pipeline errors."""


# -- trial ingest ------------------------------------------------------------

class MalformedXml(TrialMatchError):
    """Input is not parseable XML or lacks a clinical-study root."""


class MissingIdentifier(TrialMatchError):
    """Trial XML has no nct_id element."""


# -- criteria logic ----------------------------------------------------------

class ExpansionLimitExceeded(TrialMatchError):
    """DNF distribution would exceed the configured conjunction cap."""


class NoJsonFound(TrialMatchError):
    """No JSON array could be located in an extractor response."""


class SchemaViolation(TrialMatchError):
    """Extractor JSON array contained a non-object element."""


# -- llm gateway -------------------------------------------------------------

class ContextOverflow(TrialMatchError):
    """Estimated prompt tokens plus output budget exceed the context limit."""


class TransportError(TrialMatchError):
    """Network or HTTP failure that survived the retry policy."""


class AuthError(TrialMatchError):
    """Credentials rejected by the completion endpoint."""


class ReplayMiss(TransportError):
    """Replay transcript has no entry for the requested prompt."""


# -- extraction --------------------------------------------------------------

class EmptyExtraction(TrialMatchError):
    """No valid clause survived extraction for a trial."""


class LexiconMissing(TrialMatchError):
    """Baseline extraction invoked without a loaded lexicon."""


# -- ontology ----------------------------------------------------------------

class OntologyError(TrialMatchError):
    """Base class for hierarchy-load failures."""


class CycleDetected(OntologyError):
    """Parent chain loops back on itself."""


class DuplicateCode(OntologyError):
    """Hierarchy file defines the same code twice."""


class UnknownParent(OntologyError):
    """Node references a parent code that is not defined."""


class UnknownCode(OntologyError):
    """Subsumption query used a code absent from the loaded hierarchy."""


class UnparseableBiomarker(TrialMatchError):
    """Biomarker text did not match any recognized level pattern."""


# -- evaluation --------------------------------------------------------------

class MissingGold(TrialMatchError):
    """Predictions reference a trial id absent from the gold set."""

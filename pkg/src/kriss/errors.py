"""Exception hierarchy shared across the toolkit.

Three branches map onto CLI exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class KrissError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(KrissError):
    """Bad configuration or usage: unknown keys, invalid values, bad formats."""


class DataError(KrissError):
    """Malformed or inconsistent input data."""


class NumericError(KrissError):
    """Numeric failure: non-finite values where finite ones are required."""


# -- catalog / ontology -------------------------------------------------------

class CatalogError(DataError):
    """Catalog record failed validation (parse, duplicate id, missing field)."""


class UnknownEntityError(DataError):
    """An entity id was referenced that is not present in the catalog."""


# -- mention generation -------------------------------------------------------

class EmptySurfaceError(DataError):
    """A matcher pattern was the empty string."""


class InvalidSpanError(DataError):
    """A character span does not fit inside its document."""


# -- encoding -----------------------------------------------------------------

class MentionTooLongError(DataError):
    """The untrimmable [CLS] .. [SEP] skeleton exceeds the sequence cap."""


class SkeletonsTooLongError(DataError):
    """Joint query+candidate skeletons exceed the sequence cap."""


class SequenceTooLongError(DataError):
    """A token sequence exceeds the encoder's max_len."""


# -- training -----------------------------------------------------------------

class InsufficientEntitiesError(DataError):
    """Fewer eligible entities than the minibatch requires."""


class NonFiniteGradientError(NumericError):
    """A gradient tensor contained NaN or Inf; the update step was aborted."""

    def __init__(self, parameter_name: str):
        self.parameter_name = parameter_name
        super().__init__(f"non-finite gradient in parameter block '{parameter_name}'")


class NoTrainableExamplesError(DataError):
    """Every re-ranker training example was skipped (gold never retrieved)."""


# -- linking ------------------------------------------------------------------

class DimMismatchError(DataError):
    """Stored vector width disagrees with the encoder width."""


class EmptyIndexError(DataError):
    """A query was issued against an index with nothing to score."""


class MissingReferenceError(DataError):
    """Reference fusion was requested but no reference vectors are stored."""


# -- evaluation ---------------------------------------------------------------

class AlignmentError(DataError):
    """Predictions and gold mentions differ in count."""


class InsufficientCandidatesError(DataError):
    """A prediction carries fewer candidates than the largest requested K."""


# -- pipeline -----------------------------------------------------------------

class MissingDependencyError(DataError):
    """A pipeline stage needs an artifact that neither exists nor is scheduled."""

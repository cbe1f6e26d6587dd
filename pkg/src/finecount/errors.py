"""Exception hierarchy shared across the pipeline stages."""


class FinecountError(Exception):
    """Base class for all library errors."""


class InvalidSpecError(FinecountError):
    """A category spec violates its invariants (empty name, bad negatives, ...)."""


class InsufficientNegativesError(FinecountError):
    """The suggester produced fewer distinct valid negatives than requested.

    Carries whatever was obtained so callers can retry or relax.
    """

    def __init__(self, requested: int, obtained: list):
        self.requested = requested
        self.obtained = obtained
        super().__init__(
            f"requested {requested} negative categories, got {len(obtained)}: {obtained}"
        )


class SuggesterTransportError(FinecountError):
    """The external suggestion service failed at the transport level. Retriable."""


class BackendError(FinecountError):
    """A backend (generator, segmenter, counter) failed for one request."""


class CapabilityError(BackendError):
    """A backend lacks a capability the caller requires (e.g. gradients)."""


class SynthesisError(FinecountError):
    """Dataset synthesis aborted, e.g. too many per-image backend failures."""


class TuningError(FinecountError):
    """Concept tuning cannot proceed or produced non-finite values."""


class FrozenBackendError(TuningError):
    """Segmenter parameters changed during tuning; the backend must stay frozen."""


class DatasetError(FinecountError):
    """Annotated dataset could not be loaded under the requested strictness."""


class MetricError(FinecountError):
    """Metric computation hit an undefined case (e.g. relative error with y=0)."""


class MissingEmbeddingError(FinecountError):
    """No tuned concept embedding exists for a requested subcategory."""

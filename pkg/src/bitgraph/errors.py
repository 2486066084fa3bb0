"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 2,
FormatError (and subclasses) -> 3, PipelineError -> 4.
"""


class BitgraphError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(BitgraphError):
    """Invalid parameters or an invalid combination of options."""


class FormatError(BitgraphError):
    """Malformed, truncated, or mismatched on-disk artifact."""


class ManifestError(FormatError):
    """Missing or inconsistent entry in an index manifest."""


class IndexDataError(FormatError):
    """Loaded index artifacts are mutually inconsistent (e.g. a graph

    references a label with no stored code or real vector)."""


class PipelineError(BitgraphError):
    """A map/shuffle/reduce stage violated its contract at runtime."""

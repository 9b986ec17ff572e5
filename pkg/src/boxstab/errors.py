"""Exception types shared across the toolkit."""


class BoxStabError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(BoxStabError, ValueError):
    """A value violates a documented invariant.

    Carries the offending field name and, when raised during dump parsing,
    the 1-based line number.
    """

    def __init__(self, message, *, field=None, line=None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"field '{field}': "
        super().__init__(prefix + message)


class DumpParseError(BoxStabError, ValueError):
    """A dump line could not be decoded at all. Carries the 1-based line number."""

    def __init__(self, message, *, line):
        self.line = line
        super().__init__(f"line {line}: {message}")


class MatchingError(BoxStabError, ValueError):
    """Bipartite matching was asked to run on an unusable input."""


class ScoreUndefinedError(BoxStabError, ValueError):
    """A dataset-level measurement is undefined on the given set."""


class RegressionError(BoxStabError, ValueError):
    """The regression problem is ill-posed (too few samples, rank deficiency)."""


class SearchError(BoxStabError, RuntimeError):
    """Perturbation-config search could not score any candidate."""

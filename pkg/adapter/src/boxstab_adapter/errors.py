class AdapterError(Exception):
    """Raised when the adapter cannot proceed: bad runtime, bad config, bad input."""

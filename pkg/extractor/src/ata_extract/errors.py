class ExtractError(ValueError):
    """Any extraction failure the caller can act on (bad input, bad model)."""

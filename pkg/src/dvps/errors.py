class FormatError(ValueError):
    """A file does not follow its declared on-disk layout."""


class IntegrityError(ValueError):
    """Data parsed fine but violates a cross-field invariant."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key or value."""

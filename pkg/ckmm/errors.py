"""
Base exception shared by every ckmm module.
"""


class CkmmError(Exception):
    """Base class for ckmm failures; ``code`` is reported by the CLI."""

    code = "CKMM_ERROR"

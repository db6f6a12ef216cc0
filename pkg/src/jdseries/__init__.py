"""Series expansions of expectations for jump-diffusions."""

__version__ = "0.1.0"

"""Event-level logging for clinical AI: record model, collector, spool, drift."""

__version__ = "0.1.0"

from .model import SPEC_VERSION  # noqa: F401

"""Trace and class-probability producers for the wqe lab."""

from .schema import (
    SCHEMA_VERSION,
    ClassProbs,
    ModelMeta,
    SummaryTrace,
    Token,
    read_summary_traces,
    write_class_probs,
    write_summary_traces,
)

__all__ = [
    "SCHEMA_VERSION",
    "ClassProbs",
    "ModelMeta",
    "SummaryTrace",
    "Token",
    "read_summary_traces",
    "write_class_probs",
    "write_summary_traces",
]

"""Causal effect estimation for multiple treatments with rare binary outcomes."""

__version__ = "0.1.0"

from .core import (
    CATEGORICAL,
    CONTINUOUS,
    RD,
    RR,
    CausalEstimate,
    ColumnSchema,
    Dataset,
    DataValidationError,
    GpsMatrix,
    SchemaError,
    design_matrix,
    group_sizes,
    load_dataset,
    save_dataset,
)

__all__ = [
    "CATEGORICAL",
    "CONTINUOUS",
    "RD",
    "RR",
    "CausalEstimate",
    "ColumnSchema",
    "Dataset",
    "DataValidationError",
    "GpsMatrix",
    "SchemaError",
    "design_matrix",
    "group_sizes",
    "load_dataset",
    "save_dataset",
    "__version__",
]

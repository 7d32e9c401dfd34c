"""In-database style MICE imputation on cofactor-ring aggregates."""

from .errors import DataError, NumericError, RingMiceError, UsageError
from .ring import AttrSpace, Relation, Triple, aggregate, lift, to_dense
from .dataset import Column, Schema, Table, load_csv, write_csv
from .models import GdConfig, train_lda, train_ridge
from .mice import MiceConfig, run

__all__ = [
    "AttrSpace", "Column", "DataError", "GdConfig", "MiceConfig", "NumericError", "Relation",
    "RingMiceError", "Schema", "Table", "Triple", "UsageError", "aggregate", "lift",
    "load_csv", "run", "to_dense", "train_lda", "train_ridge", "write_csv",
]
__version__ = "0.1.0"

"""Figure rendering for rough-boundary FEM experiment CSVs."""

from .plot import PlotJob, SchemaError, render, read_csv, fit_slope

__version__ = "0.1.0"

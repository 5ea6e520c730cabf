"""Cluster-correlation-expansion simulation of NV-center Hahn-echo decoherence in electron spin baths."""

from .bath import SpinBathConfiguration, generate_configuration
from .clusters import ClusterSet, build_cluster_set
from .engine import CoherenceCurve, exact_coherence, gcce_coherence
from .ensemble import EnsembleReport, bootstrap_subsample, ensemble_average
from .fitting import FitError, FitResult, fit_curve
from .model import CentralSpin, ExternalField

__version__ = "0.1.0"

__all__ = [
    "CentralSpin",
    "ClusterSet",
    "CoherenceCurve",
    "EnsembleReport",
    "ExternalField",
    "FitError",
    "FitResult",
    "SpinBathConfiguration",
    "bootstrap_subsample",
    "build_cluster_set",
    "ensemble_average",
    "exact_coherence",
    "fit_curve",
    "gcce_coherence",
    "generate_configuration",
]

"""Foreground-aware few-shot evaluation over crop-embedding stores.

Subpackages by stage: :mod:`cosoc.crops` (crop geometry), :mod:`cosoc.features`
(vector ops and the feature store), :mod:`cosoc.cos` (clustering-based
foreground scoring and fusion sampling), :mod:`cosoc.soc` (shared-object
prototypes and weighted matching), :mod:`cosoc.fsl` (episodic benchmark
harness), :mod:`cosoc.synth` (synthetic shortcut worlds), :mod:`cosoc.cli`.
"""

__version__ = "0.1.0"

from . import errors
from .crops import CropPlan, CropRect, enforce_min_area, sample_crops, snf_ratio
from .features import (
    FeatureStore,
    cosine_sim,
    l2_normalize,
    load_store,
    pairwise_cos,
    save_store,
)

__all__ = [
    "__version__",
    "errors",
    "CropPlan",
    "CropRect",
    "enforce_min_area",
    "sample_crops",
    "snf_ratio",
    "FeatureStore",
    "cosine_sim",
    "l2_normalize",
    "load_store",
    "pairwise_cos",
    "save_store",
]

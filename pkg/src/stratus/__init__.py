"""Post-processing of multi-model precipitation forecasts into calibrated
exceedance probabilities.

Submodules follow the processing chain: ``gridcore`` (rasters, regridding,
synthetic scenarios), ``features``, ``experiment`` (labels and splits),
``linear``, ``forest``, ``nn`` (from-scratch encoder-decoder), ``verify``
(Brier scores, isotonic calibration) and ``ablation``.
"""

__version__ = "0.1.0"

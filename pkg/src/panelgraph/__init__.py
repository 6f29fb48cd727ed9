"""Similarity-graph GraphSAGE forecasting for multi-state weekly signal panels.

Submodules: ``autodiff`` (tape-based reverse mode), ``signals`` (panels,
normalization, windows, synthetic data), ``similarity`` (DTW, shapelets,
lagged correlation), ``graphbuild`` (top-k, random and full graphs, block
adjacency), ``models`` (baselines, AR, GraphSAGE), ``evaluate``
(rolling-origin backtests and tables), ``explain`` (counterfactual edge
masks) and ``cli``.
"""

__version__ = "0.1.0"

from . import autodiff, evaluate, explain, graphbuild, models, signals, similarity  # noqa: E402,F401

"""Crack classification toolkit for EL images of photovoltaic cells.

Submodules: dataset (loading, variants, folds, preprocessing), nn (tensor
kernels), arch (block-built model specs and search), trainer, quant
(post-training quantization), engine (blob format and integer inference),
evalkit (metrics and budget gating), cli, synthetic (demo data).
"""

__version__ = "0.1.0"

__all__ = [
    "arch", "cli", "dataset", "engine", "evalkit", "nn", "quant",
    "synthetic", "trainer",
]

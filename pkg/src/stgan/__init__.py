"""Spatiotemporal GAN anomaly detection for urban traffic camera flows.

The package is organized around the pipeline: build a camera graph
(stgan.graph), prepare flow tensors (stgan.preprocess), train the
adversarial model (stgan.model, stgan.train), score and label anomalies
(stgan.scoring), and generate labeled synthetic data (stgan.simulate).
The stgan console script drives the same stages end to end.

Submodules import lazily so the CLI can pin BLAS threading before numpy
loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "cli",
    "errors",
    "graph",
    "model",
    "numeric",
    "preprocess",
    "scoring",
    "simulate",
    "train",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))

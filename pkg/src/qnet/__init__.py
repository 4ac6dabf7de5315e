"""CNN inference engine, post-training quantizer, transfer-learning trainer and benchmark harness."""
from .builders import build, init_weights
from .container import Model, load, save
from .errors import QnetError
from .graph import Graph, LayerSpec, forward, stats

__version__ = "0.1.0"

__all__ = ["Graph", "LayerSpec", "Model", "QnetError", "build", "forward", "init_weights",
           "load", "save", "stats", "__version__"]

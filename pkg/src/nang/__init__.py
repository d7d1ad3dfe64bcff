"""Node attribute generation on graphs with partially observed attributes."""

from .autograd import Tensor, make_rng
from .errors import NangError
from .graph import AttributeMatrix, DatasetBundle, Graph, NodeSplit, load_dataset, synth_dataset
from .model import NangModel, TrainConfig, generate_attributes, train_nang

__all__ = [
    "AttributeMatrix", "DatasetBundle", "Graph", "NangError", "NangModel", "NodeSplit", "Tensor",
    "TrainConfig", "generate_attributes", "load_dataset", "make_rng", "synth_dataset", "train_nang",
]
__version__ = "0.1.0"

"""halobit: simulated distributed full-graph GNN training with one-bit
quantized halo communication, asynchronous pipelining, and a bounded
staleness adaptor."""

__version__ = "0.1.0"

from .codec import QuantConfig, QuantizedBlock, dequantize_rows, quantize_rows
from .datasets import SbmSpec, generate_sbm, load_dataset, save_dataset
from .graph import Graph, Partition, PartitionPlan, build_partition, \
    mean_adjacency, normalize_adjacency, partition_nodes
from .trainer import MetricsRecord, ModelConfig, TrainMode, TrainResult, \
    evaluate, staleness_adaptor, train

__all__ = [
    "QuantConfig", "QuantizedBlock", "quantize_rows", "dequantize_rows",
    "SbmSpec", "generate_sbm", "load_dataset", "save_dataset",
    "Graph", "Partition", "PartitionPlan", "build_partition",
    "normalize_adjacency", "mean_adjacency", "partition_nodes",
    "MetricsRecord", "ModelConfig", "TrainMode", "TrainResult",
    "evaluate", "staleness_adaptor", "train",
]

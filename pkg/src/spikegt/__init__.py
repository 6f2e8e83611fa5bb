"""Dual-branch graph transformer with linear-time spiking attention.

The encoder computes all-pair node interactions with binary spikes,
additions, and channel masks in time linear in the node count; a sparse
GCN branch contributes local structure, and the two are fused by a
convex graph weight.
"""

from ._kernels import backend_name
from .data import GraphDataset, knn_graph, load_dataset, random_split, save_dataset, synth_graph
from .gnn import CsrGraph, GcnLayer, gcn_forward, normalize_adjacency, spmm
from .model import (
    EncoderBlock,
    SpikeGraphTransformer,
    classify,
    encode,
    forward,
    fuse,
    load_checkpoint,
    save_checkpoint,
    streaming_logits,
)
from .neuron import LifParams, lif_backward, lif_forward, repeat_time
from .sga import AttnCounters, SgaLayer, sga_attend, sga_backward, sga_forward, sga_qkv
from .tensor import (
    BatchNormLayer,
    DenseTensor,
    LinearLayer,
    SpikeTensor,
    batchnorm_forward,
    colwise_sum,
    elementwise,
    matmul,
    spike_linear,
)
from .train import TrainConfig, adam_step, evaluate, loss_and_grad, train_full, train_minibatch

__version__ = "0.1.0"

__all__ = [
    "AttnCounters",
    "BatchNormLayer",
    "CsrGraph",
    "DenseTensor",
    "EncoderBlock",
    "GcnLayer",
    "GraphDataset",
    "LifParams",
    "LinearLayer",
    "SgaLayer",
    "SpikeGraphTransformer",
    "SpikeTensor",
    "TrainConfig",
    "adam_step",
    "backend_name",
    "batchnorm_forward",
    "classify",
    "colwise_sum",
    "elementwise",
    "encode",
    "evaluate",
    "forward",
    "fuse",
    "gcn_forward",
    "knn_graph",
    "lif_backward",
    "lif_forward",
    "load_checkpoint",
    "load_dataset",
    "loss_and_grad",
    "matmul",
    "normalize_adjacency",
    "random_split",
    "repeat_time",
    "save_checkpoint",
    "save_dataset",
    "sga_attend",
    "sga_backward",
    "sga_forward",
    "sga_qkv",
    "spike_linear",
    "spmm",
    "streaming_logits",
    "synth_graph",
    "train_full",
    "train_minibatch",
]

"""Chebyshev graph-convolution mesh decoder, QEM mesh hierarchies and evaluation tools."""

from .evaluation import CEDCurve, RigidTransform, bbox_size, ced, icp_align, interocular_distance, nme
from .gcn import (
    ChebConvParams,
    InstanceNormParams,
    ResGCNBlockParams,
    cheb_conv_backward,
    cheb_conv_forward,
    instance_norm_backward,
    instance_norm_forward,
    leaky_relu,
    leaky_relu_backward,
    resgcn_block_backward,
    resgcn_block_forward,
)
from .mesh import (
    Mesh,
    adjacency,
    load_mesh,
    max_eigenvalue,
    normalized_laplacian,
    save_mesh,
    scaled_laplacian,
    spmm,
    unnormalized_laplacian,
)
from .model import DecoderConfig, DecoderParams, decoder_backward, decoder_forward, init_decoder
from .sampling import MeshHierarchy, boundary_edges, build_hierarchy, decimate, upsampling_matrix
from .train import TrainConfig, generate_synthetic, l1_loss, smooth_loss, total_loss, train

__version__ = "0.1.0"

"""drnet: dense-resolution point cloud network in plain numpy.

A small, dependency-light library for point cloud classification and part
segmentation. Local neighborhoods are grouped with a learned per-point
dilation factor, local features are regularized by an error-minimizing
back-projection loss, and a full-resolution branch is fused with a
multi-resolution branch through a channel-wise sigmoid gate. All forward and
backward passes are written out explicitly and validated against a central
finite-difference oracle.
"""

from drnet import data, geometry, grouping, layers, network, numerics, trainer

__all__ = ["data", "geometry", "grouping", "layers", "network", "numerics", "trainer"]
__version__ = "0.1.0"

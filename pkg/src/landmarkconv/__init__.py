"""Region-based, direction-aware convolution on linear-time running-max
scans, plus point-based baselines, a synthetic grounding harness, and a
scaling benchmark."""

from . import bench, checkpoint, convnets, landmark, net, synthground, tensor

__all__ = ["bench", "checkpoint", "convnets", "landmark", "net",
           "synthground", "tensor"]
__version__ = "0.1.0"

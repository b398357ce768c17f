"""Deterministic desk-scale simulator for federated multi-task learning.

Modules: numkernel (parameters, optimizer, schedule, RNG), synthdata
(two-domain synthetic tasks and partitioning scenarios), models (MD/TC
architectures with analytic gradients), mtlopt (gradient surgery and
combination), fedcore (round engine and strategies), evalstat (metrics and
comparison statistics), cli (command-line front door).
"""

__version__ = "0.1.0"

from .numkernel import (AdamWState, Layout, LayoutMismatch, RngStream,
                        SegmentedParams, adamw_step, cosine_warmup_lr,
                        derive_stream, load_checkpoint, save_checkpoint,
                        weighted_sum)

__all__ = [
    "AdamWState", "Layout", "LayoutMismatch", "RngStream", "SegmentedParams",
    "adamw_step", "cosine_warmup_lr", "derive_stream", "load_checkpoint",
    "save_checkpoint", "weighted_sum", "__version__",
]

"""Toy-scale fusion blocks with analytic gradients, checked by finite differences."""

from .blocks import (
    cmcm_forward,
    decode,
    dem,
    guide_features,
    loss_terms,
    loss_total,
    sccm_forward,
    sccm_shared,
    sge,
    tpsam_forward,
)
from .model import GRAD_BLOCKS, ToyConfig, grad_check, init_weights, toy_forward
from .scan import ScanParams, es2d, lssm, scan_blocked, scan_naive, selective_scan_1d

__all__ = [
    "GRAD_BLOCKS",
    "ScanParams",
    "ToyConfig",
    "cmcm_forward",
    "decode",
    "dem",
    "es2d",
    "grad_check",
    "guide_features",
    "init_weights",
    "loss_terms",
    "loss_total",
    "lssm",
    "scan_blocked",
    "scan_naive",
    "sccm_forward",
    "sccm_shared",
    "selective_scan_1d",
    "sge",
    "tpsam_forward",
]

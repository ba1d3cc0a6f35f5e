"""Deterministic diffusion for imaging from nonlocal optical patterns."""

from ddm.diffusion import DDMRestorer
from ddm.dpm import DPMRestorer
from ddm.optics import IdentityOperator, SHGOperator, ScatteringOperator
from ddm.schedule import Schedule, alpha_cosine, degrade
from ddm.tensor import RngStream

__all__ = [
    "DDMRestorer",
    "DPMRestorer",
    "IdentityOperator",
    "RngStream",
    "SHGOperator",
    "ScatteringOperator",
    "Schedule",
    "alpha_cosine",
    "degrade",
]

__version__ = "0.1.0"

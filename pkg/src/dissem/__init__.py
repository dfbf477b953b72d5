"""Wireless dissemination on quasi-metric path-loss spaces with carrier sensing."""

from __future__ import annotations

import logging

from .engine import SensingParams, SimulationConfig, SimulationTrace, run
from .errors import DissemError
from .metric import Instance, PathLossMap, QuasiMetricSpace, RadiusSet, compute_metricity
from .models import ReceptionModelConfig
from .protocols import ProtocolConfig

__all__ = [
    "DissemError",
    "Instance",
    "PathLossMap",
    "ProtocolConfig",
    "QuasiMetricSpace",
    "RadiusSet",
    "ReceptionModelConfig",
    "SensingParams",
    "SimulationConfig",
    "SimulationTrace",
    "compute_metricity",
    "run",
]

logging.getLogger(__name__).addHandler(logging.NullHandler())

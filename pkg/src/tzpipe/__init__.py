"""Simulation and protocol models for confidential on-device LLM inference."""
from .hardware import HardwareModel

__all__ = ["HardwareModel"]
__version__ = "0.1.0"

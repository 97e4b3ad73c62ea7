"""Simulator for hybrid NPU/CPU sparse LLM inference with weights streamed from UFS flash."""

__version__ = "0.1.0"

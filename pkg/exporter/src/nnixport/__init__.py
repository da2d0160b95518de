"""Torch-to-NNIX exporter: conversion, BatchNorm folding, attention
decomposition, and round-trip forward-parity verification."""

from .archs import ARCH_NAMES, load_arch, load_weights
from .blocks import TransformerBlockNet
from .convert import ConvertedModel, convert_module
from .errors import ArchError, ExportError, ParityError, UnsupportedLayerError
from .export import PARITY_TOLERANCE, ExportReport, export, report_path_for

__version__ = "0.1.0"

__all__ = [
    "ARCH_NAMES",
    "ArchError",
    "ConvertedModel",
    "ExportError",
    "ExportReport",
    "PARITY_TOLERANCE",
    "ParityError",
    "TransformerBlockNet",
    "UnsupportedLayerError",
    "convert_module",
    "export",
    "load_arch",
    "load_weights",
    "report_path_for",
]

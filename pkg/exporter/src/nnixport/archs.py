"""Named demo architectures and build-script loading.

An architecture reference is either a registry name or a path to a Python
script defining ``build() -> (torch.nn.Module, input_shape)``.  The
registry covers the desk-scale shapes used throughout the pruning library:
a small MLP, a two-block CNN (with a BatchNorm variant to exercise
folding), and a single-attention-block patch classifier.
"""

import importlib.util
from pathlib import Path

import torch
from torch import nn

from .blocks import TransformerBlockNet
from .errors import ArchError


def _mlp():
    return (
        nn.Sequential(
            nn.Linear(16, 32), nn.ReLU(),
            nn.Linear(32, 32), nn.ReLU(),
            nn.Linear(32, 4),
        ),
        (16,),
    )


def _cnn():
    return (
        nn.Sequential(
            nn.Conv2d(1, 8, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(16 * 2 * 2, 10),
        ),
        (1, 8, 8),
    )


def _cnn_bn():
    return (
        nn.Sequential(
            nn.Conv2d(1, 8, 3, padding=1), nn.BatchNorm2d(8), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(16 * 2 * 2, 10),
        ),
        (1, 8, 8),
    )


def _vit_block():
    module = TransformerBlockNet(tokens=8, patch_dim=16, dim=32, heads=4, mlp_dim=64, num_classes=4)
    return module, (8, 16)


_REGISTRY = {
    "mlp": _mlp,
    "cnn": _cnn,
    "cnn-bn": _cnn_bn,
    "vit-block": _vit_block,
}

ARCH_NAMES = tuple(sorted(_REGISTRY))


def load_arch(reference: str):
    """Resolve a registry name or build script to (module, input_shape)."""
    if reference in _REGISTRY:
        return _REGISTRY[reference]()
    path = Path(reference)
    if path.suffix == ".py":
        if not path.is_file():
            raise FileNotFoundError(f"build script not found: {path}")
        spec = importlib.util.spec_from_file_location(path.stem, path)
        script = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(script)
        build = getattr(script, "build", None)
        if build is None:
            raise ArchError(f"build script {path} defines no build() function")
        result = build()
        if not (isinstance(result, tuple) and len(result) == 2 and isinstance(result[0], nn.Module)):
            raise ArchError(f"build() in {path} must return (torch module, input_shape)")
        module, input_shape = result
        return module, tuple(input_shape)
    raise ArchError(
        f"unknown architecture {reference!r}; choose from {ARCH_NAMES} or pass a .py build script"
    )


def load_weights(module: nn.Module, weights_path) -> nn.Module:
    """Load a state-dict checkpoint (strict) into the built module."""
    weights_path = Path(weights_path)
    if not weights_path.is_file():
        raise FileNotFoundError(f"weights file not found: {weights_path}")
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    try:
        module.load_state_dict(state)
    except RuntimeError as err:
        raise ArchError(f"weights do not match the architecture: {err}") from err
    return module

"""Export with round-trip forward-parity verification.

``export`` converts the torch model, writes the interchange file, reloads
it, and compares logits between the torch runtime and the interchange
runtime on seeded random probe inputs.  The file only survives if the
maximum absolute deviation stays within tolerance; the report records the
layer mapping, the deviation, and a timestamp (the single non-deterministic
field, so repeated exports are byte-identical apart from it).
"""

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from relprune import forward_logits, load_model_file, save_model_file

from .convert import convert_module
from .errors import ParityError

PARITY_TOLERANCE = 1e-4
PROBE_SEED = 0


@dataclass
class ExportReport:
    """Outcome of one export: mapping table, parity, and provenance."""

    arch: str
    out: str
    probes: int
    max_deviation: float
    layer_mapping: list[dict]
    unsupported: list[str] = field(default_factory=list)
    timestamp: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())


def report_path_for(model_path) -> Path:
    """Report file written next to the model: <model>.report.json."""
    model_path = Path(model_path)
    return model_path.with_suffix(model_path.suffix + ".report.json")


def _probe_inputs(input_shape, n: int) -> np.ndarray:
    rng = np.random.default_rng(PROBE_SEED)
    return rng.standard_normal((n,) + tuple(input_shape)).astype(np.float32)


def export(
    module: torch.nn.Module,
    out_path,
    probes: int = 16,
    *,
    input_shape=None,
    arch: str = "",
    tolerance: float = PARITY_TOLERANCE,
) -> ExportReport:
    """Convert, write, and verify one model; returns the report.

    Raises :class:`UnsupportedLayerError` when the model leaves the closed
    layer set and :class:`ParityError` (removing the written file) when the
    reloaded graph disagrees with the torch forward pass beyond
    ``tolerance`` on ``probes`` seeded random inputs.
    """
    module = module.eval()
    converted = convert_module(module, input_shape=input_shape)
    graph = converted.graph

    out_path = Path(out_path)
    save_model_file(graph, out_path)
    reloaded = load_model_file(out_path)

    batch = _probe_inputs(graph.input_shape, probes)
    with torch.no_grad():
        torch_logits = module(torch.from_numpy(batch)).numpy()
    nnix_logits = forward_logits(reloaded, batch)
    deviation = float(np.abs(torch_logits - nnix_logits).max())

    if deviation > tolerance:
        out_path.unlink(missing_ok=True)
        raise ParityError(
            f"forward parity {deviation:.3e} exceeds {tolerance:.1e} "
            f"over {probes} probe inputs"
        )

    report = ExportReport(
        arch=arch,
        out=out_path.name,
        probes=probes,
        max_deviation=deviation,
        layer_mapping=converted.mapping,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    report.write(report_path_for(out_path))
    return report

"""Command-line entry point.

    nnixport export --arch <name|script.py> --weights <state_dict.pt> \
        --out <model.nnix> --probes 16

Exits 0 on success, 2 on configuration problems (unknown architecture,
unsupported layers, missing files), and 1 on parity failure.  The export
report is written next to the model as ``<model>.nnix.report.json``.
"""

import argparse
import sys

from .archs import ARCH_NAMES, load_arch, load_weights
from .errors import ArchError, ParityError, UnsupportedLayerError
from .export import export, report_path_for


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnixport", description="Export torch models to the NNIX interchange format."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    exp = sub.add_parser("export", help="convert a model and verify forward parity")
    exp.add_argument(
        "--arch", required=True,
        help=f"architecture name ({', '.join(ARCH_NAMES)}) or a .py build script",
    )
    exp.add_argument("--weights", required=True, help="torch state-dict checkpoint")
    exp.add_argument("--out", required=True, help="output .nnix path")
    exp.add_argument("--probes", type=int, default=16, help="parity probe count")
    exp.set_defaults(func=cmd_export)
    return parser


def cmd_export(args) -> int:
    module, input_shape = load_arch(args.arch)
    module = load_weights(module, args.weights)
    report = export(
        module, args.out, args.probes, input_shape=input_shape, arch=args.arch
    )
    print(
        f"exported {args.out} max_deviation={report.max_deviation:.3e} "
        f"probes={report.probes} report={report_path_for(args.out).name}"
    )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ArchError, UnsupportedLayerError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ParityError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

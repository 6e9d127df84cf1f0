"""Command line front end: export a checkpoint, or build a trained fixture."""

import argparse
import json
import sys

from .fixtures import FIXTURE_KINDS, make_fixture
from .formats import ExportError
from .torch_export import ExportManifest, export_model


def build_parser():
    parser = argparse.ArgumentParser(
        prog="modelexport", description="Torch-to-toolkit model exporter and fixture builder."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    e = sub.add_parser("export", help="convert a torch checkpoint to a model directory")
    e.add_argument("--checkpoint", required=True, help="torch.save'd checkpoint dict")
    e.add_argument("--out", required=True, help="model directory to write")
    e.add_argument("--fold-bn", action="store_true", help="fold batchnorm into conv/fc weights")
    e.add_argument("--golden", type=int, default=0, metavar="N", help="emit golden logits for N samples")
    e.add_argument("--name", default=None, help="override the checkpoint's model name")

    f = sub.add_parser("fixture", help="train and export a committed test fixture")
    f.add_argument("--kind", choices=FIXTURE_KINDS, required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True, help="fixture directory to write")
    f.add_argument("--golden", type=int, default=100, metavar="N")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            manifest = ExportManifest(
                checkpoint=args.checkpoint,
                out_dir=args.out,
                fold_batchnorm=args.fold_bn,
                golden_count=args.golden,
                name=args.name,
            )
            result = export_model(manifest)
        else:
            result = make_fixture(args.kind, args.seed, args.out, golden_count=args.golden)
        print(json.dumps(result))
        return 0
    except (ExportError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

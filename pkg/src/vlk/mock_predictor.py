"""Stand-in external predictor for exercising the plugin protocol.

    python -m vlk.mock_predictor --source PRECOMPUTED IN OUT

copies the probability channels ``PRECOMPUTED.c<k>`` to ``OUT.c<k>`` after
checking that ``IN`` is a readable volume of the same dims.
"""

import argparse
import sys

from .predictor import channel_path, read_prediction
from .volume import NUM_CLASSES, read_volume, write_volume


def main(argv=None):
    ap = argparse.ArgumentParser(prog="vlk.mock_predictor")
    ap.add_argument("--source", required=True, help="base path of precomputed channels")
    ap.add_argument("--fail", type=int, default=0, help="exit with this status without writing")
    ap.add_argument("--drop-channel", type=int, default=None, help="omit one channel from the output")
    ap.add_argument("inp")
    ap.add_argument("out")
    args = ap.parse_args(argv)
    if args.fail:
        print(f"mock predictor asked to fail with status {args.fail}", file=sys.stderr)
        return args.fail
    seg = read_volume(args.inp)
    read_prediction(args.source, seg.dims)  # validates the source
    for k in range(NUM_CLASSES):
        if k == args.drop_channel:
            continue
        write_volume(read_volume(channel_path(args.source, k)), channel_path(args.out, k))
    return 0


if __name__ == "__main__":
    sys.exit(main())

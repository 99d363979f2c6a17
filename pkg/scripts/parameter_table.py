"""Parameter counts for the default networks and the MFCU against a plain two-path block."""

import argparse

from dsmscd.networks import MFCU, DsmscnConfig, DsmsfcnConfig, MfcuConfig, build_network, conv_param_count, count_parameters


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bands", type=int, default=4)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--verbose", action="store_true", help="print every tensor")
    args = ap.parse_args()

    for kind, cfg in (("dsmscn", DsmscnConfig(bands=args.bands)), ("dsmsfcn", DsmsfcnConfig(bands=args.bands))):
        table = count_parameters(build_network(kind, cfg))
        print(table.format() if args.verbose else f"{kind}: {table.total}")
    w = args.width
    mfcu = count_parameters(MFCU(MfcuConfig.default(w, w))).total
    plain = conv_param_count(w, w // 2, 3) + conv_param_count(w, w // 2, 5)
    print(f"mfcu {w}->{w}: {mfcu}   two-path 3x3+5x5 {w}->{w // 2}+{w // 2}: {plain}   ratio {mfcu / plain:.3f}")


if __name__ == "__main__":
    main()

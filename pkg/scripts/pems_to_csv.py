"""Convert a PeMS traffic archive (.npz with a `data` array of shape (T, N, C)) to the package CSV.

The widely mirrored PEMS03/04/07/08 archives store flow in channel 0 at 5-minute steps.
Example:
    python3 scripts/pems_to_csv.py PEMS08.npz data/pems08_flow.csv --start 2016-07-01T00:00:00
"""
import argparse
import sys

import numpy as np

from sgru.data import TrafficSeries, write_csv


def convert(npz_path, out, channel=0, start="2018-01-01T00:00:00", zero_is_missing=False):
    with np.load(npz_path) as archive:
        key = "data" if "data" in archive.files else archive.files[0]
        raw = np.asarray(archive[key], dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.ndim != 3 or not 0 <= channel < raw.shape[2]:
        raise SystemExit(f"expected (T, N, C) with channel {channel}, got {raw.shape}")
    values = raw[:, :, channel:channel + 1].copy()
    missing = ~np.isfinite(values)
    if zero_is_missing:
        missing |= values == 0
    values[missing] = np.nan
    series = TrafficSeries(values, missing, start, 300)
    write_csv(series, out)
    return series


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("npz")
    ap.add_argument("out")
    ap.add_argument("--channel", type=int, default=0, help="0 = flow in the common archives")
    ap.add_argument("--start", default="2018-01-01T00:00:00", help="timestamp of the first step")
    ap.add_argument("--zero-is-missing", action="store_true",
                    help="treat exact zeros as sensor dropouts to be interpolated")
    args = ap.parse_args(argv)
    s = convert(args.npz, args.out, args.channel, args.start, args.zero_is_missing)
    print(f"T={s.T} N={s.N} missing={int(s.missing_mask.sum())} -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

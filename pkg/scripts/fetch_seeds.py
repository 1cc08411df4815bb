"""Download the UCI Seeds dataset and write data/seeds.csv (7 features + label 1..3).

Run: python3 scripts/fetch_seeds.py [--url URL] [--sha256 HEX]

The raw file is whitespace separated with occasional doubled tabs; it is
parsed row by row and rewritten as a plain CSV with a header line. The
SHA-256 of the downloaded bytes is printed; pass ``--sha256`` to verify a
previously recorded value.
"""

import argparse
import hashlib
import sys
import urllib.request
from pathlib import Path

URL = "https://archive.ics.uci.edu/ml/machine-learning-databases/00236/seeds_dataset.txt"
COLUMNS = ["area", "perimeter", "compactness", "kernel_length", "kernel_width", "asymmetry", "groove_length",
           "variety"]


def convert(raw: bytes) -> str:
    lines = [",".join(COLUMNS)]
    for k, line in enumerate(raw.decode("ascii").splitlines()):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != len(COLUMNS):
            raise ValueError(f"line {k + 1}: expected {len(COLUMNS)} fields, got {len(fields)}")
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--url", default=URL)
    p.add_argument("--sha256", help="expected SHA-256 of the raw download")
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "seeds.csv"))
    args = p.parse_args(argv)
    try:
        with urllib.request.urlopen(args.url, timeout=60) as resp:
            raw = resp.read()
    except OSError as exc:
        print(f"download failed: {exc}", file=sys.stderr)
        return 1
    digest = hashlib.sha256(raw).hexdigest()
    print(f"sha256 {digest}")
    if args.sha256 and args.sha256.lower() != digest:
        print("checksum mismatch", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(convert(raw))
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Download and extract the MovieLens 100K dataset.

Usage:
    python scripts/fetch_ml100k.py [--dest data] [--no-verify]

Places the extracted `ml-100k` directory under --dest (default ./data), which
is where the acceptance suite looks for it (override with MTAL_ML100K).
Needs outbound network access to files.grouplens.org.
"""
import argparse
import hashlib
import io
import sys
import urllib.request
import zipfile
from pathlib import Path

URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
# Published checksum of ml-100k.zip (GroupLens).
MD5 = "0e33842e24a9c977be4e0107933c0723"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dest", default="data", help="extraction directory")
    ap.add_argument("--no-verify", action="store_true",
                    help="skip the checksum comparison")
    args = ap.parse_args()

    dest = Path(args.dest)
    target = dest / "ml-100k"
    if (target / "u.data").exists():
        print(f"{target} already present; nothing to do")
        return 0

    print(f"downloading {URL} ...")
    with urllib.request.urlopen(URL, timeout=120) as resp:
        blob = resp.read()
    print(f"downloaded {len(blob) / 1e6:.1f} MB")

    digest = hashlib.md5(blob).hexdigest()
    if not args.no_verify and digest != MD5:
        print(f"checksum mismatch: got {digest}, expected {MD5}", file=sys.stderr)
        return 1

    dest.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        zf.extractall(dest)
    print(f"extracted to {target}")
    print("sanity:", len((target / "u.data").read_text().splitlines()), "ratings")
    return 0


if __name__ == "__main__":
    sys.exit(main())

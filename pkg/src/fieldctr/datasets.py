"""MovieLens-100K in the table layout :func:`fieldctr.data.ingest_table` reads.

The ratings, user and item files ship inside the RecBole wheel (atomic-file
format), which is reachable through any PyPI mirror.  :func:`fetch_ml100k`
downloads that wheel once into a cache directory; :func:`convert_ml100k` joins
the three files into one tab-separated table plus an 8-field schema.

Usage::

    python -m fieldctr.datasets OUT_DIR [--cache DIR] [--wheel PATH]
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import os
import subprocess
import sys
import zipfile

from .data import FieldSchema, FieldSpec, write_schema

RECBOLE_REQUIREMENT = "recbole==1.2.1"
_PREFIX = "recbole/dataset_example/ml-100k/ml-100k"

ML100K_SCHEMA = FieldSchema((
    FieldSpec("user_id", "categorical", "Anonymous identifier of the user"),
    FieldSpec("item_id", "categorical", "Identifier of the movie"),
    FieldSpec("age", "categorical", "Age of the user in years"),
    FieldSpec("gender", "categorical", "Gender of the user"),
    FieldSpec("occupation", "categorical", "Occupation of the user"),
    FieldSpec("zip_code", "categorical", "Postal code where the user lives"),
    FieldSpec("release_year", "categorical", "Year the movie was released"),
    FieldSpec("genre", "categorical", "Primary genre of the movie"),
))


def fetch_ml100k(cache_dir) -> str:
    """Return the path of the cached RecBole wheel, downloading it with pip if absent."""
    os.makedirs(cache_dir, exist_ok=True)
    found = sorted(glob.glob(os.path.join(cache_dir, "recbole-1.2.1-*.whl")))
    if found:
        return found[0]
    cmd = [sys.executable, "-m", "pip", "download", "--no-deps", "--quiet", "-d", cache_dir, RECBOLE_REQUIREMENT]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    found = sorted(glob.glob(os.path.join(cache_dir, "recbole-1.2.1-*.whl")))
    if proc.returncode != 0 or not found:
        raise OSError(f"could not download {RECBOLE_REQUIREMENT}: {proc.stderr.strip()[-500:]}")
    return found[0]


def _atomic(zf: zipfile.ZipFile, suffix: str) -> list[list[str]]:
    with zf.open(f"{_PREFIX}.{suffix}") as fh:
        rows = list(csv.reader(io.TextIOWrapper(fh, encoding="latin-1"), delimiter="\t"))
    return rows[1:]  # drop the typed header


def convert_ml100k(wheel_path, out_dir) -> tuple[str, str]:
    """Write ``ml100k.tsv`` and ``schema.tsv`` under ``out_dir``; returns both paths.

    Genres keep every listed value joined by ``|``; ingestion keeps the first.
    """
    with zipfile.ZipFile(wheel_path) as zf:
        inter = _atomic(zf, "inter")
        users = {r[0]: r[1:5] for r in _atomic(zf, "user")}
        items = {r[0]: (r[2] or "unknown", "|".join(r[3].split()) or "unknown") for r in _atomic(zf, "item")}
    os.makedirs(out_dir, exist_ok=True)
    table = os.path.join(out_dir, "ml100k.tsv")
    with open(table, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(ML100K_SCHEMA.names + ["rating", "timestamp"])
        for user, item, rating, ts in inter:
            w.writerow([user, item, *users[user], *items[item], rating, ts])
    schema = os.path.join(out_dir, "schema.tsv")
    write_schema(ML100K_SCHEMA, schema)
    return table, schema


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m fieldctr.datasets", description="Materialize MovieLens-100K.")
    p.add_argument("out_dir")
    p.add_argument("--cache", default=os.path.join(os.path.expanduser("~"), ".cache", "fieldctr"))
    p.add_argument("--wheel", help="use an already downloaded RecBole wheel")
    args = p.parse_args(argv)
    try:
        wheel = args.wheel or fetch_ml100k(args.cache)
        table, schema = convert_ml100k(wheel, args.out_dir)
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {table} and {schema}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Place MovieLens 100K under data/ml-100k in the official file layout.

Tries the GroupLens download first. When that host is unreachable, the
interaction, user and item tables are rebuilt from the copy of ML-100K that
ships inside the `recbole` wheel on PyPI. u.data and u.user are reproduced
line-for-line; u.item keeps ids, titles, release years and genre flags (the
IMDb URL column is left empty and release dates are set to 01-Jan-<year>).
"""
import argparse
import io
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

OFFICIAL_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
FILES = ["u.data", "u.user", "u.item", "u.genre", "u.occupation"]

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
OCCUPATIONS = [
    "administrator", "artist", "doctor", "educator", "engineer",
    "entertainment", "executive", "healthcare", "homemaker", "lawyer",
    "librarian", "marketing", "none", "other", "programmer", "retired",
    "salesman", "scientist", "student", "technician", "writer",
]


def try_official(out_dir):
    try:
        with urllib.request.urlopen(OFFICIAL_URL, timeout=20) as resp:
            payload = resp.read()
    except Exception as exc:  # noqa: BLE001
        print(f"official download unavailable: {exc}", file=sys.stderr)
        return False
    with zipfile.ZipFile(io.BytesIO(payload)) as zf:
        for name in FILES:
            with open(os.path.join(out_dir, name), "wb") as fh:
                fh.write(zf.read(f"ml-100k/{name}"))
    return True


def rebuild_from_wheel(out_dir):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1",
             "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = next(f for f in os.listdir(tmp) if f.endswith(".whl"))
        with zipfile.ZipFile(os.path.join(tmp, wheel)) as zf:
            base = "recbole/dataset_example/ml-100k/ml-100k"
            inter = zf.read(base + ".inter").decode("latin-1").splitlines()[1:]
            users = zf.read(base + ".user").decode("latin-1").splitlines()[1:]
            items = zf.read(base + ".item").decode("latin-1").splitlines()[1:]

    with open(os.path.join(out_dir, "u.data"), "w", encoding="latin-1", newline="\n") as fh:
        for line in inter:
            u, i, r, ts = line.split("\t")
            fh.write(f"{u}\t{i}\t{int(float(r))}\t{int(float(ts))}\n")

    with open(os.path.join(out_dir, "u.user"), "w", encoding="latin-1", newline="\n") as fh:
        for line in users:
            fh.write("|".join(line.split("\t")) + "\n")

    rows = []
    for line in items:
        item_id, title, year, classes = line.split("\t")
        flags = ["0"] * len(GENRES)
        for g in classes.split(" "):
            flags[GENRES.index(g)] = "1"
        if year.isdigit():
            full_title = f"{title} ({year})"
            date = f"01-Jan-{year}"
        else:
            full_title = "unknown" if title == "unkonwn" else title
            date = ""
        rows.append((int(item_id), f"{item_id}|{full_title}|{date}|||" + "|".join(flags)))
    with open(os.path.join(out_dir, "u.item"), "w", encoding="latin-1", newline="\n") as fh:
        for _, row in sorted(rows):
            fh.write(row + "\n")

    with open(os.path.join(out_dir, "u.genre"), "w", newline="\n") as fh:
        for idx, g in enumerate(GENRES):
            fh.write(f"{g}|{idx}\n")
    with open(os.path.join(out_dir, "u.occupation"), "w", newline="\n") as fh:
        for occ in OCCUPATIONS:
            fh.write(occ + "\n")


def main():
    parser = argparse.ArgumentParser()
    here = os.path.dirname(os.path.abspath(__file__))
    parser.add_argument("--out", default=os.path.join(here, "..", "data", "ml-100k"))
    args = parser.parse_args()
    os.makedirs(args.out, exist_ok=True)
    if not try_official(args.out):
        rebuild_from_wheel(args.out)
    print(f"ml-100k ready in {os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Fetch the UCI Adult and German credit files and write data/adult.csv and
data/german.csv (comma separated, header row).

The raw files are taken from the `responsibly` wheel on PyPI, which vendors
unmodified copies of the UCI downloads. Pass --raw DIR to convert files that
are already on disk (adult.data, adult.test, german.data).
"""

import argparse
import csv
import pathlib
import subprocess
import sys
import tempfile
import zipfile

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num",
    "marital-status", "occupation", "relationship", "race", "sex",
    "capital-gain", "capital-loss", "hours-per-week", "native-country",
    "income",
]

GERMAN_COLUMNS = [
    "status", "duration", "credit_history", "purpose", "credit_amount",
    "savings", "present_employment", "installment_rate", "status_sex",
    "other_debtors", "present_residence_since", "property", "age",
    "installment_plans", "housing", "number_of_existing_credits", "job",
    "number_of_people_liable_for", "telephone", "foreign_worker", "credit",
]

WHEEL_MEMBERS = {
    "responsibly/dataset/adult/adult.data": "adult.data",
    "responsibly/dataset/adult/adult.test": "adult.test",
    "responsibly/dataset/german/german.data": "german.data",
}


def download(dest: pathlib.Path) -> None:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps",
         "responsibly==0.1.2", "-d", str(dest)],
        check=True,
    )
    wheel = next(dest.glob("responsibly-*.whl"))
    with zipfile.ZipFile(wheel) as zf:
        for member, name in WHEEL_MEMBERS.items():
            (dest / name).write_bytes(zf.read(member))


def adult_rows(path: pathlib.Path):
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("|"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != len(ADULT_COLUMNS):
            continue
        fields[-1] = fields[-1].rstrip(".")
        yield fields


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--raw", type=pathlib.Path, help="directory holding the raw files")
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        raw = args.raw
        if raw is None:
            raw = pathlib.Path(tmp)
            download(raw)

        with open(args.out / "adult.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(ADULT_COLUMNS)
            n = 0
            for name in ("adult.data", "adult.test"):
                for row in adult_rows(raw / name):
                    w.writerow(row)
                    n += 1
        print(f"adult.csv: {n} rows")

        with open(args.out / "german.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(GERMAN_COLUMNS)
            n = 0
            for line in (raw / "german.data").read_text().splitlines():
                if line.strip():
                    w.writerow(line.split())
                    n += 1
        print(f"german.csv: {n} rows")


if __name__ == "__main__":
    main()

"""Regenerate the synthetic CSVs shipped under data/.

The real ETTh1 file is not redistributed here; ``etth1_synthetic.csv``
has the same header and hourly cadence so every loader path is exercised.
Point a config's ``data.path`` at a real ETTh1.csv to benchmark on it.
"""

from pathlib import Path

import numpy as np

from rimer.data import write_csv
from rimer.synthetic import etth_like, two_sinusoids

OUT = Path(__file__).resolve().parent.parent / "data"


def main() -> None:
    OUT.mkdir(exist_ok=True)
    ett = etth_like(5000, seed=0)
    write_csv(OUT / "etth1_synthetic.csv", ett.columns, ett.values, timestamps=ett.timestamps)
    sines = two_sinusoids(4096, seed=0)
    write_csv(OUT / "sinusoids.csv", sines.columns, np.round(sines.values, 6))
    toy = two_sinusoids(1200, seed=1)
    write_csv(OUT / "toy.csv", toy.columns, np.round(toy.values, 6))


if __name__ == "__main__":
    main()

"""Synthetic sinusoid data and NOAA weekly CO2 ingestion."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .engine import Dataset
from .errors import NoValidRows

__all__ = ["SinusoidConfig", "generate_sinusoid_data", "ingest_co2_csv", "CO2_MISSING"]

CO2_MISSING = -999.99


@dataclass(frozen=True)
class SinusoidConfig:
    f1: float = 0.04
    f2: float = 0.17
    a1: float = 1.0
    a2: float = 0.6
    noise_std: float = 0.2
    spacing: float = 1.0

    def as_dict(self):
        return asdict(self)


def generate_sinusoid_data(n: int, seed: int, config: SinusoidConfig = SinusoidConfig()) -> Dataset:
    """Two sinusoids plus Gaussian noise on an equally spaced grid.

    Times are ``0, h, ..., (n-1) h``. Output is fully determined by
    ``(n, seed, config)``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    t = config.spacing * np.arange(n, dtype=float)
    y = config.a1 * np.sin(2 * np.pi * config.f1 * t) + config.a2 * np.sin(2 * np.pi * config.f2 * t)
    if config.noise_std > 0:
        y = y + config.noise_std * np.random.default_rng(seed).standard_normal(n)
    return Dataset(t, y)


def ingest_co2_csv(path) -> Dataset:
    """Read the NOAA Mauna Loa weekly file.

    Lines starting with ``#`` are comments. Data columns are year, month,
    day, decimal year, ppm, and further columns that are ignored. Rows whose
    ppm equals the -999.99 sentinel are dropped. Values are mean-centered;
    ``Dataset.shift`` holds the removed mean.
    """
    times, ppm = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) < 5:
                raise ValueError(f"{path}:{lineno}: expected at least 5 columns, got {len(parts)}")
            try:
                dec, v = float(parts[3]), float(parts[4])
            except ValueError:
                # tolerate a header row written without the comment marker
                if not times and any(c.isalpha() for c in s):
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric value in {s!r}") from None
            if np.isclose(v, CO2_MISSING) or v < 0:
                continue
            times.append(dec)
            ppm.append(v)
    if not times:
        raise NoValidRows(f"{path}: no valid measurements")
    t = np.array(times)
    y = np.array(ppm)
    bad = np.flatnonzero(np.diff(t) <= 0)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{path}: timestamps not strictly increasing at {t[i]!r} -> {t[i + 1]!r}")
    mean = float(y.mean())
    return Dataset(t, y - mean, shift=mean, scale=1.0)

"""Write tests/data/co2_weekly_mlo_1958_2001.txt in the NOAA weekly layout.

Source values are the Mauna Loa weekly series shipped with statsmodels
(March 1958 to December 2001). Missing weeks become the -999.99 sentinel.
"""
import sys
from pathlib import Path

import numpy as np
from statsmodels.datasets import co2


def main(out):
    df = co2.load_pandas().data
    lines = [
        "# Mauna Loa weekly CO2 (ppm), NOAA weekly column layout",
        "# values from statsmodels.datasets.co2; missing weeks are -999.99",
        "# year, month, day, decimal, average, ndays, 1 year ago, 10 years ago, increase since 1800",
    ]
    for ts, v in df["co2"].items():
        days = 366 if ts.is_leap_year else 365
        dec = ts.year + (ts.dayofyear - 0.5) / days
        ppm = -999.99 if np.isnan(v) else v
        nd = 0 if np.isnan(v) else 7
        lines.append(
            f"{ts.year:6d} {ts.month:3d} {ts.day:3d} {dec:10.4f} {ppm:8.2f} {nd:5d} {-999.99:8.2f} {-999.99:8.2f} {-999.99:8.2f}"
        )
    Path(out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(df)} rows ({int(df['co2'].isna().sum())} missing) to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data/co2_weekly_mlo_1958_2001.txt")

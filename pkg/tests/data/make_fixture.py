"""Regenerate the 50 x 20 logistic fixture and its golden report.

    python3 tests/data/make_fixture.py
"""

from pathlib import Path

import numpy as np

from jointflip.cli import AnalysisConfig, run_analysis
from jointflip.simulate import ScenarioConfig, gen_dataset

HERE = Path(__file__).parent / "logit50x20"


def main():
    cfg = ScenarioConfig(n=50, m=20, frac_alt=0.2, beta_alt=1.0, gamma_true=-1.0, rho_xz=0.5, rho_y=0.4)
    Y, x, z = gen_dataset(cfg, 2024)
    HERE.mkdir(exist_ok=True)
    header = "\t".join(f"gene{l + 1:02d}" for l in range(Y.shape[1]))
    np.savetxt(HERE / "y.tsv", Y, fmt="%d", delimiter="\t", header=header, comments="")
    np.savetxt(HERE / "x.tsv", x[:, None], fmt="%.10f", header="x", comments="")
    np.savetxt(HERE / "z.tsv", z, fmt="%.10f", delimiter="\t", header="intercept\tz", comments="")
    run_analysis(AnalysisConfig(
        y_file=HERE / "y.tsv", x_file=HERE / "x.tsv", z_file=HERE / "z.tsv",
        method="maxt-sd", flips=2000, seed=7, out=HERE / "golden_report.tsv",
    ))


if __name__ == "__main__":
    main()

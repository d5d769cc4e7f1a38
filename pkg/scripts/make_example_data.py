#!/usr/bin/env python3
"""Regenerate the synthetic example datasets bundled with semburn.

Each dataset is drawn from its bundled model at documented true values,
so the examples are self-contained and redistributable.  The numbers
below are the generating truth, not estimates; loadings/paths/intercepts
are direct, variances are given on the variance scale and converted to
the sd parameterization here, and covariance entries are correlations.

Run from the repository root:

    python3 scripts/make_example_data.py
"""

import csv
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from semburn.bundled import bundled_model
from semburn.likelihood import implied_moments
from semburn.model import analyze_structure, assemble, build_templates
from semburn.syntax import build_parameter_table, infer_observed, parse_model

ASSET_DIR = Path(__file__).resolve().parents[1] / "src" / "semburn" / "assets"

# name -> (value, is_variance); variances become sds at assembly time
PD_TRUTH = {
    "ind60 =~ x2": (2.18, False),
    "ind60 =~ x3": (1.82, False),
    "dem60 =~ y2": (1.26, False),
    "dem60 =~ y3": (1.06, False),
    "dem60 =~ y4": (1.26, False),
    "dem65 =~ y6": (1.19, False),
    "dem65 =~ y7": (1.28, False),
    "dem65 =~ y8": (1.27, False),
    "dem60 ~ ind60": (1.48, False),
    "dem65 ~ ind60": (0.57, False),
    "dem65 ~ dem60": (0.84, False),
    "x1 ~~ x1": (0.08, True),
    "x2 ~~ x2": (0.12, True),
    "x3 ~~ x3": (0.47, True),
    "y1 ~~ y1": (1.89, True),
    "y2 ~~ y2": (7.37, True),
    "y3 ~~ y3": (5.07, True),
    "y4 ~~ y4": (3.15, True),
    "y5 ~~ y5": (2.35, True),
    "y6 ~~ y6": (4.95, True),
    "y7 ~~ y7": (3.43, True),
    "y8 ~~ y8": (3.26, True),
    "y1 ~~ y5": (0.25, False),
    "y2 ~~ y4": (0.20, False),
    "y2 ~~ y6": (0.25, False),
    "y3 ~~ y7": (0.15, False),
    "y4 ~~ y8": (0.10, False),
    "y6 ~~ y8": (0.20, False),
    "ind60 ~~ ind60": (0.45, True),
    "dem60 ~~ dem60": (3.96, True),
    "dem65 ~~ dem65": (0.17, True),
    "x1 ~ 1": (5.05, False),
    "x2 ~ 1": (4.79, False),
    "x3 ~ 1": (3.56, False),
    "y1 ~ 1": (5.46, False),
    "y2 ~ 1": (4.26, False),
    "y3 ~ 1": (6.56, False),
    "y4 ~ 1": (4.45, False),
    "y5 ~ 1": (5.14, False),
    "y6 ~ 1": (2.98, False),
    "y7 ~ 1": (6.20, False),
    "y8 ~ 1": (4.04, False),
}

HS_TRUTH = {
    "visual =~ x2": (0.55, False),
    "visual =~ x3": (0.73, False),
    "textual =~ x5": (1.11, False),
    "textual =~ x6": (0.93, False),
    "speed =~ x8": (1.18, False),
    "speed =~ x9": (1.08, False),
    "x1 ~~ x1": (0.55, True),
    "x2 ~~ x2": (1.13, True),
    "x3 ~~ x3": (0.84, True),
    "x4 ~~ x4": (0.37, True),
    "x5 ~~ x5": (0.45, True),
    "x6 ~~ x6": (0.36, True),
    "x7 ~~ x7": (0.80, True),
    "x8 ~~ x8": (0.49, True),
    "x9 ~~ x9": (0.57, True),
    "visual ~~ visual": (0.81, True),
    "textual ~~ textual": (0.98, True),
    "speed ~~ speed": (0.38, True),
    "visual ~~ textual": (0.46, False),
    "visual ~~ speed": (0.47, False),
    "textual ~~ speed": (0.28, False),
    "x1 ~ 1": (4.94, False),
    "x2 ~ 1": (6.09, False),
    "x3 ~ 1": (2.25, False),
    "x4 ~ 1": (3.06, False),
    "x5 ~ 1": (4.34, False),
    "x6 ~ 1": (2.19, False),
    "x7 ~ 1": (4.19, False),
    "x8 ~ 1": (5.53, False),
    "x9 ~ 1": (5.37, False),
}

GROWTH_TRUTH = {
    "COG_T1 =~ T1X2": (0.90, False),
    "COG_T1 =~ T1X3": (1.10, False),
    "dCOG1 ~ COG_T1": (-0.20, False),
    "T1X1 ~~ T1X1": (0.49, True),
    "T1X2 ~~ T1X2": (0.64, True),
    "T1X3 ~~ T1X3": (0.5625, True),
    "T1X1 ~~ T2X1": (0.30, False),
    "T1X2 ~~ T2X2": (0.25, False),
    "T1X3 ~~ T2X3": (0.35, False),
    "COG_T1 ~~ COG_T1": (1.00, True),
    "dCOG1 ~~ dCOG1": (0.30, True),
    "T1X2 ~ 1": (0.30, False),
    "T1X3 ~ 1": (0.50, False),
    "COG_T1 ~ 1": (5.00, False),
    "dCOG1 ~ 1": (0.50, False),
}

DATASETS = [
    ("pd", "political_democracy.csv", PD_TRUTH, 75, 202311),
    ("hs", "holzinger_swineford.csv", HS_TRUTH, 301, 193901),
    ("growth", "growth_milcs.csv", GROWTH_TRUTH, 500, 500500),
]


def truth_vector(templates, truth):
    theta = np.zeros(templates.n_free)
    seen = set()
    for label, (value, is_variance) in truth.items():
        k = templates.row_to_index[label]
        theta[k] = np.sqrt(value) if is_variance else value
        seen.add(k)
    missing = [templates.param_names[k] for k in range(templates.n_free)
               if k not in seen]
    if missing:
        raise SystemExit(f"no true value given for: {missing}")
    return theta


def generate(name, out_name, truth, n, seed):
    lines = parse_model(bundled_model(name).read_text())
    table = build_parameter_table(lines, infer_observed(lines))
    templates = build_templates(table)
    sm = assemble(templates, truth_vector(templates, truth))
    mom = implied_moments(sm, analyze_structure(templates))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, templates.p))
    rows = mom.mu + z @ mom.chol_sigma.T
    out = ASSET_DIR / out_name
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(templates.observed)
        for row in rows:
            writer.writerow([f"{v:.3f}" for v in row])
    print(f"wrote {out} ({n} rows, {templates.p} columns)")


def main():
    for spec in DATASETS:
        generate(*spec)


if __name__ == "__main__":
    main()

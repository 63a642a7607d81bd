"""Regenerates frozen reference values used by the Rust test suites.

Every value here is computed independently of the Rust implementation
(mpmath / scipy / brute force) and written to crates/core/tests/data/.
"""
import json
import math
import os

import mpmath
import numpy as np
from scipy import stats

mpmath.mp.dps = 50
OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "data")


def linear_beta_alpha_bar(steps, start, end):
    prod = mpmath.mpf(1)
    out = []
    for i in range(steps):
        beta = mpmath.mpf(start) + (mpmath.mpf(end) - mpmath.mpf(start)) * i / (steps - 1)
        prod *= 1 - beta
        out.append(prod)
    return out


def paired_fixtures(n_fixtures=100, seed=20241015):
    rng = np.random.default_rng(seed)
    fixtures = []
    for _ in range(n_fixtures):
        n = int(rng.integers(2, 60))
        shift = float(rng.normal(0.0, 0.5))
        a = rng.normal(0.0, 1.0, n)
        b = a - shift + rng.normal(0.0, float(rng.uniform(0.1, 2.0)), n)
        p = stats.ttest_rel(a, b, alternative="greater").pvalue
        fixtures.append({"a": a.tolist(), "b": b.tolist(), "p": float(p)})
    return fixtures


def wilson(successes, n, z=None):
    z = z if z is not None else stats.norm.ppf(0.975)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return centre - half, centre + half


def lattice_count(size, radius):
    c = (size - 1) / 2
    return sum(
        1
        for i in range(size)
        for j in range(size)
        if (i - c) ** 2 + (j - c) ** 2 <= radius * radius
    )


def main():
    ab = linear_beta_alpha_bar(1000, "1e-4", "0.02")
    ref = {
        "linear_beta_1000_alpha_bar_last": float(ab[-1]),
        "linear_beta_1000_alpha_bar_500": float(ab[499]),
        "z_975": float(stats.norm.ppf(0.975)),
        "wilson_60_100": list(wilson(60, 100)),
        "wilson_1506_2880": list(wilson(1506, 2880)),
        "mask_45_r20_count": lattice_count(45, 20),
        "mask_32_r14_count": lattice_count(32, 14),
        "paired_t_3456_vs_noisy": float(
            stats.ttest_rel([3, 4, 5, 6], [1, 2.5, 3, 4.2], alternative="greater").pvalue
        ),
    }
    os.makedirs(OUT, exist_ok=True)
    with open(os.path.join(OUT, "reference.json"), "w") as f:
        json.dump(ref, f, indent=2)
    with open(os.path.join(OUT, "paired_t_fixtures.json"), "w") as f:
        json.dump(paired_fixtures(), f)
    print(json.dumps(ref, indent=2))


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Reference CVSS v3.1 base-score table generator.

Transcribes the published CVSS v3.1 base-score equations (first.org
specification document, section 7) and emits a CSV of every possible
base vector with its score. The Rust implementation is tested for exact
parity against this table; keep this file independent of the Rust code.
"""

import csv
import itertools
import math
import sys

AV = {"N": 0.85, "A": 0.62, "L": 0.55, "P": 0.2}
AC = {"L": 0.77, "H": 0.44}
PR_U = {"N": 0.85, "L": 0.62, "H": 0.27}
PR_C = {"N": 0.85, "L": 0.68, "H": 0.5}
UI = {"N": 0.85, "R": 0.62}
CIA = {"H": 0.56, "L": 0.22, "N": 0.0}


def roundup(x: float) -> float:
    # Mirrors the spec's Roundup pseudocode (Math.round == floor(x + 0.5)).
    int_input = math.floor(x * 100000 + 0.5)
    if int_input % 10000 == 0:
        return int_input / 100000.0
    return (math.floor(int_input / 10000) + 1) / 10.0


def base_score(av, ac, pr, ui, s, c, i, a) -> float:
    iss = 1.0 - (1.0 - CIA[c]) * (1.0 - CIA[i]) * (1.0 - CIA[a])
    if s == "U":
        impact = 6.42 * iss
    else:
        impact = 7.52 * (iss - 0.029) - 3.25 * (iss - 0.02) ** 15
    pr_w = PR_U[pr] if s == "U" else PR_C[pr]
    expl = 8.22 * AV[av] * AC[ac] * pr_w * UI[ui]
    if impact <= 0:
        return 0.0
    if s == "U":
        return roundup(min(impact + expl, 10.0))
    return roundup(min(1.08 * (impact + expl), 10.0))


ANCHORS = [
    # Widely published scores, used to sanity-check this generator itself.
    ("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H", 9.8),
    ("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:C/C:H/I:H/A:H", 10.0),
    ("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:N/A:N", 7.5),
    ("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:L/I:N/A:N", 5.3),
    ("CVSS:3.1/AV:N/AC:L/PR:N/UI:R/S:C/C:L/I:L/A:N", 6.1),
    ("CVSS:3.1/AV:N/AC:L/PR:L/UI:N/S:U/C:H/I:H/A:H", 8.8),
    ("CVSS:3.1/AV:L/AC:L/PR:L/UI:N/S:U/C:H/I:H/A:H", 7.8),
    ("CVSS:3.1/AV:N/AC:H/PR:N/UI:N/S:U/C:H/I:H/A:H", 8.1),
    ("CVSS:3.1/AV:L/AC:H/PR:H/UI:R/S:U/C:L/I:N/A:N", 1.8),
    ("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:N/I:N/A:N", 0.0),
]


def vector(av, ac, pr, ui, s, c, i, a) -> str:
    return f"CVSS:3.1/AV:{av}/AC:{ac}/PR:{pr}/UI:{ui}/S:{s}/C:{c}/I:{i}/A:{a}"


def main(out_path: str) -> None:
    combos = itertools.product("NALP", "LH", "NLH", "NR", "UC", "HLN", "HLN", "HLN")
    rows = [(vector(*m), f"{base_score(*m):.1f}") for m in combos]
    table = dict(rows)
    for vec, expected in ANCHORS:
        got = float(table[vec])
        if abs(got - expected) > 1e-9:
            raise SystemExit(f"anchor mismatch for {vec}: got {got}, want {expected}")
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vector", "base_score"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} vectors to {out_path}; {len(ANCHORS)} anchors verified")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "cvss_golden.csv")

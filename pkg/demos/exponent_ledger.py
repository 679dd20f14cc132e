"""Walk the exponent ledger at the default parameters and at a broken one.

Run: python demos/exponent_ledger.py
"""

from fractions import Fraction

from citorus.estimate_harness import check_exponent_inequalities


def show(beta, b, alpha, d):
    print(f"beta={beta} b={b} alpha={alpha} d={d}")
    for r in check_exponent_inequalities(beta, b, alpha, d):
        mark = "ok " if r.holds else "BAD"
        print(f"  {mark} {r.name:<32} margin {r.margin}  (~{float(r.margin):.3g})")


if __name__ == "__main__":
    show(Fraction(1, 200), Fraction(5), Fraction(1, 10**6), 4)
    # the corrector margin is about 1e-3, so a modest beta already breaks the chain
    show(Fraction(1, 10), Fraction(5), Fraction(1, 10**6), 4)
    # the linear error needs d >= 4
    show(Fraction(1, 200), Fraction(5), Fraction(1, 10**6), 3)

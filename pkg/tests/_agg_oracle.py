"""Brute-force reference aggregations, written independently of the library."""

from fractions import Fraction


def reference(values, kind):
    vals = list(values)
    if kind == "mean":
        return float(sum(Fraction(v) for v in vals) / len(vals))
    if kind == "max":
        best = vals[0]
        for v in vals:
            if v > best:
                best = v
        return best
    if kind == "min":
        best = vals[0]
        for v in vals:
            if v < best:
                best = v
        return best
    if kind == "sum":
        return float(sum(Fraction(v) for v in vals))
    if kind == "count":
        return float(len(vals))
    if kind == "last":
        return vals[-1]
    q = int(kind[1:])
    ordered = sorted(vals)
    # smallest value whose cumulative share reaches q percent
    for i, v in enumerate(ordered, start=1):
        if i * 100 >= q * len(ordered):
            return v
    raise AssertionError("unreachable")

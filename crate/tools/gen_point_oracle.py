#!/usr/bin/env python3
"""Independent recomputation of generator triples from recorded variates.

Reads ``crates/core/tests/fixtures/oracle_uniforms.csv`` (uniform variates
as f64 bit patterns, one line per point) and recomputes each
``(psi, psi_hat, w_next)`` triple from first principles: its own quantile
transform, its own sorting and normalization, and a three-stage grid
search over ``psi = asinh(xi)`` for the shape fit. Prints Rust source for
the ``EXPECTED`` table in ``crates/core/tests/gen_point_oracle.rs``.

Uses only the Python standard library.
"""

import math
import pathlib
import struct

N = 20
PSI_MIN, PSI_MAX = -2.5, 2.5
BRACKET = 4.5
W_CAP = 710.0

FIXTURE = (
    pathlib.Path(__file__).resolve().parent.parent
    / "crates/core/tests/fixtures/oracle_uniforms.csv"
)


def bits_to_float(hexword: str) -> float:
    return struct.unpack(">d", bytes.fromhex(hexword))[0]


def tail_quantile(xi: float, g: float) -> float:
    """Inverse of the unit generalized Pareto tail at exceedance g."""
    length = -math.log(g)
    z = xi * length
    if abs(xi) < 1e-9:
        return length * (1.0 + z / 2.0 + z * z / 6.0)
    return math.expm1(z) / xi


def model_log1p_u(xi: float, i: int) -> float:
    """log(1 + u(xi, i)) for the fitted curve at 1-based rank i."""
    g_mid = (N / 2 - 0.5) / N
    g_i = (i - 0.5) / N
    g_n = (N - 0.5) / N
    a = math.log(g_mid / g_i)
    b = math.log(g_mid / g_n)
    if abs(xi) < 1e-9:
        u = a / -b
    else:
        u = math.expm1(xi * a) / -math.expm1(xi * b)
    return math.log1p(u)


def rss(psi: float, ulog: list) -> float:
    xi = math.sinh(psi)
    total = 0.0
    for i in range(1, N // 2):
        r = ulog[i - 1] - model_log1p_u(xi, i)
        total += r * r
    return total


def fit_psi(ulog: list) -> float:
    """Three-stage grid argmin of the residual sum over the search bracket."""
    lo, hi = -BRACKET, BRACKET
    best = None
    for step in (1e-3, 1e-6, 1e-9):
        count = int(round((hi - lo) / step))
        best = min(
            (rss(lo + k * step, ulog), lo + k * step) for k in range(count + 1)
        )[1]
        lo = max(-BRACKET, best - 1.5 * step)
        hi = min(BRACKET, best + 1.5 * step)
    return best


def triple(variates: list) -> tuple:
    span = PSI_MAX - PSI_MIN
    psi = PSI_MIN + span * variates[0]
    xi = math.sinh(psi)
    xs = [tail_quantile(xi, 1.0 - u) for u in variates[1 : N + 1]]
    x_next = tail_quantile(xi, 1.0 - variates[N + 1])
    xs.sort(reverse=True)
    x_mid = xs[N // 2 - 1]
    x_span = x_mid - xs[-1]
    assert x_span > 0.0, "degenerate sample in oracle fixture"
    ulog = [math.log1p((xs[i] - x_mid) / x_span) for i in range(N // 2 - 1)]
    psi_hat = fit_psi(ulog)
    assert abs(psi_hat) < BRACKET - 1e-3, "oracle fit too close to the bracket edge"
    w_next = math.asinh((x_next - x_mid) / x_span)
    w_next = max(-W_CAP, min(W_CAP, w_next))
    return psi, psi_hat, w_next


def main() -> None:
    rows = []
    for line in FIXTURE.read_text().splitlines():
        if line.startswith("#"):
            continue
        cells = line.split(",")
        rows.append((int(cells[0]), [bits_to_float(c) for c in cells[1:]]))
    rows.sort()
    print("const EXPECTED: [(f64, f64, f64); %d] = [" % len(rows))
    for _, variates in rows:
        psi, psi_hat, w_next = triple(variates)
        print("    (%.17e, %.17e, %.17e)," % (psi, psi_hat, w_next))
    print("];")


if __name__ == "__main__":
    main()

"""Compiled inner loops for the axisymmetric duct solver.

Arrays are laid out as ``c[i, j]`` with ``i`` the radial cell and ``j`` the
axial cell. Every kernel mutates its state arrays in place.
"""

import math

import numpy as np
from numba import njit

# diag slots
DEGRADED = 0
OUTFLOW = 1
FORWARD = 2
CLAMP = 3
LAST_FORWARD = 4

OK = 0
NEGATIVE_BULK = 1
NON_FINITE = 2

NEG_TOL = 1e-12


@njit(cache=True)
def exchange_cell(c, C, dt, r, k_f, k_r, B):
    """Exact local solution of one wall cell's bulk/receptor exchange.

    ``c`` is the cell concentration, ``C`` the bound density on its wall face,
    ``r`` the face area over cell volume. With ``c + r*C = m`` conserved the
    receptor ODE is a constant-coefficient Riccati equation, integrated here in
    closed form. Returns ``(c_new, C_new, forward)`` where ``forward`` is the
    forward-binding density (per unit area) accumulated over ``dt``.
    """
    m = c + r * C
    a = k_f * r
    b = k_f * (m + r * B) + k_r
    d = k_f * m * B
    disc = b * b - 4.0 * a * d
    if disc < 0.0:
        disc = 0.0
    g = math.sqrt(disc)
    C1 = 2.0 * d / (b + g)
    # rate balance avoids the cancellation in m - r*C1 while receptors are far from saturation
    if B - C1 > 1e-6 * B:
        c1 = k_r * C1 / (k_f * (B - C1))
    else:
        c1 = max(m - r * C1, 0.0)
    u0 = C - C1
    E = math.exp(-g * dt)
    if g > 0.0:
        x = -(u0 * a / g) * (1.0 - E)
        ratio = math.log1p(x) / x if x != 0.0 else 1.0
        int_u = u0 * (1.0 - E) / g * ratio
    else:
        x = 0.0
        int_u = u0 * dt
    u = u0 * E / (1.0 + x)
    C_new = C1 + u
    c_new = c1 - r * u
    if c_new < 0.0:
        c_new = 0.0
    if C_new < 0.0:
        C_new = 0.0
    if C_new > B:
        C_new = B
    forward = (C_new - C) + k_r * (C1 * dt + int_u)
    return c_new, C_new, forward


@njit(cache=True)
def exchange(c, C, dt, rx_j, rx_r, rx_A, k_f, k_r, B, diag):
    i = c.shape[0] - 1
    total = 0.0
    for n in range(rx_j.shape[0]):
        j = rx_j[n]
        c_new, C_new, fwd = exchange_cell(c[i, j], C[n], dt, rx_r[n], k_f, k_r, B)
        c[i, j] = c_new
        C[n] = C_new
        total += fwd * rx_A[n]
    diag[FORWARD] += total
    diag[LAST_FORWARD] = total


@njit(cache=True)
def advect(c, nu, V_row, closed_outlet, diag):
    """First-order upwind transport along +z with per-row Courant number ``nu``."""
    nr, nz = c.shape
    out = 0.0
    for i in range(nr):
        f = nu[i]
        if f == 0.0:
            continue
        last = c[i, nz - 1]
        for j in range(nz - 1, 0, -1):
            c[i, j] = c[i, j] - f * c[i, j] + f * c[i, j - 1]
        c[i, 0] = c[i, 0] - f * c[i, 0]
        if closed_outlet:
            c[i, nz - 1] += f * last
        else:
            out += f * last * V_row[i]
    diag[OUTFLOW] += out


@njit(cache=True)
def diffuse(c, P, Pinv, cp, den, off, V_row, diag):
    """Backward-Euler diffusion: radial eigenmodes, axial tridiagonal solves."""
    d = Pinv @ c
    nr, nz = d.shape
    for i in range(nr):
        row = d[i]
        row[0] = row[0] / den[i, 0]
        for j in range(1, nz):
            row[j] = (row[j] - off * row[j - 1]) / den[i, j]
        for j in range(nz - 2, -1, -1):
            row[j] = row[j] - cp[i, j] * row[j + 1]
    res = P @ d
    cmax = 0.0
    for i in range(nr):
        for j in range(nz):
            v = res[i, j]
            if not math.isfinite(v):
                return NON_FINITE
            if v > cmax:
                cmax = v
    clamp = 0.0
    for i in range(nr):
        for j in range(nz):
            v = res[i, j]
            if v < 0.0:
                if v < -NEG_TOL * cmax:
                    return NEGATIVE_BULK
                clamp -= v * V_row[i]
                v = 0.0
            c[i, j] = v
    diag[CLAMP] += clamp
    return OK


@njit(cache=True)
def decay(c, factor, V_row, diag):
    if factor == 1.0:
        return
    nr, nz = c.shape
    lost = 0.0
    for i in range(nr):
        s = 0.0
        for j in range(nz):
            s += c[i, j]
            c[i, j] *= factor
        lost += s * V_row[i]
    diag[DEGRADED] += lost * (1.0 - factor)


@njit(cache=True)
def advance(c, C, n_steps, dt, nu, V_row, closed_outlet, P, Pinv, cp, den, off,
            rx_j, rx_r, rx_A, k_f, k_r, B, decay_factor, binding, diag):
    """Run ``n_steps`` split steps: advect, diffuse, exchange, decay."""
    for _ in range(n_steps):
        advect(c, nu, V_row, closed_outlet, diag)
        status = diffuse(c, P, Pinv, cp, den, off, V_row, diag)
        if status != OK:
            return status
        if binding:
            exchange(c, C, dt, rx_j, rx_r, rx_A, k_f, k_r, B, diag)
        else:
            diag[LAST_FORWARD] = 0.0
        decay(c, decay_factor, V_row, diag)
    return OK


@njit(cache=True)
def row_mass(c, V_row):
    total = 0.0
    for i in range(c.shape[0]):
        s = 0.0
        for j in range(c.shape[1]):
            s += c[i, j]
        total += s * V_row[i]
    return total


def warmup():
    """Trigger compilation with tiny arrays (used by worker initializers)."""
    c = np.zeros((2, 3))
    C = np.zeros(1)
    diag = np.zeros(5)
    eye = np.eye(2)
    ones = np.ones((2, 3))
    advance(c, C, 1, 1e-3, np.zeros(2), np.ones(2), False, eye, eye, np.zeros((2, 3)),
            ones, 0.0, np.array([1], dtype=np.int64), np.ones(1), np.ones(1),
            1.0, 1.0, 1.0, 1.0, True, diag)

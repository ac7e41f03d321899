"""Differentiable generator functions f(p) = V(A p) and their Jacobians.

Angles use theta = atan2(x, y) (x in the first slot), the flame-algorithm
convention; swapping the arguments changes every non-linear variation.
Singular points are guarded so every map is total:

* spherical divides by max(r^2, EPS_R)
* power raises max(r, EPS_R) to sin(theta)

Derivatives are those of the guarded functions.  The scalar kernels are
numba-compiled so the sampler can call them from its inner loops; the
Python wrappers below take and return :class:`Point` values.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .params import AffineMap, GeneratorParams, Point, Variation

EPS_R = 1e-6
DIVERGENCE_BOUND = 1e6
# exp() argument cap; e^700 is far past the divergence bound but still finite
EXP_CAP = 700.0

LINEAR = int(Variation.LINEAR)
SPHERICAL = int(Variation.SPHERICAL)
HANDKERCHIEF = int(Variation.HANDKERCHIEF)
EXPONENTIAL = int(Variation.EXPONENTIAL)
DISK = int(Variation.DISK)
HEART = int(Variation.HEART)
POWER = int(Variation.POWER)

_jit = nb.njit(cache=True, fastmath=False, inline="always")


@_jit
def variation_forward(vid, x, y):
    if vid == LINEAR:
        return x, y
    if vid == SPHERICAL:
        r2 = max(x * x + y * y, EPS_R)
        return x / r2, y / r2
    if vid == EXPONENTIAL:
        ex = math.exp(min(x - 1.0, EXP_CAP))
        return ex * math.cos(math.pi * y), ex * math.sin(math.pi * y)
    r = math.sqrt(x * x + y * y)
    theta = math.atan2(x, y)
    if vid == HANDKERCHIEF:
        return r * math.sin(theta + r), r * math.cos(theta - r)
    if vid == DISK:
        s = theta / math.pi
        return s * math.sin(math.pi * r), s * math.cos(math.pi * r)
    if vid == HEART:
        return r * math.sin(theta * r), -r * math.cos(theta * r)
    # POWER
    rr = max(r, EPS_R)
    rho = math.exp(math.sin(theta) * math.log(rr))
    return rho * math.cos(theta), rho * math.sin(theta)


@_jit
def variation_jacobian_kernel(vid, x, y):
    """Returns (dxx, dxy, dyx, dyy) with dij = d(out_i)/d(in_j)."""
    if vid == LINEAR:
        return 1.0, 0.0, 0.0, 1.0
    if vid == SPHERICAL:
        r2 = x * x + y * y
        if r2 <= EPS_R:
            return 1.0 / EPS_R, 0.0, 0.0, 1.0 / EPS_R
        r4 = r2 * r2
        off = -2.0 * x * y / r4
        return (r2 - 2.0 * x * x) / r4, off, off, (r2 - 2.0 * y * y) / r4
    if vid == EXPONENTIAL:
        ex = math.exp(min(x - 1.0, EXP_CAP))
        c = math.cos(math.pi * y)
        s = math.sin(math.pi * y)
        dx = ex if x - 1.0 < EXP_CAP else 0.0
        return dx * c, -math.pi * ex * s, dx * s, math.pi * ex * c

    r2 = x * x + y * y
    r = math.sqrt(r2)
    theta = math.atan2(x, y)
    # partial derivatives of r and theta; zero at the origin (measure-zero kink)
    if r > 0.0:
        r_x = x / r
        r_y = y / r
        t_x = y / r2
        t_y = -x / r2
    else:
        r_x = 0.0
        r_y = 0.0
        t_x = 0.0
        t_y = 0.0

    if vid == HANDKERCHIEF:
        sp = math.sin(theta + r)
        cp = math.cos(theta + r)
        sm = math.sin(theta - r)
        cm = math.cos(theta - r)
        return (
            r_x * sp + r * cp * (t_x + r_x),
            r_y * sp + r * cp * (t_y + r_y),
            r_x * cm - r * sm * (t_x - r_x),
            r_y * cm - r * sm * (t_y - r_y),
        )
    if vid == DISK:
        s = math.sin(math.pi * r)
        c = math.cos(math.pi * r)
        return (
            t_x / math.pi * s + theta * c * r_x,
            t_y / math.pi * s + theta * c * r_y,
            t_x / math.pi * c - theta * s * r_x,
            t_y / math.pi * c - theta * s * r_y,
        )
    if vid == HEART:
        s = math.sin(theta * r)
        c = math.cos(theta * r)
        u_x = t_x * r + theta * r_x
        u_y = t_y * r + theta * r_y
        return (
            r_x * s + r * c * u_x,
            r_y * s + r * c * u_y,
            -r_x * c + r * s * u_x,
            -r_y * c + r * s * u_y,
        )
    # POWER
    if r > EPS_R:
        rr = r
        lr_x = r_x / r
        lr_y = r_y / r
    else:
        rr = EPS_R
        lr_x = 0.0
        lr_y = 0.0
    st = math.sin(theta)
    ct = math.cos(theta)
    lg = math.log(rr)
    rho = math.exp(st * lg)
    rho_x = rho * (ct * t_x * lg + st * lr_x)
    rho_y = rho * (ct * t_y * lg + st * lr_y)
    return (
        rho_x * ct - rho * st * t_x,
        rho_y * ct - rho * st * t_y,
        rho_x * st + rho * ct * t_x,
        rho_y * st + rho * ct * t_y,
    )


@_jit
def generator_forward(coef, vid, x, y):
    """Apply one generator; returns (x', y', divergent)."""
    ax = coef[0] * x + coef[1] * y + coef[2]
    ay = coef[3] * x + coef[4] * y + coef[5]
    ox, oy = variation_forward(vid, ax, ay)
    bad = not (abs(ox) <= DIVERGENCE_BOUND and abs(oy) <= DIVERGENCE_BOUND)
    return ox, oy, bad


@_jit
def generator_backward_kernel(coef, vid, x, y, gx, gy, grad_out):
    """Adjoint of generator_forward at input (x, y).

    Adds d/d(a..f) into grad_out[0:6] and returns the input adjoint.
    """
    ax = coef[0] * x + coef[1] * y + coef[2]
    ay = coef[3] * x + coef[4] * y + coef[5]
    jxx, jxy, jyx, jyy = variation_jacobian_kernel(vid, ax, ay)
    # adjoint at the affine output
    hx = jxx * gx + jyx * gy
    hy = jxy * gx + jyy * gy
    grad_out[0] += hx * x
    grad_out[1] += hx * y
    grad_out[2] += hx
    grad_out[3] += hy * x
    grad_out[4] += hy * y
    grad_out[5] += hy
    return coef[0] * hx + coef[3] * hy, coef[1] * hx + coef[4] * hy


# ---------------------------------------------------------------------------
# Python-facing API


def apply_variation(v: Variation, p: Point) -> Point:
    x, y = variation_forward(int(v), float(p.x), float(p.y))
    return Point(x, y)


def variation_jacobian(v: Variation, p: Point) -> np.ndarray:
    """2x2 Jacobian [[dx'/dx, dx'/dy], [dy'/dx, dy'/dy]]."""
    j = variation_jacobian_kernel(int(v), float(p.x), float(p.y))
    return np.array(j, dtype=np.float64).reshape(2, 2)


def apply_generator(g: GeneratorParams, p: Point) -> tuple[Point, bool]:
    """Returns the image of `p` and whether the step diverged."""
    x, y, bad = generator_forward(g.affine.to_array(), int(g.variation), float(p.x), float(p.y))
    return Point(x, y), bool(bad)


def generator_backward(g: GeneratorParams, p: Point, adjoint_out: Point) -> tuple[Point, np.ndarray]:
    """Pull `adjoint_out` back through V(A p); returns (adjoint_in, d/d(a..f))."""
    grads = np.zeros(6)
    ix, iy = generator_backward_kernel(
        g.affine.to_array(), int(g.variation), float(p.x), float(p.y),
        float(adjoint_out.x), float(adjoint_out.y), grads,
    )
    return Point(ix, iy), grads


def affine_jacobian(m: AffineMap) -> np.ndarray:
    return np.array([[m.a, m.b], [m.d, m.e]])

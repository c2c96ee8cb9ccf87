"""Analytic first and second spatial derivatives of the channel gains h_i.

The reflected path is written per quadrature node as ``C * w(x) * D(x)``
with ``w = ((p - x).n_R)_+ / r^3``, ``q = (x - p).n / r`` (cos beta),
``c = cos(alpha) q + sin(alpha) sqrt(1 - q^2)`` (cos(beta - alpha)) and
``D = 2 r_k q_+ + (1 - r_k)(mu_k + 1) c_+^mu_k``. Every derivative below is
the exact chain rule of that form; finite differences are the acceptance
oracle (see DERIVATIONS.md).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from irs_vlp.channel import OrientationSet, quadrature_nodes, source_terms
from irs_vlp.errors import ClampBoundaryError, GeometryError
from irs_vlp.scene import Scene, Vec3, as_vec3

logger = logging.getLogger(__name__)

CLAMP_EPSILON = 1e-9
COLLINEAR_EPSILON = 1e-12
GRADIENT_STEP = 1e-6
HESSIAN_STEP = 1e-4

_EYE = np.eye(3)


@dataclass(frozen=True)
class GainJet:
    """Values, gradients and (optionally) Hessians of every h_i at one position."""

    values: NDArray[np.float64]
    gradients: NDArray[np.float64]
    hessians: NDArray[np.float64] | None


def _outer(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    return a[..., :, None] * b[..., None, :]


def _sym_outer(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    return _outer(a, b) + _outer(b, a)


def _los_jet(scene: Scene, led_index: int, x: Vec3, order: int, check: bool):
    led = scene.leds[led_index]
    n_led, n_rx = led.orientation, scene.receiver_orientation
    d = x - led.position
    r = float(np.linalg.norm(d))
    if r == 0.0:
        raise GeometryError(f"Receiver coincides with LED {led_index}")
    a = float(d @ n_led)
    b = float(-d @ n_rx)
    if check and (abs(a) < CLAMP_EPSILON or abs(b) < CLAMP_EPSILON):
        raise ClampBoundaryError(f"LOS path of LED {led_index} is at a visibility boundary at {x}")
    zero_h = np.zeros((3, 3)) if order >= 2 else None
    if a <= 0.0 or b <= 0.0:
        return 0.0, np.zeros(3), zero_h

    m = led.lambertian_order
    scale = (m + 1) * scene.pd_area / (2 * math.pi)
    p = -(m + 3)
    big_a = a**m
    g_a = m * a ** (m - 1) * n_led
    g_b = -n_rx
    big_r = r**p
    g_r = p * r ** (p - 2) * d

    value = scale * big_a * b * big_r
    grad = scale * (g_a * b * big_r + big_a * g_b * big_r + big_a * b * g_r)
    if order < 2:
        return value, grad, None

    h_a = m * (m - 1) * a ** (m - 2) * np.outer(n_led, n_led)
    h_r = p * r ** (p - 2) * _EYE + p * (p - 2) * r ** (p - 4) * np.outer(d, d)
    hess = scale * (
        h_a * b * big_r
        + big_a * b * h_r
        + big_r * _sym_outer(g_a, g_b)
        + b * _sym_outer(g_a, g_r)
        + big_a * _sym_outer(g_b, g_r)
    )
    return value, grad, hess


def _reflected_jets(
    scene: Scene,
    x: Vec3,
    orientations: OrientationSet,
    quadrature: int,
    order: int,
    check: bool,
):
    nodes = quadrature_nodes(scene, quadrature)
    arrays = scene.element_arrays
    idx = nodes.element_index
    normals = np.repeat(orientations.vectors, nodes.per_element, axis=0)
    diffuse_fraction = arrays["diffuse_fraction"][idx]
    mu = arrays["directivity"][idx]
    n_rx = scene.receiver_orientation
    sources = [source_terms(scene, i, normals, nodes) for i in range(scene.num_leds)]
    live = np.zeros(nodes.points.shape[0], dtype=bool)
    for src in sources:
        live |= src.coefficient > 0

    d = x - nodes.points
    r = np.linalg.norm(d, axis=1)
    if np.any(r == 0.0):
        raise GeometryError(f"Receiver at {x} coincides with an IRS surface point")
    s = -(d @ n_rx)
    t = np.einsum("kj,kj->k", d, normals)
    q = t / r
    one_minus_q2 = np.clip(1.0 - q**2, 0.0, None)
    root = np.sqrt(one_minus_q2)

    if check:
        if np.any(live & (np.abs(s) < CLAMP_EPSILON)):
            raise ClampBoundaryError(f"Receiver at {x} is at the visibility boundary of an element")
        if np.any(live & (diffuse_fraction > 0) & (np.abs(q) < CLAMP_EPSILON)):
            raise ClampBoundaryError(f"Receiver at {x} is in the plane of an element mirror")

    s_on = s > 0
    s_plus = np.where(s_on, s, 0.0)
    r2 = r**2
    inv_r3 = 1.0 / (r2 * r)
    inv_r5 = inv_r3 / r2

    w = s_plus * inv_r3
    g_w = np.where(s_on[:, None], -n_rx[None, :] * inv_r3[:, None] - 3 * (s * inv_r5)[:, None] * d, 0.0)
    g_q = normals / r[:, None] - (t * inv_r3)[:, None] * d

    q_on = q > 0
    diffuse_value = 2 * diffuse_fraction * np.where(q_on, q, 0.0)
    diffuse_grad = (2 * diffuse_fraction * q_on)[:, None] * g_q

    if order >= 2:
        inv_r7 = inv_r5 / r2
        dd = _outer(d, d)
        h_w = (
            3 * inv_r5[:, None, None] * _sym_outer(n_rx[None, :].repeat(len(r), 0), d)
            + s[:, None, None] * (-3 * inv_r5[:, None, None] * _EYE + 15 * inv_r7[:, None, None] * dd)
        )
        h_w = np.where(s_on[:, None, None], h_w, 0.0)
        h_q = (
            -inv_r3[:, None, None] * _sym_outer(normals, d)
            + t[:, None, None] * (-inv_r3[:, None, None] * _EYE + 3 * inv_r5[:, None, None] * dd)
        )
        diffuse_hess = (2 * diffuse_fraction * q_on)[:, None, None] * h_q

    collinear = root < math.sqrt(COLLINEAR_EPSILON)
    safe_root = np.where(collinear, 1.0, root)

    values = np.zeros(scene.num_leds)
    grads = np.zeros((scene.num_leds, 3))
    hessians = np.zeros((scene.num_leds, 3, 3)) if order >= 2 else None
    for i, src in enumerate(sources):
        c = src.cos_alpha * q + src.sin_alpha * root
        specular_live = live & (src.coefficient > 0) & (diffuse_fraction < 1)
        if check:
            if np.any(specular_live & (np.abs(c) < CLAMP_EPSILON)):
                raise ClampBoundaryError(f"Receiver at {x} is at the edge of a specular lobe (LED {i})")
            if np.any(specular_live & collinear & (src.sin_alpha > 0) & (c > 0)):
                raise GeometryError(f"Receiver at {x} is collinear with an element normal (LED {i})")

        c_on = c > 0
        c_safe = np.where(c_on, c, 1.0)
        c1 = src.cos_alpha - np.where(collinear, 0.0, src.sin_alpha * q / safe_root)
        g_c = c1[:, None] * g_q
        lobe_scale = (1 - diffuse_fraction) * (mu + 1)
        lobe_value = lobe_scale * np.where(c_on, c_safe**mu, np.where(mu == 0, 1.0, 0.0))
        lobe_d1 = np.where(c_on & (mu > 0), lobe_scale * mu * c_safe ** (mu - 1), 0.0)

        big_d = diffuse_value + lobe_value
        g_d = diffuse_grad + lobe_d1[:, None] * g_c
        coef = src.coefficient

        values[i] = np.sum(coef * w * big_d)
        grads[i] = np.sum(coef[:, None] * (big_d[:, None] * g_w + w[:, None] * g_d), axis=0)
        if order < 2:
            continue

        c2 = np.where(collinear, 0.0, -src.sin_alpha / (safe_root**3))
        h_c = c2[:, None, None] * _outer(g_q, g_q) + c1[:, None, None] * h_q
        lobe_d2 = np.where(c_on & (mu > 1), lobe_scale * mu * (mu - 1) * c_safe ** (mu - 2), 0.0)
        h_d = diffuse_hess + lobe_d2[:, None, None] * _outer(g_c, g_c) + lobe_d1[:, None, None] * h_c
        h_f = (
            big_d[:, None, None] * h_w
            + _sym_outer(g_w, g_d)
            + w[:, None, None] * h_d
        )
        hessians[i] = np.sum(coef[:, None, None] * h_f, axis=0)
    return values, grads, hessians


def gain_jet(
    scene: Scene,
    x: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
    order: int = 2,
    check_boundary: bool = True,
) -> GainJet:
    """Values and derivatives of h_i(x) for every LED.

    Args:
        scene: The scene
        x: Receiver position
        orientations: IRS orientation set used by the model
        quadrature: Midpoint-rule order per element footprint
        order: 1 for gradients only, 2 to include Hessians
        check_boundary: Raise ClampBoundaryError near clamp boundaries instead
            of returning one-sided derivatives

    Raises:
        GeometryError: Coincident points or collinear mirror geometry
        ClampBoundaryError: A clamped factor is within CLAMP_EPSILON of zero
    """
    x = as_vec3(x)
    values = np.zeros(scene.num_leds)
    grads = np.zeros((scene.num_leds, 3))
    hessians = np.zeros((scene.num_leds, 3, 3)) if order >= 2 else None

    if not scene.los_blocked:
        for i in range(scene.num_leds):
            v, g, h = _los_jet(scene, i, x, order, check_boundary)
            values[i] += v
            grads[i] += g
            if hessians is not None:
                hessians[i] += h

    if scene.num_elements:
        v, g, h = _reflected_jets(scene, x, orientations, quadrature, order, check_boundary)
        values += v
        grads += g
        if hessians is not None:
            hessians += h
    return GainJet(values=values, gradients=grads, hessians=hessians)


def clamp_margin(
    scene: Scene,
    x: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
    smooth_directivity: float = 3.0,
) -> float:
    """Smallest magnitude among the clamped factors that are not C^2 at zero.

    A specular lobe c_+^mu with mu >= ``smooth_directivity`` is smooth enough
    at c = 0 to be ignored. Finite-difference checks need this margin to
    exceed their stencil width.
    """
    x = as_vec3(x)
    margins = [math.inf]
    if not scene.los_blocked:
        for led in scene.leds:
            d = x - led.position
            margins += [abs(float(d @ led.orientation)), abs(float(d @ scene.receiver_orientation))]
    if scene.num_elements:
        nodes = quadrature_nodes(scene, quadrature)
        arrays = scene.element_arrays
        normals = np.repeat(orientations.vectors, nodes.per_element, axis=0)
        diffuse_fraction = arrays["diffuse_fraction"][nodes.element_index]
        rough = arrays["directivity"][nodes.element_index] < smooth_directivity
        d = x - nodes.points
        r = np.linalg.norm(d, axis=1)
        q = np.einsum("kj,kj->k", d, normals) / r
        root = np.sqrt(np.clip(1.0 - q**2, 0.0, None))
        for i in range(scene.num_leds):
            src = source_terms(scene, i, normals, nodes)
            live = src.coefficient > 0
            margins.append(np.min(np.abs(d @ scene.receiver_orientation)[live], initial=math.inf))
            margins.append(np.min(np.abs(q)[live & (diffuse_fraction > 0)], initial=math.inf))
            c = src.cos_alpha * q + src.sin_alpha * root
            margins.append(np.min(np.abs(c)[live & rough & (diffuse_fraction < 1)], initial=math.inf))
    return float(min(margins))


def grad_h(
    scene: Scene,
    led_index: int,
    x: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
) -> Vec3:
    """Gradient of the total gain of LED ``led_index`` (1/m)."""
    return gain_jet(scene, x, orientations, quadrature, order=1).gradients[led_index]


def hess_h(
    scene: Scene,
    led_index: int,
    x: ArrayLike,
    orientations: OrientationSet,
    quadrature: int = 1,
) -> NDArray[np.float64]:
    """Hessian of the total gain of LED ``led_index`` (1/m^2)."""
    return gain_jet(scene, x, orientations, quadrature, order=2).hessians[led_index]


def fd_gradient(f: Callable[[Vec3], float], x: ArrayLike, step: float = GRADIENT_STEP) -> Vec3:
    """Central-difference gradient of a scalar function of position."""
    if step <= 0:
        raise ValueError(f"Step must be positive, got {step}")
    x = np.asarray(x, dtype=float)
    grad = np.zeros(3)
    for m in range(3):
        e = np.zeros(3)
        e[m] = step
        grad[m] = (f(x + e) - f(x - e)) / (2 * step)
    return grad


def fd_hessian(f: Callable[[Vec3], float], x: ArrayLike, step: float = HESSIAN_STEP) -> NDArray[np.float64]:
    """Nested central-difference Hessian of a scalar function of position."""
    if step <= 0:
        raise ValueError(f"Step must be positive, got {step}")
    x = np.asarray(x, dtype=float)
    hess = np.zeros((3, 3))
    basis = np.eye(3) * step
    for m in range(3):
        for n in range(m, 3):
            em, en = basis[m], basis[n]
            value = (
                f(x + em + en) - f(x + em - en) - f(x - em + en) + f(x - em - en)
            ) / (4 * step**2)
            hess[m, n] = hess[n, m] = value
    return hess

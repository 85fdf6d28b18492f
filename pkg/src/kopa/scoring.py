"""Score functions for the four embedding families.

All families share one sign convention: ``F(h, r, t)`` is a dissimilarity,
lower = more plausible. The bilinear families (DistMult, ComplEx) are
negated to fit this convention.

Complex-valued rows are stored flat as ``[real parts | imaginary parts]``.
RotatE relations are stored as one phase (radians) per complex coordinate,
so their stored width is half the entity width.

Arithmetic follows the input dtype: the trainer feeds float32 tables for
speed, the verification paths feed float64.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

TRANSE = "transe"
DISTMULT = "distmult"
COMPLEX = "complex"
ROTATE = "rotate"
FAMILIES = (TRANSE, DISTMULT, COMPLEX, ROTATE)

# guards 0/0 in the RotatE modulus gradient; the gradient is taken as 0 there
_MODULUS_FLOOR = 1e-30


def check_dims(family: str, entity_dim: int) -> int:
    """Validate the entity dimension for ``family`` and return the relation dimension."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown score family {family!r}; expected one of {FAMILIES}")
    if entity_dim < 1:
        raise ConfigError(f"entity dimension must be >= 1, got {entity_dim}")
    if family in (COMPLEX, ROTATE) and entity_dim % 2:
        raise ConfigError(f"{family} needs an even entity dimension (complex pairs), got {entity_dim}")
    return entity_dim // 2 if family == ROTATE else entity_dim


def _split(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = x.shape[-1] // 2
    return x[..., :m], x[..., m:]


def score_batch(family: str, h: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Dissimilarity for row-aligned batches of embedding vectors; shape (n,)."""
    if family == TRANSE:
        return np.abs(h + r - t).sum(axis=-1)
    if family == DISTMULT:
        return -(h * r * t).sum(axis=-1)
    if family == COMPLEX:
        hr, hi = _split(h)
        rr, ri = _split(r)
        tr, ti = _split(t)
        re = hr * rr - hi * ri
        im = hr * ri + hi * rr
        return -(re * tr + im * ti).sum(axis=-1)
    if family == ROTATE:
        hr, hi = _split(h)
        tr, ti = _split(t)
        c, s = np.cos(r), np.sin(r)
        dr = hr * c - hi * s - tr
        di = hr * s + hi * c - ti
        return np.sqrt(dr * dr + di * di).sum(axis=-1)
    raise ConfigError(f"unknown score family {family!r}")


def grad_batch(family: str, h: np.ndarray, r: np.ndarray, t: np.ndarray):
    """Analytic gradients of ``score_batch`` w.r.t. (h, r, t), row-aligned."""
    _, gh, gr, gt = score_and_grad(family, h, r, t)
    return gh, gr, gt


def score_and_grad(family: str, h: np.ndarray, r: np.ndarray, t: np.ndarray):
    """Dissimilarity plus its analytic gradients, sharing intermediates.

    TransE/RotatE use the L1 norm, whose subgradient at exact kinks is
    taken as 0 (sign(0) = 0).
    """
    if family == TRANSE:
        diff = h + r - t
        f = np.abs(diff).sum(axis=-1)
        g = np.sign(diff)
        return f, g, g.copy(), -g
    if family == DISTMULT:
        rt = r * t
        f = -(h * rt).sum(axis=-1)
        return f, -rt, -(h * t), -(h * r)
    if family == COMPLEX:
        hr, hi = _split(h)
        rr, ri = _split(r)
        tr, ti = _split(t)
        re = hr * rr - hi * ri
        im = hr * ri + hi * rr
        f = -(re * tr + im * ti).sum(axis=-1)
        gh = np.concatenate([-(rr * tr + ri * ti), -(rr * ti - ri * tr)], axis=-1)
        gr = np.concatenate([-(hr * tr + hi * ti), -(hr * ti - hi * tr)], axis=-1)
        gt = np.concatenate([-re, -im], axis=-1)
        return f, gh, gr, gt
    if family == ROTATE:
        hr, hi = _split(h)
        tr, ti = _split(t)
        c, s = np.cos(r), np.sin(r)
        ur = hr * c - hi * s          # rotated head, real
        ui = hr * s + hi * c          # rotated head, imaginary
        dr = ur - tr
        di = ui - ti
        mod = np.sqrt(dr * dr + di * di)
        f = mod.sum(axis=-1)
        inv = np.where(mod > _MODULUS_FLOOR, 1.0 / np.maximum(mod, _MODULUS_FLOOR), 0.0)
        fr = dr * inv
        fi = di * inv
        gh = np.concatenate([fr * c + fi * s, -fr * s + fi * c], axis=-1)
        gr = -fr * ui + fi * ur
        gt = np.concatenate([-fr, -fi], axis=-1)
        return f, gh, gr, gt
    raise ConfigError(f"unknown score family {family!r}")

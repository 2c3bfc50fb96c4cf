"""Point-density functions controlling local mesh spacing on the sphere.

Mesh spacing follows h ~ rho^(-1/4), so the built-in presets produce
equator/pole (or far/near) size ratios of 3, 16, and 64:

* ``const`` - rho = 1 everywhere (quasi-uniform mesh).
* ``x3``    - rho = (1-gamma) z^4 + gamma with gamma = (1/3)^4.
* ``x16``   - tanh plateau around a center, elliptical geodesic distance
  weighted by longitude/latitude widths, gamma = (1/16)^4.
* ``x64``   - tanh plateau, plain geodesic distance, gamma = (1/64)^4.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import PoleAmbiguityError
from .geometry import geodesic_distance, normalize

POLE_EPS = 1e-9


@dataclass(frozen=True)
class DensityField:
    """Analytic point-density rho(x) >= gamma > 0 on the unit sphere."""

    variant: str                  # const | x3 | x16 | x64 | tanh
    gamma: float = 1.0            # floor value
    beta: float = 0.0             # plateau geodesic radius
    alpha: float = 1.0            # transition width
    center: np.ndarray | None = None
    w_lon: float | None = None    # elliptical widths; set => elliptical distance
    w_lat: float | None = None

    def with_overrides(self, **kwargs) -> "DensityField":
        if "center" in kwargs and kwargs["center"] is not None:
            kwargs["center"] = normalize(np.asarray(kwargs["center"], dtype=float))
        return replace(self, **kwargs)

    @property
    def max_value(self) -> float:
        """Analytic maximum of rho (attained at a pole or the plateau center)."""
        if self.variant == "const":
            return 1.0
        if self.variant == "x3":
            return 1.0
        # tanh plateau peaks at distance 0
        return float(1.0 / (2.0 * (1.0 - self.gamma))
                     * (np.tanh(self.beta / self.alpha) + 1.0) + self.gamma)


def density_preset(name: str) -> DensityField:
    name = name.lower()
    if name in ("const", "constant", "uniform"):
        return DensityField(variant="const")
    if name == "x3":
        return DensityField(variant="x3", gamma=(1.0 / 3.0) ** 4)
    if name == "x16":
        return DensityField(
            variant="x16",
            gamma=(1.0 / 16.0) ** 4,
            beta=np.pi / 6.0,
            alpha=0.3,
            center=np.array([1.0, 0.0, 0.0]),
            w_lon=0.3,
            w_lat=1.2,
        )
    if name == "x64":
        # Printed center coordinates are rounded; renormalize on load.
        return DensityField(
            variant="x64",
            gamma=(1.0 / 64.0) ** 4,
            beta=np.pi / 6.0,
            alpha=0.15,
            center=normalize(np.array([0.0, -0.866, 0.5])),
        )
    raise ValueError(f"unknown density preset {name!r}")


def _latlon(x):
    """Latitude/longitude of unit points; raises near the poles."""
    x = np.asarray(x, dtype=float)
    horiz = np.hypot(x[..., 0], x[..., 1])
    if np.any(horiz < POLE_EPS):
        raise PoleAmbiguityError("longitude undefined within 1e-9 of a pole")
    lat = np.arctan2(x[..., 2], horiz)
    lon = np.arctan2(x[..., 1], x[..., 0])
    return lat, lon


def _from_latlon(lat, lon):
    return np.stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)],
        axis=-1,
    )


def elliptical_distance(x, field: DensityField):
    """Longitude/latitude-weighted geodesic distance used by the x16 preset.

    sqrt(|x - x_ic|_S^2 / w_lon^2 + |x - x_ci|_S^2 / w_lat^2) where x_ic
    shares x's latitude and the center's longitude, and x_ci vice versa.
    """
    lat_x, lon_x = _latlon(x)
    lat_c, lon_c = _latlon(field.center)
    x = np.asarray(x, dtype=float)
    x_ic = _from_latlon(lat_x, np.broadcast_to(lon_c, lat_x.shape))
    x_ci = _from_latlon(np.broadcast_to(lat_c, lat_x.shape), lon_x)
    d_lon = geodesic_distance(x, x_ic)
    d_lat = geodesic_distance(x, x_ci)
    return np.sqrt((d_lon / field.w_lon) ** 2 + (d_lat / field.w_lat) ** 2)


def eval_density(field: DensityField, x):
    """Evaluate rho at points (renormalized first), vectorized over rows."""
    x = normalize(x)
    if field.variant == "const":
        return np.ones(x.shape[:-1]) if x.ndim > 1 else 1.0
    if field.variant == "x3":
        return (1.0 - field.gamma) * x[..., 2] ** 4 + field.gamma
    if field.w_lon is not None:
        d = elliptical_distance(x, field)
    else:
        d = geodesic_distance(x, field.center)
    # Plateau formula kept verbatim from its source; peaks slightly above 1.
    return (np.tanh((field.beta - d) / field.alpha) + 1.0) \
        / (2.0 * (1.0 - field.gamma)) + field.gamma


def sample_by_density(field: DensityField, k: int, seed: int) -> np.ndarray:
    """Monte Carlo initialization: K points with acceptance probability rho/max(rho).

    Rejection sampling against uniform sphere proposals from a seeded
    generator; deterministic for a fixed seed.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    rho_max = field.max_value
    out = np.empty((k, 3))
    have = 0
    while have < k:
        batch = max(4 * (k - have), 1024)
        pts = normalize(rng.standard_normal((batch, 3)))
        keep = rng.random(batch) * rho_max < eval_density(field, pts)
        pts = pts[keep]
        take = min(k - have, len(pts))
        out[have:have + take] = pts[:take]
        have += take
    return out

"""Seeded synthetic daily forcing used by the demos and experiments."""

from __future__ import annotations

import datetime as dt

import numpy as np

from .data import ForcingSeries, daily_dates, pet_from_temperature

DEFAULT_START = dt.date(2010, 1, 1)


def seasonal_forcing(n_days: int, seed: int = 0, start: dt.date = DEFAULT_START,
                     mean_temp: float = 8.0, temp_amplitude: float = 12.0,
                     wet_fraction: float = 0.35, mean_wet_depth: float = 8.0) -> ForcingSeries:
    """Sine-driven temperature and intermittent gamma-distributed rain.

    Temperature peaks in mid-summer; wet days are a little more frequent in
    winter. Cold days therefore build a snowpack that melts in spring.
    """
    rng = np.random.default_rng(seed)
    dates = daily_dates(start, n_days)
    doy = np.array([d.timetuple().tm_yday for d in dates], dtype=np.float64)
    phase = 2.0 * np.pi * (doy - 110.0) / 365.25
    temp = mean_temp + temp_amplitude * np.sin(phase) + rng.normal(0.0, 2.5, n_days)
    p_wet = np.clip(wet_fraction * (1.0 - 0.3 * np.sin(phase)), 0.0, 1.0)
    wet = rng.random(n_days) < p_wet
    depth = rng.gamma(0.8, mean_wet_depth / 0.8, n_days)
    precip = np.where(wet, depth, 0.0)
    return ForcingSeries(dates,
                         {"precip": precip, "temp": temp, "pet": pet_from_temperature(temp, dates)})


def soil_env_ensemble(n: int, seed: int = 0) -> dict:
    """Independent uniform draws of soil conditions and ammonium pools."""
    rng = np.random.default_rng(seed)
    return {
        "wfps": rng.uniform(0.1, 1.0, n),
        "temp": rng.uniform(0.0, 35.0, n),
        "ph": rng.uniform(4.0, 8.0, n),
        "humus_dec": rng.uniform(0.0, 0.5, n),
        "nh4": rng.uniform(0.1, 5.0, n),
    }

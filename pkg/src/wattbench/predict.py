"""Energy-per-minute prediction over inference rate, from measured profiles.

The model is affine in the rate r (inferences per minute): each inference
costs its measured mean power for its measured mean duration, and the device
idles the rest of the minute:

    E(r) = r * (w_mean_inf * t_mean_inf / 60) + w_idle * (60 - r * t_mean_inf) / 60

E is in watt-minutes per minute, so E(0) equals the idle wattage and E at
the saturation rate 60/t_mean_inf equals the inference wattage.  The
derivation and its caveats live in docs/prediction-model.md.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence


class RateExceedsMax(ValueError):
    pass


@dataclass(frozen=True)
class DevicePowerProfile:
    """Measured behavior of one device/model pair.

    ``w_idle`` is the idle draw in the connectivity state the benchmark ran
    in (LAN up, for the wired setups measured here).
    """

    name: str
    t_mean_inf: float
    w_mean_inf: float
    w_idle: float

    def __post_init__(self):
        if self.t_mean_inf <= 0:
            raise ValueError(f"t_mean_inf must be positive, got {self.t_mean_inf}")
        if self.w_idle < 0 or self.w_mean_inf < 0:
            raise ValueError("power values must be non-negative")
        if self.w_mean_inf < self.w_idle:
            # A device could genuinely idle hotter than it computes; keep going.
            warnings.warn(
                f"{self.name}: inference power {self.w_mean_inf} W below idle "
                f"{self.w_idle} W",
                stacklevel=2,
            )


def per_inference_wattminutes(profile: DevicePowerProfile) -> float:
    """Energy of a single inference in watt-minutes."""
    return profile.w_mean_inf * profile.t_mean_inf / 60


def busy_fraction(profile: DevicePowerProfile, rate: float) -> float:
    """Share of each minute spent inside inference intervals at ``rate``."""
    return rate * profile.t_mean_inf / 60


def rate_limit(profile: DevicePowerProfile) -> float:
    """Rate at which the device is busy 100% of the time (may be fractional)."""
    return 60 / profile.t_mean_inf


def max_rate(profile: DevicePowerProfile) -> int:
    """Maximum whole inferences per minute."""
    return math.floor(rate_limit(profile))


def energy_at_rate(profile: DevicePowerProfile, rate: float) -> tuple[float, float]:
    """Predicted watt-minutes per minute and busy fraction at ``rate``."""
    if rate < 0:
        raise ValueError(f"rate must be non-negative, got {rate}")
    if rate > rate_limit(profile):
        raise RateExceedsMax(
            f"{profile.name}: rate {rate}/min exceeds limit {rate_limit(profile):.3f}/min"
        )
    busy = busy_fraction(profile, rate)
    energy = rate * per_inference_wattminutes(profile) + profile.w_idle * (
        (60 - rate * profile.t_mean_inf) / 60
    )
    return energy, busy


def _slope(profile: DevicePowerProfile) -> float:
    return profile.t_mean_inf * (profile.w_mean_inf - profile.w_idle) / 60


def crossover(a: DevicePowerProfile, b: DevicePowerProfile) -> Optional[float]:
    """Rate at which the two energy curves intersect, or None.

    None means the curves are parallel or the intersection falls outside
    [0, min(rate_limit)], i.e. there is no feasible crossover.
    """
    slope_a, slope_b = _slope(a), _slope(b)
    if slope_a == slope_b:
        return None
    rate = (b.w_idle - a.w_idle) / (slope_a - slope_b)
    if rate < 0 or rate > min(rate_limit(a), rate_limit(b)):
        return None
    return rate


@dataclass(frozen=True)
class RatePowerCurve:
    """Sampled prediction curve for one profile over [0, r_max]."""

    profile: DevicePowerProfile

    @property
    def r_max(self) -> float:
        return rate_limit(self.profile)

    def __call__(self, rate: float) -> float:
        return energy_at_rate(self.profile, rate)[0]

    def sample(self, rates: Sequence[float]) -> list[tuple[float, float, float]]:
        """Rows of (rate, watt-minutes per minute, busy fraction)."""
        rows = []
        for rate in rates:
            energy, busy = energy_at_rate(self.profile, rate)
            rows.append((rate, energy, busy))
        return rows


_PROFILE_KEYS = {"name", "t_mean_inf", "w_mean_inf", "w_idle"}


def parse_profile(text: str) -> DevicePowerProfile:
    """Parse a device profile file.

    The format is a flat TOML table restricted to ``key = value`` lines with
    quoted strings and plain numbers (this tool targets Python 3.10, which
    ships no TOML parser; files in this subset remain valid TOML).
    """
    values: dict[str, object] = {}
    for line_no, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"profile line {line_no}: expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _PROFILE_KEYS:
            raise ValueError(f"profile line {line_no}: unknown key {key!r}")
        if value.startswith(('"', "'")):
            if len(value) < 2 or value[-1] != value[0]:
                raise ValueError(f"profile line {line_no}: unterminated string")
            values[key] = value[1:-1]
        else:
            values[key] = float(value.split("#", 1)[0].strip())
    missing = _PROFILE_KEYS - values.keys()
    if missing:
        raise ValueError(f"profile is missing keys: {', '.join(sorted(missing))}")
    return DevicePowerProfile(
        name=str(values["name"]),
        t_mean_inf=float(values["t_mean_inf"]),
        w_mean_inf=float(values["w_mean_inf"]),
        w_idle=float(values["w_idle"]),
    )


def load_profile(path: str | Path) -> DevicePowerProfile:
    return parse_profile(Path(path).read_text(encoding="utf-8"))


def serialize_profile(profile: DevicePowerProfile, comment: str = "") -> str:
    lines = []
    if comment:
        lines.extend(f"# {line}" for line in comment.splitlines())
    lines.append(f'name = "{profile.name}"')
    lines.append(f"t_mean_inf = {profile.t_mean_inf!r}")
    lines.append(f"w_mean_inf = {profile.w_mean_inf!r}")
    lines.append(f"w_idle = {profile.w_idle!r}")
    return "\n".join(lines) + "\n"

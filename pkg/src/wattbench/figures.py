"""Matplotlib rendering for the prediction report path.

Kept separate so the import cost is only paid when a figure is requested;
everything else in the package renders its own SVG or emits CSV.
"""

from __future__ import annotations

from typing import Sequence

from .predict import DevicePowerProfile, RatePowerCurve, crossover, max_rate


def render_rate_power_figure(
    profiles: Sequence[DevicePowerProfile],
    rates_by_profile: dict[str, Sequence[float]],
    out_path: str,
    *,
    mark_crossovers: bool = True,
    dpi: int = 120,
) -> None:
    """Plot each profile's energy-per-minute curve and save to ``out_path``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for profile in profiles:
        curve = RatePowerCurve(profile)
        rows = curve.sample(rates_by_profile[profile.name])
        xs = [r for r, _, _ in rows]
        ys = [e for _, e, _ in rows]
        ax.plot(xs, ys, label=f"{profile.name} (max {max_rate(profile)}/min)")

    if mark_crossovers and len(profiles) > 1:
        for i, a in enumerate(profiles):
            for b in profiles[i + 1 :]:
                rate = crossover(a, b)
                if rate is None:
                    continue
                energy = RatePowerCurve(a)(rate)
                ax.plot([rate], [energy], "ko", markersize=4)
                ax.annotate(
                    f"{rate:.0f}/min",
                    (rate, energy),
                    textcoords="offset points",
                    xytext=(4, 6),
                    fontsize=8,
                )

    ax.set_xlabel("inference rate [1/min]")
    ax.set_ylabel("energy [wattminutes/min]")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=dpi)
    plt.close(fig)

"""Static SVG plots with the plotted numeric series embedded as metadata.

Every figure is written as SVG whose ``Description`` metadata field holds
a JSON dump of the series being drawn, so plots can be diffed and checked
without parsing the vector graphics.  Rendering is deterministic: the
SVG hash salt is pinned and the date stamp suppressed.
"""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.dates as mdates  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["save_att_plot", "save_state_fit_plot", "embedded_series"]

plt.rcParams["svg.hashsalt"] = "voteimpact"

_WINDOW_COLOR = "#f8c8d4"  # pink shading over the expected-death window


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and np.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _save(fig, path, series: dict):
    description = json.dumps(_jsonable(series), sort_keys=True)
    fig.savefig(path, format="svg", metadata={"Description": description, "Date": None})
    plt.close(fig)


def embedded_series(path) -> dict:
    """Recover the numeric series embedded in a saved SVG."""
    import xml.etree.ElementTree as ET

    root = ET.parse(path).getroot()
    for elem in root.iter():
        if elem.tag.endswith("description") and elem.text:
            return json.loads(elem.text)
    raise ValueError(f"{path}: no embedded series found")


def save_att_plot(leads, estimate, ci_low, ci_high, window, path) -> None:
    """Treatment-effect curve by lead day with its bootstrap band.

    ``window`` is the (low, high) expected-death window in days after the
    election, shaded pink.
    """
    leads = np.asarray(leads, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.axvspan(window[0], window[1], color=_WINDOW_COLOR, alpha=0.6, zorder=0)
    ax.fill_between(leads, ci_low, ci_high, color="#9db8d9", alpha=0.5, zorder=1)
    ax.plot(leads, estimate, color="#1f3b63", lw=1.8, zorder=2)
    ax.axhline(0.0, color="0.3", lw=0.8, ls="--", zorder=1)
    ax.set_xlabel("days after the primary election")
    ax.set_ylabel("daily deaths per 1000 (treated minus matched controls)")
    ax.set_title("Matched difference-in-differences estimate by lead day")
    fig.tight_layout()
    _save(
        fig,
        path,
        {
            "kind": "att_curve",
            "leads": leads,
            "estimate": estimate,
            "ci_low": ci_low,
            "ci_high": ci_high,
            "window": list(window),
        },
    )


def save_state_fit_plot(
    state: str,
    dates,
    observed,
    death_bands: dict,
    rt_bands: dict,
    markers: dict,
    path,
    converged: bool = True,
) -> None:
    """Two-panel state figure: death-count fit and the Rt series.

    ``death_bands`` / ``rt_bands`` map quantile labels ("median", "lo50",
    "hi50", "lo90", "hi90", "lo95", "hi95") to series over ``dates``.
    ``markers`` maps a label to a date (or None to skip); a vertical line
    is drawn for each present marker.  Unconverged runs are annotated.
    """
    dates = np.asarray(dates, dtype="datetime64[D]")
    x = dates.astype("datetime64[D]").astype(object)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)

    for ax, bands, color in ((ax1, death_bands, "#3a7ca5"), (ax2, rt_bands, "#2e7d4f")):
        for lo, hi, alpha in (("lo95", "hi95", 0.2), ("lo90", "hi90", 0.3), ("lo50", "hi50", 0.45)):
            ax.fill_between(x, bands[lo], bands[hi], color=color, alpha=alpha, lw=0)
        ax.plot(x, bands["median"], color=color, lw=1.5)

    ax1.plot(x, observed, ".", ms=3.5, color="0.2", label="observed deaths")
    ax1.set_ylabel("daily deaths")
    ax1.legend(loc="upper left", frameon=False, fontsize=8)
    ax2.axhline(1.0, color="0.3", lw=0.8, ls="--")
    ax2.set_ylabel("reproduction rate")

    marker_styles = {"primary": "-", "primary_plus_median_death": "--", "stay_at_home": ":"}
    for label, date in markers.items():
        if date is None:
            continue
        for ax in (ax1, ax2):
            ax.axvline(date, color="0.15", ls=marker_styles.get(label, "-."), lw=1.0)
        ax1.text(
            date, ax1.get_ylim()[1], label, rotation=90, fontsize=7,
            ha="right", va="top",
        )

    title = f"{state}: model fit and reproduction rate"
    if not converged:
        title += "  [NOT CONVERGED]"
        ax1.annotate(
            "chains did not converge; intervals unreliable",
            xy=(0.02, 0.02), xycoords="axes fraction", fontsize=8, color="#a02020",
        )
    ax1.set_title(title)
    ax2.xaxis.set_major_formatter(mdates.DateFormatter("%b %d"))
    fig.tight_layout()
    _save(
        fig,
        path,
        {
            "kind": "state_fit",
            "state": state,
            "dates": [str(d) for d in dates],
            "observed": np.asarray(observed),
            "death_bands": death_bands,
            "rt_bands": rt_bands,
            "markers": {k: (str(v) if v is not None else None) for k, v in markers.items()},
            "converged": converged,
        },
    )

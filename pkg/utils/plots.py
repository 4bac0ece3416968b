"""Per-step error figures.

SVGs come from matplotlib with a fixed hash salt and no date stamp, so
the same record always produces the same bytes. The HTML report is a
plotly figure with a fixed div id.
"""
import logging
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import plotly.graph_objects as go  # noqa: E402
from plotly.subplots import make_subplots  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_FLOOR = 1e-18
CURVES = {
    "mismatch": ("mismatch_l2", "noise mismatch (L2)"),
    "deviation": ("deviation_l2", "trajectory deviation (L2)"),
}


def mean_curves(steps: pd.DataFrame, column: str) -> pd.DataFrame:
    """Instance-averaged curve per strategy, clamped at PLOT_FLOOR for log axes."""
    curves = (steps.dropna(subset=[column])
              .groupby(["strategy", "step"], sort=False)[column].mean()
              .reset_index())
    curves[column] = np.maximum(curves[column].to_numpy(dtype=np.float64), PLOT_FLOOR)
    return curves


def write_svg_curves(steps: pd.DataFrame, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context({"svg.hashsalt": "invlab", "svg.fonttype": "path"}):
        for name, (column, label) in CURVES.items():
            curves = mean_curves(steps, column)
            fig, ax = plt.subplots(figsize=(6.4, 4.0))
            for strategy, curve in curves.groupby("strategy", sort=False):
                ax.plot(curve["step"], curve[column], label=strategy, linewidth=1.2)
            ax.set_yscale("log")
            ax.set_ylim(bottom=PLOT_FLOOR / 2)
            ax.set_xlabel("step index t")
            ax.set_ylabel(label)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / f"{name}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written


def write_html_report(record, steps: pd.DataFrame, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig = make_subplots(rows=1, cols=2, subplot_titles=[label for _, label in CURVES.values()])
    for col, (column, _) in enumerate(CURVES.values(), start=1):
        curves = mean_curves(steps, column)
        for strategy, curve in curves.groupby("strategy", sort=False):
            fig.add_trace(
                go.Scatter(x=curve["step"].tolist(), y=curve[column].tolist(), mode="lines",
                           name=strategy, legendgroup=strategy, showlegend=(col == 1)),
                row=1, col=col,
            )
        fig.update_yaxes(type="log", row=1, col=col)
        fig.update_xaxes(title_text="step index t", row=1, col=col)
    fig.update_layout(title=f"run {record.run_id} {record.preset}".strip(), template="plotly_white")
    path = out_dir / "report.html"
    fig.write_html(path, include_plotlyjs="cdn", div_id="invlab-report", full_html=True)
    logger.debug("html report written to %s", path)
    return path

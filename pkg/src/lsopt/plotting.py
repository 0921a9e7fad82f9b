"""Figure rendering for convergence reports and adaptive meshes."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_CURVES = (
    ("estLSQ", "estimator"),
    ("errState", r"state error"),
    ("errAdjoint", r"adjoint error"),
    ("errU", r"control error"),
    ("errU0", r"initial-control error"),
)


def render_convergence(columns, path, title=None, reference_slope=-0.5):
    """Log-log convergence plot of a parsed data file; returns the path.

    columns is a dict of arrays as produced by experiments.parse_datafile;
    a dashed reference line with the given slope (vs dofs) is added.
    """
    dofs = np.asarray(columns["dofLSQ"], dtype=float)
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    anchor = None
    for key, label in _CURVES:
        vals = np.asarray(columns.get(key, []), dtype=float)
        if vals.size == 0 or np.all(np.isnan(vals)):
            continue
        ax.loglog(dofs, vals, marker="o", markersize=3.5, label=label)
        if anchor is None:
            anchor = vals
    if anchor is not None and reference_slope is not None and dofs.size > 1:
        ref = anchor[0] * (dofs / dofs[0]) ** reference_slope
        ax.loglog(dofs, ref, "k--", linewidth=1.0,
                  label=f"slope {reference_slope:g}")
    ax.set_xlabel("degrees of freedom")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_mesh(mesh, path, values=None, title=None):
    """Triangulation plot, optionally coloured by an elementwise field."""
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    if values is not None:
        tpc = ax.tripcolor(x, y, mesh.elements, facecolors=np.asarray(values), cmap="viridis")
        fig.colorbar(tpc, ax=ax, shrink=0.8)
        ax.triplot(x, y, mesh.elements, color="black", linewidth=0.2)
    else:
        ax.triplot(x, y, mesh.elements, color="tab:blue", linewidth=0.5)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def default_figure_path(out_path):
    base = str(out_path)
    if "." in base.rsplit("/", 1)[-1]:
        base = base.rsplit(".", 1)[0]
    return base + ".png"

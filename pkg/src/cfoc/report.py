"""Figure rendering for run reports.

Figures are written next to the delimited outputs of each run directory:
a phase-plane scatter of factual/counterfactual pairs (glucose against serum
insulin for the glucose model, first/last state generally) and state/control
traces for recovered trajectories.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .extraction import CounterfactualPair, SimTrajectory


def phase_plane_figure(pairs: list[CounterfactualPair], path: Path,
                       axis_names: tuple[str, str] = ("G", "I"),
                       boundaries: tuple[float, ...] = (80.0, 126.0),
                       title: str | None = None) -> None:
    """Factuals (red) against counterfactuals (blue) with pairing segments
    and the safe-set boundary dashed."""
    fig, ax = plt.subplots(figsize=(7.0, 5.0))
    for p in pairs:
        fx, fy = p.factual[0], p.factual[-1]
        cx, cy = p.counterfactual[0], p.counterfactual[-1]
        ax.plot([fx, cx], [fy, cy], color="0.8", lw=0.8, zorder=1)
    fx = [p.factual[0] for p in pairs]
    fy = [p.factual[-1] for p in pairs]
    cx = [p.counterfactual[0] for p in pairs]
    cy = [p.counterfactual[-1] for p in pairs]
    ax.scatter(fx, fy, c="tab:red", s=28, label="factual", zorder=3)
    ax.scatter(cx, cy, c="tab:blue", s=28, label="counterfactual", zorder=3)
    for boundary in boundaries:
        ax.axvline(boundary, color="k", ls="--", lw=1.0)
    ax.set_xlabel(axis_names[0])
    ax.set_ylabel(axis_names[1])
    if title:
        ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def comparison_figure(known: list[CounterfactualPair],
                      robust: list[CounterfactualPair], path: Path,
                      axis_names: tuple[str, str] = ("G", "I"),
                      boundaries: tuple[float, ...] = (80.0, 126.0)) -> None:
    """Matched factuals with known-system (yellow) and parameter-robust
    (blue) counterfactuals."""
    fig, ax = plt.subplots(figsize=(7.0, 5.0))
    for p, q in zip(known, robust):
        ax.plot([p.factual[0], p.counterfactual[0]],
                [p.factual[-1], p.counterfactual[-1]], color="0.85", lw=0.8, zorder=1)
        ax.plot([q.factual[0], q.counterfactual[0]],
                [q.factual[-1], q.counterfactual[-1]], color="0.85", lw=0.8, zorder=1)
    ax.scatter([p.factual[0] for p in known], [p.factual[-1] for p in known],
               c="tab:red", s=28, label="factual", zorder=3)
    ax.scatter([p.counterfactual[0] for p in known],
               [p.counterfactual[-1] for p in known],
               c="gold", edgecolors="k", linewidths=0.4, s=30,
               label="counterfactual (known)", zorder=3)
    ax.scatter([q.counterfactual[0] for q in robust],
               [q.counterfactual[-1] for q in robust],
               c="tab:blue", s=30, label="counterfactual (robust)", zorder=3)
    for boundary in boundaries:
        ax.axvline(boundary, color="k", ls="--", lw=1.0)
    ax.set_xlabel(axis_names[0])
    ax.set_ylabel(axis_names[1])
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def trajectory_figure(traj: SimTrajectory, path: Path,
                      state_names: tuple[str, ...] = ()) -> None:
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7.0, 6.0), sharex=True)
    t = traj.times_seconds
    nstates = traj.states.shape[1]
    names = state_names or tuple(f"x{k+1}" for k in range(nstates))
    for k in range(nstates):
        ax1.plot(t, traj.states[:, k], label=names[k])
    ax1.set_ylabel("state")
    ax1.legend(loc="best")
    ax2.step(t, traj.controls[:, 0] if traj.controls.ndim > 1 else traj.controls,
             where="post", color="tab:purple")
    ax2.set_ylabel("control")
    ax2.set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)

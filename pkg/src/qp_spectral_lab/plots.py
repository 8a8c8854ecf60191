"""
Static SVG plots. Output is byte-stable: the SVG hash salt is fixed and no
date is written into the file.
"""

import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib import pyplot as plt  # noqa: E402

from qp_spectral_lab.constants import LOG_FLOOR, SVG_HASH_SALT  # noqa: E402
from qp_spectral_lab.ldt import BadSetEstimate  # noqa: E402
from qp_spectral_lab.spectral import EigenBranch, EigenSystem, LocalizationProfile  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = SVG_HASH_SALT


class Figsize:
    NORMAL = (5.0, 3.75)
    WIDE = (7.0, 3.75)


def savefig(path: Path, figure: plt.Figure, config_hash: str) -> Path:
    """Write a figure as SVG with the config hash in its description and close it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    logger.debug(f"Saving svg {path}")
    figure.savefig(
        path,
        format="svg",
        bbox_inches="tight",
        metadata={"Date": None, "Description": f"config_hash={config_hash}"},
    )
    plt.close(figure)
    return path


def ldt_heatmap(path: Path, estimates: Sequence[BadSetEstimate], thetas: np.ndarray, config_hash: str) -> Path:
    """
    Failure indicator over the phase grid, one row per energy. One-dimensional
    grids are sorted by θ; higher-dimensional grids keep their sampling order.
    """
    thetas = np.atleast_2d(thetas)
    order = np.argsort(thetas[:, 0], kind="stable") if thetas.shape[1] == 1 else np.arange(len(thetas))
    image = np.asarray([estimate.indicator[order] for estimate in estimates], dtype=float)
    energies = [estimate.energy for estimate in estimates]

    figure, ax = plt.subplots(figsize=Figsize.WIDE)
    extent = (0.0, 1.0, -0.5, len(energies) - 0.5) if thetas.shape[1] == 1 else None
    ax.imshow(image, aspect="auto", origin="lower", cmap="Greys", vmin=0.0, vmax=1.0, extent=extent, interpolation="nearest")
    ax.set_yticks(range(len(energies)))
    ax.set_yticklabels([f"{e:.3g}" for e in energies])
    ax.set_xlabel(r"$\theta$" if thetas.shape[1] == 1 else "phase sample")
    ax.set_ylabel("$E$")
    if estimates:
        ax.set_title(f"Failing phases at N={estimates[0].scale}")
    return savefig(path, figure, config_hash)


def branch_curves(path: Path, branches: Sequence[EigenBranch], config_hash: str) -> Path:
    """Eigen-branches θ ↦ E(θ)."""
    figure, ax = plt.subplots(figsize=Figsize.NORMAL)
    for branch in branches:
        ax.plot(branch.thetas, branch.energies, linewidth=0.8)
    ax.set_xlabel(r"$\theta$")
    ax.set_ylabel(r"$E(\theta)$")
    if branches:
        ax.set_title(f"{len(branches)} branches at N={branches[0].scale}")
    return savefig(path, figure, config_hash)


def decay_profiles(
    path: Path,
    system: EigenSystem,
    profiles: Sequence[LocalizationProfile],
    config_hash: str,
) -> Path:
    """log|φ(n)| against |n - center|^γ, with the fitted line of each profile."""
    op = system.operator
    gamma = op.spec.gamma
    figure, ax = plt.subplots(figsize=Figsize.NORMAL)
    for profile in profiles:
        vector = np.abs(system.vector(profile.index))
        distances = np.abs(op.sites - np.asarray(profile.center)[None, :]).max(axis=1).astype(float) ** gamma
        log_values = np.log(np.maximum(vector, LOG_FLOOR))
        (points,) = ax.plot(distances, log_values, ".", markersize=2, label=f"s={profile.index}")
        line = np.linspace(0.0, float(distances.max()), 2)
        ax.plot(line, float(log_values.max()) - profile.rate * line, "-", linewidth=0.6, color=points.get_color())
    ax.set_xlabel(r"$|n - c|^\gamma$")
    ax.set_ylabel(r"$\log|\varphi(n)|$")
    if profiles:
        ax.legend(fontsize="small")
    return savefig(path, figure, config_hash)

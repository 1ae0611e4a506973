"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["axes.grid"] = True
plt.rcParams["figure.autolayout"] = True
plt.rcParams["font.size"] = 10.0
plt.rcParams["legend.fontsize"] = "small"


def _save(fig, path: Path) -> str:
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path.name


def check_margins(results, path: Path) -> str:
    """measured / tolerance per check family, one marker per result."""
    groups = defaultdict(list)
    for r in results:
        if r.tolerance > 0 and np.isfinite(r.measured):
            groups[r.check].append(max(r.measured / r.tolerance, 1e-18))
    names = sorted(groups)
    fig, ax = plt.subplots(figsize=(8, max(3, 0.22 * len(names))))
    for i, name in enumerate(names):
        vals = groups[name]
        ax.scatter(vals, [i] * len(vals), s=10, color="tab:blue")
    ax.axvline(1.0, color="tab:red", lw=1)
    ax.set_xscale("log")
    ax.set_yticks(range(len(names)), names, fontsize=7)
    ax.set_xlabel("measured / tolerance")
    return _save(fig, path)


def convergence(study, sub, path: Path) -> str:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    dt = np.asarray(study["dt"])
    for name, errs in study["errors"].items():
        errs = np.asarray(errs)
        if np.all(errs <= 1e-12):
            continue
        order = study["orders"][name]
        a1.loglog(dt, errs, "o-", ms=3, label=f"{name} ({order:.2f})")
    a1.loglog(dt, dt * 0.1, "k--", lw=0.8, label="slope 1")
    a1.set_xlabel("dt")
    a1.set_ylabel("error")
    a1.legend(fontsize=6, ncol=2)
    h = np.asarray(sub["h"])
    a2.loglog(h, sub["errors"], "o-", label=f"Riccati RK4 ({sub['order']:.2f})")
    a2.loglog(h, (h / h[0]) ** 4 * sub["errors"][0], "k--", lw=0.8, label="slope 4")
    a2.set_xlabel("substep h")
    a2.legend()
    return _save(fig, path)


def riccati(extra, path: Path) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    t = extra["times"]
    ax.fill_between(t, extra["P_min_eig"], extra["P_max_eig"], alpha=0.3, label="spectrum of P")
    if "oracle" in extra:
        ax.plot(t, extra["P_vacuum"], "o", label="P vacuum entry")
        ax.plot(t, extra["oracle"], "-", label="scalar oracle")
    ax.set_xlabel("t")
    ax.legend()
    return _save(fig, path)


def simulation(extra, path: Path) -> str:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    t = extra["times"]
    a1.plot(t, extra["x_norm"], "o-")
    a1.set_xlabel("t")
    a1.set_ylabel("|x|")
    a2.step(t[:-1], extra["u_norm"], where="post", label=f"feedback J={extra['J_closed']:.4g}")
    a2.step(t[:-1], extra["u_qp_norm"], where="post", ls="--", label=f"open loop J={extra['J_qp']:.4g}")
    a2.set_xlabel("t")
    a2.set_ylabel("|u|")
    a2.legend()
    return _save(fig, path)


def render(command: str, results, extra, out: Path) -> list[str]:
    out = Path(out)
    names = [check_margins(results, out / "check_margins.png")]
    if command == "converge":
        names.append(convergence(extra["study"], extra["substeps"], out / "convergence.png"))
    elif command == "solve-riccati" and extra:
        names.append(riccati(extra, out / "riccati.png"))
    elif command == "simulate" and extra:
        names.append(simulation(extra, out / "simulation.png"))
    return names

"""Deterministic static SVG plots for experiment reports."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {
    "svg.hashsalt": "arma-bayes",
    "svg.fonttype": "none",
    "path.simplify": False,
}


def _save_svg(fig, path):
    from .harness import atomic_write

    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def dominance_plot(rows, h_name: str, path: str) -> None:
    """Left: n * risk per prior.  Right: n^2 * paired difference with the asymptote."""
    with plt.rc_context(_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
        ns = [r.n for r in rows]
        ax1.errorbar(ns, [r.n * r.risk_jeffreys for r in rows],
                     yerr=[2 * r.n * r.risk_jeffreys_se for r in rows],
                     marker="o", capsize=3, label="Jeffreys")
        ax1.errorbar(ns, [r.n * r.risk_h for r in rows],
                     yerr=[2 * r.n * r.risk_h_se for r in rows],
                     marker="s", capsize=3, label=f"Jeffreys x {h_name}")
        ax1.set_xscale("log", base=2)
        ax1.set_xlabel("n")
        ax1.set_ylabel("n x KL risk")
        ax1.legend()
        ax2.errorbar(ns, [r.n2_diff for r in rows], yerr=[2 * r.n2_diff_se for r in rows],
                     marker="o", capsize=3, color="C2", label="n^2 x paired difference")
        ax2.axhline(rows[0].asymptote, color="k", ls="--", label="asymptote")
        ax2.set_xscale("log", base=2)
        ax2.set_xlabel("n")
        ax2.legend()
        fig.tight_layout()
        _save_svg(fig, path)

"""Figure rendering for experiment reports (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_METHOD_STYLE = {
    "MSE": dict(color="black", linestyle="--", marker="s"),
    "SURE": dict(color="tab:orange", linestyle="-", marker="^"),
    "SURE*": dict(color="tab:red", linestyle="-", marker="v"),
    "N2N": dict(color="tab:blue", linestyle="-", marker="o"),
    "eSURE": dict(color="tab:green", linestyle="-", marker="D"),
}


def render_experiment_figure(results, path, campaign_kind: str) -> None:
    """PSNR-vs-sigma_gt lines for sweeps, a method bar chart otherwise."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    sigma_noisy = results[0].sigma_noisy_255 if results else 0.0

    if campaign_kind == "imperfect_gt_sweep":
        methods = sorted({r.method for r in results})
        for method in methods:
            rows = sorted(
                [r for r in results if r.method == method], key=lambda r: r.sigma_gt_255
            )
            ax.errorbar(
                [r.sigma_gt_255 for r in rows],
                [r.psnr_mean_db for r in rows],
                yerr=[r.psnr_std_db for r in rows],
                capsize=3, label=method, **_METHOD_STYLE.get(method, {}),
            )
        ax.set_xlabel(r"ground-truth noise $\sigma_{gt}$ (0-255 units)")
        ax.set_ylabel("test PSNR (dB)")
        ax.set_title(f"Imperfect ground truth, $\\sigma_{{noisy}}$ = {sigma_noisy:g}")
        ax.legend()
    else:
        rows = sorted(results, key=lambda r: r.method)
        labels = [r.method for r in rows]
        values = [r.psnr_mean_db for r in rows]
        errors = [r.psnr_std_db for r in rows]
        colors = [_METHOD_STYLE.get(m, {}).get("color", "gray") for m in labels]
        ax.bar(labels, values, yerr=errors, capsize=4, color=colors)
        span = max(values) - min(values)
        ax.set_ylim(min(values) - max(3 * span, 0.5), max(values) + max(span, 0.25))
        ax.set_ylabel("test PSNR (dB)")
        ax.set_title(f"Two independent realizations, $\\sigma$ = {sigma_noisy:g}")

    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)

"""Figures and a short markdown summary from a finished run directory."""

from __future__ import annotations

import json
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ReportError  # noqa: E402
from .evaluation import CLASSES, DIRECTIONS  # noqa: E402

_LABELS = {
    "target_pushed_to": "target, pushed-to",
    "random_pushed_to": "random, pushed-to",
    "target_pushed_away": "target, pushed-away",
    "random_pushed_away": "random, pushed-away",
    "third_language": "third language",
}


def _load(path: Path):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path}: {exc}") from exc


def plot_trace(trace: dict, path: Path) -> Path:
    pts = trace["trace"]
    ms = [p["m"] for p in pts]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(ms, [p["classifier_acc"] for p in pts], "o-", label="language-ID accuracy")
    ax.plot(ms, [p["mlm_topk"] for p in pts], "s-", label=f"MLM top-{trace['k']}")
    ax.axhline(trace["threshold"], color="grey", lw=0.8, ls=":")
    ax.axvline(trace["chosen_m"], color="grey", lw=0.8, ls="--")
    ax.set_xlabel("INLP iterations")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_deltas(metrics: dict, path: Path) -> Path:
    rows = {(r["template_dir"], r["candidate_class"]): r for r in metrics["rows"]}
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharey=True)
    for ax, d in zip(axes, DIRECTIONS):
        vals = [rows[(d, c)]["mean_delta_logp"] if (d, c) in rows else 0.0 for c in CLASSES]
        colors = ["tab:green" if v >= 0 else "tab:red" for v in vals]
        ax.bar(range(len(CLASSES)), vals, color=colors)
        ax.axhline(0, color="black", lw=0.6)
        ax.set_xticks(range(len(CLASSES)))
        ax.set_xticklabels([_LABELS[c] for c in CLASSES], rotation=30, ha="right", fontsize=8)
        ax.set_title(f"{d} push, alpha={metrics['alpha']:g}, m={metrics['iterations']}", fontsize=9)
    axes[0].set_ylabel("mean change in log p")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_alpha(sweep: List[dict], path: Path) -> Path:
    alphas = [s["alpha"] for s in sweep]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for cls in CLASSES:
        prop, mean = [], []
        for s in sweep:
            r = next(r for r in s["rows"] if r["template_dir"] == "opposite" and r["candidate_class"] == cls)
            prop.append(r["proportion_expected"])
            mean.append(r["mean_delta_logp"])
        ax1.plot(alphas, prop, "o-", label=_LABELS[cls])
        ax2.plot(alphas, mean, "o-", label=_LABELS[cls])
    ax1.set_xlabel("alpha")
    ax1.set_ylabel("proportion in expected direction")
    ax2.set_xlabel("alpha")
    ax2.set_ylabel("mean change in log p")
    ax2.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _table(metrics: dict) -> str:
    lines = ["| push | class | proportion expected | mean change | median abs change | ties | n |",
             "|---|---|---|---|---|---|---|"]
    for r in metrics["rows"]:
        lines.append(
            f"| {r['template_dir']} | {r['candidate_class']} | {r['proportion_expected']:.3f} "
            f"| {r['mean_delta_logp']:+.3f} | {r['median_abs_delta_logp']:.3f} | {r['n_ties']} | {r['n']} |"
        )
    return "\n".join(lines)


def emit_report(run_dir) -> List[Path]:
    """Render every figure the run has data for, plus ``report.md``."""
    run = Path(run_dir)
    sources = {n: run / n for n in ("trace.json", "metrics.json", "alpha_sweep.json")}
    present = {n: p for n, p in sources.items() if p.exists()}
    if not present:
        raise ReportError(f"{run} holds no trace, metrics or alpha sweep to report")
    fig_dir = run / "figures"
    try:
        fig_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(str(exc)) from exc
    written: List[Path] = []
    parts = ["# Run report", ""]
    if "trace.json" in present:
        trace = _load(present["trace.json"])
        written.append(plot_trace(trace, fig_dir / "trace.png"))
        parts += [f"Chosen iterations: {trace['chosen_m']} (MLM top-{trace['k']} threshold {trace['threshold']})",
                  "", "![trace](figures/trace.png)", ""]
    if "metrics.json" in present:
        metrics = _load(present["metrics.json"])
        written.append(plot_deltas(metrics, fig_dir / "delta_logp.png"))
        parts += [f"## Shifts at alpha={metrics['alpha']:g}, m={metrics['iterations']}, "
                  f"{metrics['items']} items", "", _table(metrics), "", "![deltas](figures/delta_logp.png)", ""]
    if "alpha_sweep.json" in present:
        written.append(plot_alpha(_load(present["alpha_sweep.json"]), fig_dir / "alpha_sweep.png"))
        parts += ["## Alpha sweep (opposite push)", "", "![alpha](figures/alpha_sweep.png)", ""]
    completions = run / "completions.txt"
    if completions.exists():
        parts += ["## Top completions", "", "```", completions.read_text().rstrip(), "```", ""]
    md = run / "report.md"
    md.write_text("\n".join(parts))
    written.append(md)
    return written

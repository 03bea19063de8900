"""Render a ComparisonReport to markdown, CSV and SVG figures.

Rendering is deterministic: the same report produces byte-identical files
on every run (the SVG hash salt is pinned and date metadata is dropped),
so downstream diffs only ever show real changes.
"""

from __future__ import annotations

import io
from pathlib import Path

from .evalstats import ComparisonReport

__all__ = ["markdown_report", "quartiles_csv", "render_report"]

_SVG_SALT = "seqdevid"


def markdown_report(report: ComparisonReport) -> str:
    archs = report.architectures
    out = io.StringIO()
    w = out.write

    w("# Architecture comparison\n\n")
    w(f"{len(archs)} architectures, {report.repeats} repeats each "
      f"({len(archs) * report.repeats} training runs).\n\n")

    w("## Mean test accuracy\n\n")
    w("| " + " | ".join([""] + list(archs)).strip() + " |\n")
    w("|---" * (len(archs) + 1) + "|\n")
    w("| mean | " + " | ".join(f"{report.means[a]:.3f}" for a in archs) + " |\n\n")

    w("## Accuracy distribution\n\n")
    w("| architecture | min | q1 | median | q3 | max |\n")
    w("|---|---|---|---|---|---|\n")
    for a in archs:
        q = report.quartiles[a]
        w(f"| {a} | " + " | ".join(
            f"{q[k]:.3f}" for k in ("min", "q1", "median", "q3", "max")) + " |\n")
    w("\n")

    w("## Significance\n\n")
    anova = report.anova
    verdict = "significant" if anova.p_value < report.alpha_anova else "not significant"
    w(f"One-way ANOVA: F({anova.df_between}, {anova.df_within}) = "
      f"{anova.f_stat:.3f}, p = {anova.p_value:.3g}; {verdict} at "
      f"alpha = {report.alpha_anova:g}.\n\n")

    w(f"Pairwise Mann-Whitney U tests, two-sided, Bonferroni-corrected "
      f"threshold {report.alpha_pairwise:.4f}:\n\n")
    w(f"| comparison | U | p-value | significant at {report.alpha_pairwise:.4f} |\n")
    w("|---|---|---|---|\n")
    for pair in report.pairwise:
        w(f"| {pair.a} vs {pair.b} | {pair.u_stat:g} | {pair.p_value:.3g} | "
          f"{'yes' if pair.significant else 'no'} |\n")
    return out.getvalue()


def quartiles_csv(report: ComparisonReport) -> str:
    lines = ["architecture,mean,min,q1,median,q3,max"]
    for a in report.architectures:
        q = report.quartiles[a]
        cells = [a, f"{report.means[a]:.6f}"] + [
            f"{q[k]:.6f}" for k in ("min", "q1", "median", "q3", "max")]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _save_deterministic(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def _boxplot(report: ComparisonReport, path: Path, plt) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    archs = report.architectures
    ax.boxplot([report.runs[a] for a in archs])
    ax.set_xticks(range(1, len(archs) + 1))
    ax.set_xticklabels(archs, rotation=15)
    ax.set_ylabel("test accuracy")
    ax.set_title(f"Accuracy over {report.repeats} repeats")
    fig.tight_layout()
    _save_deterministic(fig, path)
    plt.close(fig)


def _mean_bars(report: ComparisonReport, path: Path, plt) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    archs = report.architectures
    ax.bar(range(len(archs)), [report.means[a] for a in archs], width=0.6)
    ax.set_xticks(range(len(archs)))
    ax.set_xticklabels(archs, rotation=15)
    ax.set_ylabel("mean test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("Mean accuracy by architecture")
    fig.tight_layout()
    _save_deterministic(fig, path)
    plt.close(fig)


def render_report(report: ComparisonReport, out_dir) -> list[Path]:
    """Write report.md, quartiles.csv and the two SVG figures into out_dir."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = _SVG_SALT

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md = out_dir / "report.md"
    md.write_text(markdown_report(report))
    csv_path = out_dir / "quartiles.csv"
    csv_path.write_text(quartiles_csv(report))
    box = out_dir / "accuracy_boxplot.svg"
    _boxplot(report, box, plt)
    bars = out_dir / "mean_accuracy.svg"
    _mean_bars(report, bars, plt)
    return [md, csv_path, box, bars]

"""Figures for ``pocket analyze --figures``.

Rendered with the Agg backend so they work headless; one PNG per figure.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from pocket.trace import DatasetSummary  # noqa: E402

_COLORS = {"valid_block": "#2b8a3e", "schema_fail": "#c92a2a", "no_action": "#868e96", "other": "#f08c00"}

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
        "svg.hashsalt": "pocket",
    }
)


def _labels(summary: DatasetSummary) -> list[tuple[str, str]]:
    return sorted(summary.configurations)


def outcome_bars(summary: DatasetSummary, path: Path) -> Path:
    keys = _labels(summary)
    names = [f"{a}\n{b}" for a, b in keys]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(keys)), 3.0))
    bottom = [0] * len(keys)
    for idx, label in enumerate(("valid_block", "schema_fail", "no_action", "other")):
        vals = []
        for a, b in keys:
            t = summary.configurations[(a, b)]
            vals.append(t.other if label == "other" else t.bsn[idx])
        if not any(vals):
            continue
        ax.bar(names, vals, bottom=bottom, color=_COLORS[label], label=label, width=0.6)
        bottom = [x + y for x, y in zip(bottom, vals)]
    ax.set_ylabel("trials")
    ax.legend(frameon=False, fontsize=7, ncol=2)
    ax.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def delta_strip(summary: DatasetSummary, path: Path) -> Path:
    """Per-trial prompt-to-block latency, with the configuration mean as a bar."""
    keys = [k for k in _labels(summary) if summary.configurations[k].deltas]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(keys)), 3.0))
    for i, k in enumerate(keys):
        t = summary.configurations[k]
        ax.scatter([i] * len(t.deltas), t.deltas, s=14, color="#1c7ed6", zorder=3)
        ax.hlines(t.mean_delta, i - 0.25, i + 0.25, color="black", lw=1)
    ax.set_xticks(range(len(keys)), [f"{a}\n{b}" for a, b in keys], fontsize=7)
    ax.set_ylabel("first prompt to block (s)")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def render(summary: DatasetSummary, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [outcome_bars(summary, out / "outcomes.png"), delta_strip(summary, out / "delta.png")]

"""Report assembly and emission: CSV score tables, robustness tables, charts
(per-class score deltas ordered by average event duration, duration
histogram, tag-injection degradation for selected classes), and one
machine-readable JSON summary that round-trips losslessly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt   # noqa: E402
import numpy as np                # noqa: E402


@dataclass
class Report:
    class_names: list[str]
    class_avg_duration: dict[str, float]
    rows: list[dict]                        # score-table rows w/ mean + per_seed
    robustness: dict[str, dict] = field(default_factory=dict)      # split -> probe
    leave_one_out: dict[str, dict] = field(default_factory=dict)   # scenario -> deltas
    per_class_delta: dict[str, dict[str, float]] = field(default_factory=dict)
    seeds: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls(**json.loads(text))


SCORE_COLUMNS = ("psds1_star", "psds2_star", "f", "precision", "recall")


def _check_writable(out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    probe = os.path.join(out_dir, ".write_probe")
    try:
        with open(probe, "w") as f:
            f.write("ok")
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"report directory {out_dir!r} is not writable: {exc}") from exc


def write_score_table(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("captions,split,eval_text," + ",".join(SCORE_COLUMNS) + "\n")
        for row in rows:
            cap = "yes" if row["captions"] else "no"
            cells = [f"{row['mean'].get(c, float('nan')):.4f}" for c in SCORE_COLUMNS]
            f.write(f"{cap},{row['split']},{row['eval_text']}," + ",".join(cells) + "\n")


def write_robustness_table(path: str, robustness: dict[str, dict]) -> None:
    """One row per split scenario, one column per injected-tag count."""
    all_n = sorted({n for probe in robustness.values() for n in probe["n"]})
    with open(path, "w", encoding="utf-8") as f:
        f.write("split," + ",".join(f"n={n}" for n in all_n) + "\n")
        for split in sorted(robustness):
            probe = robustness[split]
            by_n = dict(zip(probe["n"], probe["mean"]))
            f.write(split + "," +
                    ",".join(f"{by_n.get(n, float('nan')):.4f}" for n in all_n) + "\n")


def _duration_order(report: Report) -> list[str]:
    return sorted(report.class_names, key=lambda c: report.class_avg_duration.get(c, 0.0))


def plot_per_class_delta(path: str, report: Report) -> None:
    order = _duration_order(report)
    fig, ax = plt.subplots(figsize=(8, 4))
    markers = {"100/0": ("o", "tab:blue"), "50/50": ("s", "tab:red")}
    for split, deltas in sorted(report.per_class_delta.items()):
        marker, color = markers.get(split, ("x", "tab:gray"))
        ax.plot(range(len(order)), [deltas.get(c, np.nan) for c in order],
                marker, color=color, label=split)
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.set_xticks(range(len(order)))
    ax.set_xticklabels(order, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("PSDS-1* delta (text - baseline)")
    ax.set_title("Per-class change, classes ordered by average event duration")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_duration_histogram(path: str, report: Report) -> None:
    durations = [report.class_avg_duration.get(c, 0.0) for c in report.class_names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(durations, bins=10, color="tab:blue", edgecolor="black")
    ax.axvline(2.0, color="tab:red", ls="--", lw=1.0, label="2 s")
    ax.set_xlabel("average event duration (s)")
    ax.set_ylabel("classes")
    ax.set_title("Average event duration per class")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def selected_classes(report: Report, n_each: int = 2) -> list[str]:
    """The longest and shortest duration classes, for degradation charts."""
    order = _duration_order(report)
    return order[:n_each] + order[-n_each:]


def plot_injection_degradation(path: str, report: Report) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    picked = selected_classes(report)
    styles = {"100/0": "-", "50/50": "--"}
    for split, probe in sorted(report.robustness.items()):
        per_class = probe.get("per_class", {})
        for cls in picked:
            ys = [per_class.get(str(n), {}).get(cls, np.nan) for n in probe["n"]]
            ax.plot(probe["n"], ys, styles.get(split, ":"), marker="o", ms=3,
                    label=f"{cls} ({split})")
    ax.set_xlabel("number of incorrect tags")
    ax.set_ylabel("per-class PSDS-1*")
    ax.set_title("Effect of injected incorrect tags, selected classes")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(report: Report, out_dir: str) -> list[str]:
    """Write tables, figures, and the JSON summary; returns the paths written.

    The directory is probed for writability before anything is written.
    """
    _check_writable(out_dir)
    written = []

    def target(name: str) -> str:
        written.append(name)
        return os.path.join(out_dir, name)

    write_score_table(target("scores.csv"), report.rows)
    if report.robustness:
        write_robustness_table(target("tag_injection.csv"), report.robustness)
        plot_injection_degradation(target("tag_injection_selected.png"), report)
    plot_per_class_delta(target("per_class_delta.png"), report)
    plot_duration_histogram(target("avg_event_duration.png"), report)
    with open(target("summary.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json())
    with open(target("files.json"), "w", encoding="utf-8") as f:
        json.dump(sorted(written), f, indent=1)
    return [os.path.join(out_dir, name) for name in written]

"""End-to-end runs: generate data, train the tokenizer, train the scenario
grid, evaluate, probe robustness, and emit the report, all under one run
directory and reproducible from a single master seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import replace

import numpy as np

from .harness import (DataPack, ExperimentProfile, ScenarioConfig, desk_profile,
                      leave_one_out, load_data_pack, generate_dataset,
                      run_scenario, tag_robustness, train_tokenizer)
from .model import load_model
from .reporting import Report, emit_report
from .scenes import class_avg_durations, load_manifest
from .seeding import int_seed


def default_grid(n_seeds: int, eval_texts=("none", "tags", "short", "verbose")) -> list[ScenarioConfig]:
    """The 12-row grid: {plain, caption-trained} x {100/0, 50/50}; plain
    scenarios evaluate text-free and with short captions, caption-trained
    ones under every text type."""
    grid = []
    for split in ("100/0", "50/50"):
        grid.append(ScenarioConfig(split=split, train_captions=False,
                                   eval_texts=("none", "short"), n_seeds=n_seeds))
        grid.append(ScenarioConfig(split=split, train_captions=True,
                                   eval_texts=tuple(eval_texts), n_seeds=n_seeds))
    return grid


def run_pipeline(run_dir: str, master_seed: int, profile: ExperimentProfile,
                 grid: list[ScenarioConfig] | None = None,
                 robustness_n=range(6), robustness_trials: int = 5) -> Report:
    """generate -> tokenize -> train grid -> evaluate -> probe -> report."""
    os.makedirs(run_dir, exist_ok=True)
    data_dir = os.path.join(run_dir, "data")
    if not os.path.exists(os.path.join(data_dir, "train.jsonl")):
        generate_dataset(data_dir, profile, master_seed)
    vocab_path = os.path.join(run_dir, "vocab.txt")
    if not os.path.exists(vocab_path):
        train_tokenizer(data_dir, vocab_path, profile.vocab_size)
    pack = load_data_pack(data_dir, vocab_path)

    grid = grid if grid is not None else default_grid(profile.n_seeds)
    results = {}
    for scenario in grid:
        out_dir = os.path.join(run_dir, "models", scenario.name)
        results[scenario.name] = run_scenario(scenario, pack, profile, out_dir,
                                              master_seed)

    rows = [row for res in results.values() for row in res["rows"]]

    robustness = {}
    loo = {}
    per_class_delta = {}
    train_records = load_manifest(os.path.join(data_dir, "train.jsonl"))
    durations = class_avg_durations(train_records)
    for split in ("100/0", "50/50"):
        cap_name = ScenarioConfig(split=split, train_captions=True).name
        plain_name = ScenarioConfig(split=split, train_captions=False).name
        if cap_name not in results or not results[cap_name]["models"]:
            continue
        probe_seed = int_seed(master_seed, "robust", 0 if split == "100/0" else 1)
        means, trials_acc, per_class_acc = None, [], {}
        for path in results[cap_name]["models"]:
            model = load_model(path)
            probe = tag_robustness(model, pack, robustness_n, robustness_trials,
                                   seed=probe_seed)
            trials_acc.append(probe["mean"])
            for n, classes in probe["per_class"].items():
                for c, v in classes.items():
                    per_class_acc.setdefault(n, {}).setdefault(c, []).append(v)
            if means is None:
                means = {"n": probe["n"]}
        robustness[split] = {
            "n": means["n"],
            "mean": [float(np.mean([t[i] for t in trials_acc]))
                     for i in range(len(means["n"]))],
            "per_seed": trials_acc,
            "per_class": {n: {c: float(np.mean(v)) for c, v in classes.items()}
                          for n, classes in per_class_acc.items()},
        }
        loo_acc = {"mean_d_precision": [], "mean_d_recall": []}
        for path in results[cap_name]["models"]:
            model = load_model(path)
            probe = leave_one_out(model, pack, seed=probe_seed)
            loo_acc["mean_d_precision"].append(probe["mean_d_precision"])
            loo_acc["mean_d_recall"].append(probe["mean_d_recall"])
        loo[cap_name] = {k: float(np.mean(v)) for k, v in loo_acc.items()}
        loo[cap_name + "_per_seed"] = loo_acc

        # per-class PSDS-1* delta: caption-trained w/ verbose text vs plain baseline
        if plain_name in results and results[plain_name]["models"]:
            delta = _per_class_delta(results[cap_name]["models"],
                                     results[plain_name]["models"], pack)
            per_class_delta[split] = delta

    report = Report(
        class_names=pack.class_names,
        class_avg_duration={c: float(v) for c, v in durations.items()},
        rows=rows, robustness=robustness, leave_one_out=loo,
        per_class_delta=per_class_delta,
        seeds=profile.n_seeds)
    emit_report(report, os.path.join(run_dir, "report"))
    _write_outputs_manifest(run_dir)
    return report


def _per_class_delta(cap_paths: list[str], plain_paths: list[str],
                     pack: DataPack) -> dict[str, float]:
    from .harness import _presets, evaluate_model
    per_class: dict[str, list[float]] = {}
    presets = _presets(["psds1_star"])
    for cap_path, plain_path in zip(cap_paths, plain_paths):
        cap = evaluate_model(load_model(cap_path), pack, "verbose", presets)
        plain = evaluate_model(load_model(plain_path), pack, "none", presets)
        cap_areas = cap["rocs"]["psds1_star"].per_class_area()
        plain_areas = plain["rocs"]["psds1_star"].per_class_area()
        for c in pack.class_names:
            per_class.setdefault(c, []).append(
                cap_areas.get(c, 0.0) - plain_areas.get(c, 0.0))
    return {c: float(np.mean(v)) for c, v in per_class.items()}


def _write_outputs_manifest(run_dir: str) -> None:
    paths = []
    for root, _dirs, files in os.walk(run_dir):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), run_dir)
            if rel != "outputs.json":
                paths.append(rel.replace(os.sep, "/"))
    with open(os.path.join(run_dir, "outputs.json"), "w", encoding="utf-8") as f:
        json.dump(sorted(paths), f, indent=1)

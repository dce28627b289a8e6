"""Experiment orchestration: the scenario grid (caption-trained or not,
100/0 or 50/50 strong/weak splits, four evaluation text types), seed
averaging, tag-injection and leave-one-out robustness probes, and report
emission. The CLI is a thin wrapper over these functions.

All artifacts live under one run directory; paths stored in files are
relative to it and nothing embeds timestamps, so a rerun from the same seed
reproduces every byte.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import nncore
from .frontend import load_wav, logmel
from .inference import predict_probs, score_detections
from .metrics import METRIC_PRESETS, Event, PsdsParams
from .model import ModelConfig, SedCrnn, build_model, load_model, pad_token_batch
from .scenes import (CaptionConfig, ClipRecord, SceneConfig,
                     generate_corpus, load_manifest, save_manifest, weaken_labels,
                     build_splits, DEFAULT_INVENTORY)
from .seeding import int_seed, rng_for
from .tokenizer import (Vocabulary, encode, load_vocab, render_tag_text,
                        save_vocab, train_bpe)
from .training import (TrainingConfig, ValPack, build_training_set, train,
                       TrainResult)

EVAL_TEXT_TYPES = ("none", "tags", "short", "verbose")


@dataclass
class ScenarioConfig:
    split: str = "100/0"                    # "100/0" or "50/50"
    train_captions: bool = True
    eval_texts: tuple[str, ...] = EVAL_TEXT_TYPES
    n_seeds: int = 5
    metric_presets: tuple[str, ...] = ("psds1_star", "psds2_star")

    def __post_init__(self):
        if self.split not in ("100/0", "50/50"):
            raise ValueError(f"unknown split {self.split!r}")
        for t in self.eval_texts:
            if t not in EVAL_TEXT_TYPES:
                raise ValueError(f"unknown eval text type {t!r}")

    @property
    def name(self) -> str:
        cap = "cap" if self.train_captions else "plain"
        return f"{cap}_{self.split.replace('/', '-')}"


@dataclass
class ExperimentProfile:
    """Everything that sizes an experiment, bundled and JSON-serializable."""
    name: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    corpus_size: int = 700
    split_sizes: tuple[int, int, int] = (500, 100, 100)
    vocab_size: int = 6000
    train_caption_style: str = "verbose"
    n_seeds: int = 5

    def to_dict(self) -> dict:
        return {"name": self.name, "model": asdict(self.model),
                "training": asdict(self.training), "scene": asdict(self.scene),
                "caption": asdict(self.caption), "corpus_size": self.corpus_size,
                "split_sizes": list(self.split_sizes), "vocab_size": self.vocab_size,
                "train_caption_style": self.train_caption_style, "n_seeds": self.n_seeds}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentProfile":
        return cls(name=d["name"], model=ModelConfig(**d["model"]),
                   training=TrainingConfig(**d["training"]), scene=SceneConfig(**d["scene"]),
                   caption=CaptionConfig(**d["caption"]), corpus_size=d["corpus_size"],
                   split_sizes=tuple(d["split_sizes"]), vocab_size=d["vocab_size"],
                   train_caption_style=d["train_caption_style"], n_seeds=d["n_seeds"])


def spec_default_profile() -> ExperimentProfile:
    """Full-size architecture defaults; too heavy for a single-core box."""
    return ExperimentProfile(name="default", model=ModelConfig(n_classes=10),
                             training=TrainingConfig())


def desk_profile() -> ExperimentProfile:
    """Reduced widths tuned for CPU-only runs; same topology (6 gated blocks,
    2-layer BiGRU, transformer text encoder + single cross-attention)."""
    model = ModelConfig(
        n_classes=10, cnn_channels=(8, 12, 16, 16, 24, 24),
        conv_dropout=0.1, gru_hidden=48, rnn_dropout=0.1,
        text_dim=64, text_layers=2, text_heads=4, text_ffn_mult=2,
        text_dropout=0.1, attn_dim=32, attn_heads=4)
    training = TrainingConfig(steps=400, batch_size=16, lr=1e-3, warmup_steps=60,
                              mix_p=0.25, val_every=64)
    return ExperimentProfile(name="desk", model=model, training=training,
                             corpus_size=700, split_sizes=(500, 100, 100), n_seeds=5)


def tiny_profile() -> ExperimentProfile:
    """Minutes-scale profile for smoke tests and pipeline determinism checks."""
    model = ModelConfig(
        n_classes=10, cnn_channels=(4, 6, 8, 8, 8, 8),
        gru_hidden=16, text_dim=32, text_layers=1, text_heads=2, text_ffn_mult=2,
        attn_dim=16, attn_heads=2)
    training = TrainingConfig(steps=10, batch_size=4, warmup_steps=2, val_every=5)
    return ExperimentProfile(name="tiny", model=model, training=training,
                             corpus_size=30, split_sizes=(18, 6, 6), n_seeds=1)


PROFILES = {"default": spec_default_profile, "desk": desk_profile, "tiny": tiny_profile}


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def compute_features(data_dir: str, records: list[ClipRecord],
                     cache_path: str | None = None) -> dict[str, np.ndarray]:
    """Log-mel features per clip, cached in the checkpoint container format."""
    if cache_path and os.path.exists(cache_path):
        return nncore.load_arrays(cache_path)
    feats = {}
    for r in records:
        w = load_wav(os.path.join(data_dir, r.wav_path))
        feats[r.clip_id] = logmel(w)
    if cache_path:
        nncore.save_arrays(cache_path, feats)
    return feats


@dataclass
class DataPack:
    data_dir: str
    class_names: list[str]
    train: list[ClipRecord]
    val: list[ClipRecord]
    test: list[ClipRecord]
    features: dict[str, np.ndarray]
    vocab: Vocabulary | None = None

    def durations(self, records: list[ClipRecord]) -> dict[str, float]:
        return {r.clip_id: r.duration for r in records}

    def refs(self, records: list[ClipRecord]) -> list[Event]:
        return [e for r in records for e in r.event_list()]


def load_data_pack(data_dir: str, vocab_path: str | None = None) -> DataPack:
    splits = {}
    for name in ("train", "val", "test"):
        path = os.path.join(data_dir, f"{name}.jsonl")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing split manifest {path}")
        splits[name] = load_manifest(path)
    all_records = splits["train"] + splits["val"] + splits["test"]
    class_names = sorted({c for r in all_records for c in r.classes})
    features = compute_features(data_dir, all_records,
                                os.path.join(data_dir, "features.npz"))
    vocab = load_vocab(vocab_path) if vocab_path else None
    return DataPack(data_dir, class_names, splits["train"], splits["val"],
                    splits["test"], features, vocab)


def generate_dataset(data_dir: str, profile: ExperimentProfile, seed: int) -> None:
    """Corpus + class-covering train/val/test split manifests under data_dir."""
    records = generate_corpus(data_dir, profile.corpus_size, seed,
                              DEFAULT_INVENTORY, profile.scene, profile.caption)
    train_r, val_r, test_r = build_splits(records, profile.split_sizes,
                                          int_seed(seed, "splits"))
    for name, recs in (("train", train_r), ("val", val_r), ("test", test_r)):
        save_manifest(os.path.join(data_dir, f"{name}.jsonl"), recs)


def train_tokenizer(data_dir: str, vocab_path: str, vocab_size: int = 6000) -> Vocabulary:
    """BPE over every caption style of the training split."""
    records = load_manifest(os.path.join(data_dir, "train.jsonl"))
    corpus = [r.captions[style] for r in records for style in sorted(r.captions)]
    vocab = train_bpe(corpus, vocab_size)
    save_vocab(vocab_path, vocab)
    return vocab


# ---------------------------------------------------------------------------
# evaluation text rendering
# ---------------------------------------------------------------------------

def render_eval_text(record: ClipRecord, eval_text: str, vocab: Vocabulary,
                     max_text_len: int, text_seed: int, trial: int = 0,
                     clip_index: int = 0, inject: list[str] | None = None,
                     omit: str | None = None) -> list[int] | None:
    """Token ids for one test clip under an evaluation text type.

    "tags" renders the clip's class set (plus injected incorrect tags, minus
    an omitted one) in a trial-seeded shuffled order — the same path the
    robustness probes use, so n=0 injection equals the plain tags evaluation.
    """
    if eval_text == "none":
        return None
    if eval_text in ("short", "verbose"):
        return encode(record.captions[eval_text], vocab, max_text_len)
    if eval_text == "tags":
        names = [c for c in record.classes if c != omit] + list(inject or [])
        if not names:
            return None
        text = render_tag_text(names, shuffle=True,
                               seed=int_seed(text_seed, "tagtext", trial, clip_index))
        return encode(text, vocab, max_text_len)
    raise ValueError(f"unknown eval text type {eval_text!r}")


def eval_token_lists(records: list[ClipRecord], eval_text: str, vocab: Vocabulary | None,
                     max_text_len: int, text_seed: int = 0, trial: int = 0):
    if eval_text == "none":
        return None
    if vocab is None:
        raise ValueError("text evaluation requires a trained vocabulary")
    return [render_eval_text(r, eval_text, vocab, max_text_len, text_seed, trial, i)
            for i, r in enumerate(records)]


# ---------------------------------------------------------------------------
# scenario runs
# ---------------------------------------------------------------------------

def _presets(names) -> dict[str, PsdsParams]:
    return {n: METRIC_PRESETS[n]() for n in names}


def train_split_records(pack: DataPack, split: str, weaken_seed: int) -> list[ClipRecord]:
    if split == "100/0":
        return pack.train
    return weaken_labels(pack.train, 0.5, weaken_seed)


def train_one(pack: DataPack, profile: ExperimentProfile, scenario: ScenarioConfig,
              seed: int, out_dir: str, master_seed: int) -> TrainResult:
    records = train_split_records(pack, scenario.split, int_seed(master_seed, "weaken"))
    style = profile.train_caption_style if scenario.train_captions else None
    model_cfg = replace(profile.model, n_classes=len(pack.class_names),
                        vocab_size=max(len(pack.vocab), 8) if pack.vocab else 8)
    train_cfg = replace(profile.training, caption_style=style,
                        seed=int_seed(master_seed, "train", scenario_key(scenario), seed))
    model = build_model(model_cfg, int_seed(master_seed, "init",
                                            scenario_key(scenario), seed))
    data = build_training_set(records, pack.features, pack.class_names,
                              model_cfg.frame_rate(), style, pack.vocab,
                              model_cfg.max_text_len, model_cfg.time_pool_total)
    val_tokens = None
    if style is not None:
        val_tokens = [encode(r.captions[style], pack.vocab, model_cfg.max_text_len)
                      for r in pack.val]
    val = ValPack([r.clip_id for r in pack.val],
                  [pack.features[r.clip_id] for r in pack.val],
                  pack.refs(pack.val), pack.durations(pack.val), val_tokens)
    return train(model, model_cfg, data, val, train_cfg, out_dir)


def scenario_key(scenario: ScenarioConfig) -> int:
    return zlib.crc32(scenario.name.encode("utf-8"))


def evaluate_model(model: SedCrnn, pack: DataPack, eval_text: str,
                   presets: dict[str, PsdsParams], text_seed: int = 0) -> dict:
    tokens = eval_token_lists(pack.test, eval_text, pack.vocab,
                              model.cfg.max_text_len, text_seed)
    probs = predict_probs(model, [pack.features[r.clip_id] for r in pack.test], tokens)
    result = score_detections(probs, [r.clip_id for r in pack.test],
                              pack.refs(pack.test), pack.durations(pack.test),
                              pack.class_names, model.cfg.frame_rate(), presets)
    return result


def run_scenario(scenario: ScenarioConfig, pack: DataPack, profile: ExperimentProfile,
                 out_dir: str, master_seed: int = 0) -> dict:
    """Train n_seeds models for one (captions, split) cell and evaluate each
    under every configured eval-text type. Returns rows shaped like the
    result-table schema plus per-seed values and model paths."""
    presets = _presets(scenario.metric_presets)
    os.makedirs(out_dir, exist_ok=True)
    model_paths, failures = [], []
    for seed in range(scenario.n_seeds):
        seed_dir = os.path.join(out_dir, f"seed{seed}")
        try:
            result = train_one(pack, profile, scenario, seed, seed_dir, master_seed)
            model_paths.append(result.best_path)
        except Exception as exc:   # keep partial results, mark the scenario failed
            failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
    rows = []
    for eval_text in scenario.eval_texts:
        per_seed: dict[str, list[float]] = {}
        for path in model_paths:
            model = load_model(path)
            scores = evaluate_model(model, pack, eval_text, presets,
                                    text_seed=int_seed(master_seed, "evaltext"))["scores"]
            for key, value in scores.items():
                per_seed.setdefault(key, []).append(float(value))
        row = {"captions": scenario.train_captions, "split": scenario.split,
               "eval_text": eval_text,
               "mean": {k: float(np.mean(v)) for k, v in per_seed.items()},
               "per_seed": per_seed}
        rows.append(row)
    return {"scenario": scenario.name, "rows": rows, "models": model_paths,
            "failed": bool(failures), "failures": failures}


# ---------------------------------------------------------------------------
# robustness probes
# ---------------------------------------------------------------------------

def _encode_audio_all(model: SedCrnn, feats: list[np.ndarray]) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return torch.cat([model.encode_audio(torch.from_numpy(np.stack(feats[lo:lo + 16])).float())
                          for lo in range(0, len(feats), 16)], dim=0)


def _fused_probs(model: SedCrnn, audio_feats: torch.Tensor, token_lists) -> np.ndarray:
    """Inference over precomputed audio encodings (fast text sweeps)."""
    outs = []
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(token_lists), 16):
            chunk = audio_feats[lo:lo + 16]
            tokens, pad_mask, has_text = pad_token_batch(token_lists[lo:lo + 16])
            fused = model.fuse_text(chunk, tokens, pad_mask, has_text)
            h = torch.cat([chunk, fused], dim=-1)
            h, _ = model.gru(h)
            frame_logits = model.head(h)
            outs.append(torch.sigmoid(frame_logits).numpy())
    return np.concatenate(outs, axis=0)


def tag_robustness(model: SedCrnn, pack: DataPack, n_values=range(6), trials: int = 5,
                   seed: int = 0, preset: str = "psds1_star") -> dict:
    """PSDS under tag lists containing n incorrect (absent-class) tags.

    Per clip and trial: correct tags plus n uniformly drawn absent classes,
    order shuffled; incorrect draws and order are re-randomized every trial.
    """
    presets = _presets([preset])
    audio = _encode_audio_all(model, [pack.features[r.clip_id] for r in pack.test])
    refs = pack.refs(pack.test)
    durations = pack.durations(pack.test)
    clip_ids = [r.clip_id for r in pack.test]
    out = {"n": list(int(n) for n in n_values), "mean": [], "per_trial": [],
           "per_class": {}}
    per_class_accum: dict[int, dict[str, list[float]]] = {}
    for n in n_values:
        trial_scores = []
        per_class_accum[n] = {}
        for trial in range(trials):
            token_lists = []
            for ci, r in enumerate(pack.test):
                absent = [c for c in pack.class_names if c not in r.classes]
                if n > len(absent):
                    raise ValueError(f"cannot inject {n} incorrect tags; clip "
                                     f"{r.clip_id} has only {len(absent)} absent classes")
                inj_rng = rng_for(seed, "inject", trial, ci)
                inject = [absent[k] for k in inj_rng.choice(len(absent), size=n,
                                                            replace=False)] if n else []
                token_lists.append(render_eval_text(
                    r, "tags", pack.vocab, model.cfg.max_text_len, seed, trial, ci,
                    inject=inject))
            probs = _fused_probs(model, audio, token_lists)
            result = score_detections(probs, clip_ids, refs, durations,
                                      pack.class_names, model.cfg.frame_rate(), presets)
            trial_scores.append(float(result["scores"][preset]))
            for cls, area in result["rocs"][preset].per_class_area().items():
                per_class_accum[n].setdefault(cls, []).append(area)
        out["per_trial"].append(trial_scores)
        out["mean"].append(float(np.mean(trial_scores)))
    out["per_class"] = {str(n): {c: float(np.mean(v)) for c, v in per_class_accum[n].items()}
                        for n in per_class_accum}
    return out


def leave_one_out(model: SedCrnn, pack: DataPack, seed: int = 0) -> dict:
    """Per-class precision/recall deltas when that class's tag is omitted from
    every test clip containing it, relative to the full-tag evaluation."""
    audio = _encode_audio_all(model, [pack.features[r.clip_id] for r in pack.test])
    refs = pack.refs(pack.test)
    durations = pack.durations(pack.test)
    clip_ids = [r.clip_id for r in pack.test]

    def seg_scores(token_lists):
        probs = _fused_probs(model, audio, token_lists)
        return score_detections(probs, clip_ids, refs, durations, pack.class_names,
                                model.cfg.frame_rate(), {})["segment"]

    def tokens_with(omit: str | None):
        return [render_eval_text(r, "tags", pack.vocab, model.cfg.max_text_len,
                                 seed, 0, ci, omit=omit)
                for ci, r in enumerate(pack.test)]

    base = seg_scores(tokens_with(None))
    deltas = {}
    for cls in pack.class_names:
        if not any(cls in r.classes for r in pack.test):
            continue
        seg = seg_scores(tokens_with(cls))
        b = base.per_class.get(cls, {"precision": 0.0, "recall": 0.0})
        s = seg.per_class.get(cls, {"precision": 0.0, "recall": 0.0})
        deltas[cls] = {"d_precision": s["precision"] - b["precision"],
                       "d_recall": s["recall"] - b["recall"]}
    mean_dp = float(np.mean([d["d_precision"] for d in deltas.values()]))
    mean_dr = float(np.mean([d["d_recall"] for d in deltas.values()]))
    return {"per_class": deltas, "mean_d_precision": mean_dp, "mean_d_recall": mean_dr,
            "base_precision": base.precision, "base_recall": base.recall}

"""Supervised training over strong/weak mixtures: class-balanced resampling,
SpecAugment and linear-domain spectrogram mixing, 50% text dropout, BCE on
frame and clip logits, Adam with warmup + cosine decay, and best-checkpoint
selection on validation PSDS-1*.

Every random decision is drawn from a named stream derived from the run
seed, so runs are bit-reproducible and a text-dropout probability of 1
yields the same trajectory as training with captions disabled.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nncore
from .inference import predict_probs, score_detections
from .metrics import Event, psds1_star
from .model import ModelConfig, SedCrnn, pad_token_batch
from .scenes import ClipRecord, rasterize_events
from .seeding import int_seed, rng_for
from .tokenizer import Vocabulary, encode


@dataclass
class TrainingConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 500
    grad_clip: float = 5.0
    weight_strong: float = 1.0
    weight_weak: float = 1.0
    caption_style: str | None = None        # None trains without any text
    text_dropout_p: float = 0.5
    mix_p: float = 0.25
    mix_lambda_max: float = 0.4
    time_masks: int = 2
    time_mask_max: int = 50
    freq_masks: int = 2
    freq_mask_max: int = 8
    val_every: int = 0                      # 0 -> once per nominal epoch
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.text_dropout_p <= 1.0:
            raise ValueError(f"text_dropout_p must lie in [0,1], got {self.text_dropout_p}")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch_ids: list[str], value: float):
        super().__init__(f"non-finite loss {value} at step {step}; batch clips: {batch_ids}")
        self.step = step
        self.batch_ids = batch_ids


@dataclass
class TrainingSet:
    clip_ids: list[str]
    features: list[np.ndarray]              # (T, n_mels) float32 per clip
    strong: list[np.ndarray | None]         # (T', C) {0,1} or None for weak clips
    weak: np.ndarray                        # (N, C) {0,1}
    captions: list[str | None]
    tokens: list[list[int] | None]
    class_sets: list[list[str]]
    class_names: list[str]


def build_training_set(records: list[ClipRecord], features: dict[str, np.ndarray],
                       class_names: list[str], frame_rate: float,
                       caption_style: str | None, vocab: Vocabulary | None,
                       max_text_len: int, time_pool_total: int) -> TrainingSet:
    idx = {c: i for i, c in enumerate(class_names)}
    feats, strong, weak, captions, tokens, class_sets, clip_ids = [], [], [], [], [], [], []
    for r in records:
        f = features[r.clip_id]
        n_out = int(math.ceil(f.shape[0] / time_pool_total))
        if r.events is not None:
            s = rasterize_events(r.event_list(), n_out, frame_rate, class_names)
            w = (s.max(axis=0) > 0).astype(np.float32)
        else:
            s = None
            w = np.zeros(len(class_names), dtype=np.float32)
            for c in r.classes:
                w[idx[c]] = 1.0
        cap = r.captions.get(caption_style) if caption_style else None
        feats.append(f)
        strong.append(s)
        weak.append(w)
        captions.append(cap)
        tokens.append(encode(cap, vocab, max_text_len) if cap and vocab else None)
        class_sets.append(list(r.classes))
        clip_ids.append(r.clip_id)
    return TrainingSet(clip_ids, feats, strong, np.stack(weak), captions, tokens,
                       class_sets, class_names)


# ---------------------------------------------------------------------------
# sampling and augmentation
# ---------------------------------------------------------------------------

def sample_weights(class_sets: list[list[str]]) -> np.ndarray:
    """Class-balancing clip weights.

    weight(clip) = max over its classes of (median class count / class count),
    clipped to [1, 20], then normalized to sum to 1.
    """
    if not class_sets:
        raise ValueError("sample_weights: empty manifest")
    counts: dict[str, int] = {}
    for cs in class_sets:
        for c in cs:
            counts[c] = counts.get(c, 0) + 1
    med = float(np.median(list(counts.values())))
    w = np.ones(len(class_sets))
    for i, cs in enumerate(class_sets):
        if cs:
            w[i] = max(med / counts[c] for c in cs)
    w = np.clip(w, 1.0, 20.0)
    return w / w.sum()


def balanced_sampler(class_sets: list[list[str]], seed: int, batch_size: int):
    """Endless stream of index batches drawn with the balancing weights."""
    weights = sample_weights(class_sets)
    rng = rng_for(seed, "sampler")
    while True:
        yield rng.choice(len(weights), size=batch_size, p=weights)


def spec_augment(spec: np.ndarray, masks: list[tuple[str, int, int]]) -> np.ndarray:
    """Apply pre-drawn time/frequency masks; masked cells take the
    per-spectrogram mean (computed before masking)."""
    if not masks:
        return spec
    out = spec.copy()
    fill = float(spec.mean())
    for axis, start, width in masks:
        if width <= 0:
            continue
        if axis == "time":
            out[start:start + width, :] = fill
        else:
            out[:, start:start + width] = fill
    return out


def draw_masks(rng: np.random.Generator, n_time: int, time_max: int,
               n_freq: int, freq_max: int, shape: tuple[int, int]) -> list:
    masks = []
    t, f = shape
    for _ in range(n_time):
        w = int(rng.integers(0, min(time_max, t) + 1))
        s = int(rng.integers(0, t - w + 1))
        masks.append(("time", s, w))
    for _ in range(n_freq):
        w = int(rng.integers(0, min(freq_max, f) + 1))
        s = int(rng.integers(0, f - w + 1))
        masks.append(("freq", s, w))
    return masks


def mix_specs(a: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    """Mix two log-power spectrograms in the linear power domain."""
    if a.shape != b.shape:
        raise ValueError(f"mix_specs: shape {a.shape} != {b.shape}")
    if lam <= 0.0:
        return a.copy()
    if lam >= 1.0:
        return b.copy()
    return np.log((1.0 - lam) * np.exp(a) + lam * np.exp(b)).astype(a.dtype)


def mix_examples(data: TrainingSet, i: int, j: int, lam: float):
    """Mixture features and targets for clips i and j.

    Strong+strong keeps element-wise-max strong targets; any weak partner
    demotes the mixture to weak-only supervision. Mixtures carry no caption.
    """
    spec = mix_specs(data.features[i], data.features[j], lam)
    weak = np.maximum(data.weak[i], data.weak[j])
    if lam <= 0.0:
        return data.features[i].copy(), data.strong[i], data.weak[i]
    if lam >= 1.0:
        return data.features[j].copy(), data.strong[j], data.weak[j]
    if data.strong[i] is not None and data.strong[j] is not None:
        strong = np.maximum(data.strong[i], data.strong[j])
    else:
        strong = None
    return spec, strong, weak


def mix_spectrograms(a: np.ndarray, b: np.ndarray, labels_a, labels_b, seed: int):
    """Seeded convenience wrapper: lambda ~ U(0, 0.4); labels are the
    element-wise max, or weak-only when the label kinds disagree."""
    lam = float(rng_for(seed, "mix-lambda").uniform(0.0, 0.4))
    mixed = mix_specs(a, b, lam)
    strong_a, weak_a = labels_a
    strong_b, weak_b = labels_b
    if lam <= 0.0:
        return mixed, labels_a
    if lam >= 1.0:
        return mixed, labels_b
    weak = np.maximum(weak_a, weak_b)
    strong = (np.maximum(strong_a, strong_b)
              if strong_a is not None and strong_b is not None else None)
    return mixed, (strong, weak)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def compute_loss(frame_logits: torch.Tensor, clip_logits: torch.Tensor,
                 strong_targets: torch.Tensor, strong_mask: torch.Tensor,
                 weak_targets: torch.Tensor, w_strong: float = 1.0,
                 w_weak: float = 1.0) -> torch.Tensor:
    """BCE-from-logits: strong term over strongly labeled examples only, weak
    term over every example."""
    loss = w_weak * nncore.bce_with_logits(clip_logits, weak_targets)
    if bool(strong_mask.any()):
        loss = loss + w_strong * nncore.bce_with_logits(
            frame_logits[strong_mask], strong_targets[strong_mask])
    return loss


def lr_at(step: int, cfg: TrainingConfig) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class ValPack:
    clip_ids: list[str]
    features: list[np.ndarray]
    refs: list[Event]
    durations: dict[str, float]
    tokens: list[list[int] | None] | None    # None -> text-free validation


@dataclass
class TrainResult:
    best_path: str
    final_path: str
    log_path: str
    best_val: float
    history: list[dict] = field(default_factory=list)


def _assemble_batch(data: TrainingSet, idx: np.ndarray, cfg: TrainingConfig,
                    step: int, n_out: int):
    feats, strongs, weaks, tokens, smask = [], [], [], [], []
    n = len(data.features)
    for slot, i in enumerate(idx):
        ex_rng = rng_for(cfg.seed, "augment", step, slot)
        u_mix = ex_rng.random()
        partner = int(ex_rng.integers(0, n))
        lam = float(ex_rng.uniform(0.0, cfg.mix_lambda_max))
        masks = draw_masks(ex_rng, cfg.time_masks, cfg.time_mask_max,
                           cfg.freq_masks, cfg.freq_mask_max, data.features[i].shape)
        mixed = cfg.mix_p > 0 and u_mix < cfg.mix_p
        if mixed:
            spec, strong, weak = mix_examples(data, int(i), partner, lam)
        else:
            spec, strong, weak = data.features[i].copy(), data.strong[i], data.weak[i]
        spec = spec_augment(spec, masks)
        tok = None
        if cfg.caption_style is not None:
            u_text = ex_rng.random()
            if not mixed and u_text >= cfg.text_dropout_p:
                tok = data.tokens[i]
        feats.append(spec)
        smask.append(strong is not None)
        strongs.append(strong if strong is not None
                       else np.zeros((n_out, len(data.class_names)), dtype=np.float32))
        weaks.append(weak)
        tokens.append(tok)
    batch_feats = torch.from_numpy(np.stack(feats)).float()
    batch_strong = torch.from_numpy(np.stack(strongs)).float()
    batch_weak = torch.from_numpy(np.stack(weaks)).float()
    strong_mask = torch.tensor(smask, dtype=torch.bool)
    tok_tensor, pad_mask, has_text = pad_token_batch(tokens)
    return batch_feats, batch_strong, strong_mask, batch_weak, tok_tensor, pad_mask, has_text


def validate(model: SedCrnn, val: ValPack, frame_rate: float,
             class_names: list[str]) -> float:
    probs = predict_probs(model, val.features, val.tokens)
    result = score_detections(probs, val.clip_ids, val.refs, val.durations,
                              class_names, frame_rate, {"psds1_star": psds1_star()})
    return float(result["scores"]["psds1_star"])


def train(model: SedCrnn, model_cfg: ModelConfig, data: TrainingSet, val: ValPack,
          cfg: TrainingConfig, out_dir: str) -> TrainResult:
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(int_seed(cfg.seed, "torch-train"))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sampler = balanced_sampler(data.class_sets, cfg.seed, cfg.batch_size)
    frame_rate = model_cfg.frame_rate()
    n_out = int(math.ceil(data.features[0].shape[0] / model_cfg.time_pool_total))
    val_every = cfg.val_every or max(1, len(data.features) // cfg.batch_size)

    best_val = -1.0
    best_state = None
    history: list[dict] = []
    log_path = os.path.join(out_dir, "train_log.jsonl")
    best_path = os.path.join(out_dir, "best.npz")
    final_path = os.path.join(out_dir, "final.npz")

    with open(log_path, "w", encoding="utf-8") as log:
        for step in range(cfg.steps):
            idx = next(sampler)
            (feats, strong_t, strong_mask, weak_t,
             tokens, pad_mask, has_text) = _assemble_batch(data, idx, cfg, step, n_out)
            model.train()
            lr = lr_at(step, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad()
            frame_logits, clip_logits = model(feats, tokens, pad_mask, has_text)
            loss = compute_loss(frame_logits, clip_logits, strong_t, strong_mask,
                                weak_t, cfg.weight_strong, cfg.weight_weak)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(step, [data.clip_ids[i] for i in idx], value)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()

            record = {"step": step, "loss": value, "lr": lr}
            if (step + 1) % val_every == 0 or step + 1 == cfg.steps:
                score = validate(model, val, frame_rate, data.class_names)
                record["val_psds1_star"] = score
                if score > best_val:
                    best_val = score
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                    record["best"] = True
            history.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")

    if best_state is None:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    nncore.save_state(best_path, best_state, model_cfg.to_dict())
    nncore.save_state(final_path, model.state_dict(), model_cfg.to_dict())
    return TrainResult(best_path, final_path, log_path, best_val, history)

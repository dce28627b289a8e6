"""Synthetic polyphonic audio scenes with strong annotations and templated
captions.

Ten acoustically distinct event classes (two per waveform family) stand in
for a real-world tag inventory: six with short events (under two seconds on
average) and four with long ones, so duration-ordered analyses have both
regimes. Scenes are 10 s at 16 kHz: a pink-noise bed plus 1-5 events at
per-event SNRs, with overlap allowed.

Scene *planning* (event sampling, captioning, labels) is separate from
waveform *rendering* so manifest-level statistics can be computed without
synthesizing audio. Everything is deterministic per (seed, index).

Manifest: one JSON object per line with keys clip_id, wav_path (relative to
the dataset root), duration, label_kind ("strong" | "weak"), classes (sorted
clip-level class set), events ([label, onset, offset, snr_db], null for weak
records), captions ({"tags", "short", "verbose"}).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .frontend import Waveform, save_wav
from .metrics import Event
from .seeding import rng_for


@dataclass(frozen=True)
class ClassPrimitive:
    name: str
    family: str                      # tone | chirp | noise_burst | am_tone | harmonic_stack
    freq: tuple[float, float]        # Hz draw range (start frequency for chirps)
    dur: tuple[float, float]         # seconds
    sweep: float = 1.0               # chirp end = start * sweep
    mod: tuple[float, float] = (0.0, 0.0)   # AM rate range, Hz
    harmonics: int = 1

    def __post_init__(self):
        if not (0.0 < self.dur[0] <= self.dur[1] <= 10.0):
            raise ValueError(f"{self.name}: duration range {self.dur} outside (0, 10]")


DEFAULT_INVENTORY: list[ClassPrimitive] = [
    ClassPrimitive("low beep", "tone", (300.0, 500.0), (0.3, 1.2)),
    ClassPrimitive("high beep", "tone", (1200.0, 2000.0), (0.3, 1.2)),
    ClassPrimitive("rising chirp", "chirp", (400.0, 700.0), (0.5, 1.5), sweep=3.0),
    ClassPrimitive("falling chirp", "chirp", (1500.0, 2400.0), (0.5, 1.5), sweep=1.0 / 3.0),
    ClassPrimitive("click burst", "noise_burst", (2500.0, 6000.0), (0.2, 0.8)),
    ClassPrimitive("low thump", "noise_burst", (60.0, 250.0), (0.25, 0.8)),
    ClassPrimitive("siren", "am_tone", (600.0, 900.0), (4.0, 9.0), mod=(2.0, 5.0)),
    ClassPrimitive("engine hum", "am_tone", (90.0, 160.0), (6.0, 10.0), mod=(15.0, 30.0)),
    ClassPrimitive("organ chord", "harmonic_stack", (180.0, 320.0), (5.0, 10.0), harmonics=5),
    ClassPrimitive("static noise", "noise_burst", (300.0, 7000.0), (6.0, 10.0)),
]


@dataclass
class SceneConfig:
    duration: float = 10.0
    sample_rate: int = 16000
    min_events: int = 1
    max_events: int = 5
    snr_db: tuple[float, float] = (0.0, 18.0)
    bg_level: float = 0.05
    imbalance: float = 5.0           # target max/min class-count ratio


@dataclass
class CaptionConfig:
    distractor_p: float = 0.25
    shuffle_tags: bool = False


@dataclass(frozen=True)
class PlannedEvent:
    label: str
    onset: float
    duration: float
    snr_db: float
    f0: float
    am_rate: float

    @property
    def offset(self) -> float:
        return self.onset + self.duration


def class_weights(n_classes: int, imbalance: float) -> np.ndarray:
    """Sampling weights whose max/min ratio equals `imbalance`."""
    if imbalance < 1.0:
        raise ValueError(f"imbalance knob must be >= 1, got {imbalance}")
    w = imbalance ** (np.arange(n_classes) / max(1, n_classes - 1))
    return w / w.sum()


def plan_scene(rng: np.random.Generator, inventory: list[ClassPrimitive],
               cfg: SceneConfig) -> list[PlannedEvent]:
    if not inventory:
        raise ValueError("plan_scene: empty class inventory")
    if not (1 <= cfg.min_events <= cfg.max_events):
        raise ValueError(f"infeasible polyphony range ({cfg.min_events}, {cfg.max_events})")
    weights = class_weights(len(inventory), cfg.imbalance)
    n_events = int(rng.integers(cfg.min_events, cfg.max_events + 1))
    events = []
    for _ in range(n_events):
        prim = inventory[int(rng.choice(len(inventory), p=weights))]
        dur = float(rng.uniform(*prim.dur))
        dur = min(dur, cfg.duration)
        onset = float(rng.uniform(0.0, cfg.duration - dur))
        snr = float(rng.uniform(*cfg.snr_db))
        f0 = float(rng.uniform(*prim.freq))
        am = float(rng.uniform(*prim.mod)) if prim.mod[1] > 0 else 0.0
        events.append(PlannedEvent(prim.name, onset, dur, snr, f0, am))
    return sorted(events, key=lambda e: (e.onset, e.label))


def _envelope(n: int, sr: int, ramp_s: float = 0.02) -> np.ndarray:
    ramp = min(max(1, int(ramp_s * sr)), n // 2)
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return env


def _bandpass_noise(rng: np.random.Generator, n: int, sr: int, lo: float, hi: float) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    out = np.fft.irfft(spec, n=n)
    rms = np.sqrt(np.mean(out ** 2))
    return out / max(rms, 1e-12)


def render_event(ev: PlannedEvent, prim: ClassPrimitive, sr: int,
                 rng: np.random.Generator) -> np.ndarray:
    n = max(1, int(round(ev.duration * sr)))
    t = np.arange(n) / sr
    if prim.family == "tone":
        x = np.sin(2 * np.pi * ev.f0 * t)
    elif prim.family == "chirp":
        f1 = ev.f0 * prim.sweep
        phase = 2 * np.pi * (ev.f0 * t + (f1 - ev.f0) * t ** 2 / (2 * ev.duration))
        x = np.sin(phase)
    elif prim.family == "am_tone":
        carrier = np.sin(2 * np.pi * ev.f0 * t)
        x = carrier * (0.55 + 0.45 * np.sin(2 * np.pi * ev.am_rate * t))
    elif prim.family == "harmonic_stack":
        x = np.zeros(n)
        for h in range(1, prim.harmonics + 1):
            x += np.sin(2 * np.pi * h * ev.f0 * t) / h
    elif prim.family == "noise_burst":
        x = _bandpass_noise(rng, n, sr, prim.freq[0], prim.freq[1])
    else:
        raise ValueError(f"unknown waveform family {prim.family!r}")
    x = x * _envelope(n, sr)
    rms = np.sqrt(np.mean(x ** 2))
    return x / max(rms, 1e-12)


def render_scene(events: list[PlannedEvent], inventory: list[ClassPrimitive],
                 cfg: SceneConfig, rng: np.random.Generator) -> Waveform:
    prim_by_name = {p.name: p for p in inventory}
    n = int(round(cfg.duration * cfg.sample_rate))
    bg = _bandpass_noise(rng, n, cfg.sample_rate, 20.0, cfg.sample_rate / 2)
    # pink-ish tilt keeps low end energetic without swamping the band edges
    spec = np.fft.rfft(bg)
    freqs = np.fft.rfftfreq(n, d=1.0 / cfg.sample_rate)
    spec *= 1.0 / np.sqrt(np.maximum(freqs, 1.0))
    bg = np.fft.irfft(spec, n=n)
    bg *= cfg.bg_level / max(np.sqrt(np.mean(bg ** 2)), 1e-12)
    mix = bg.copy()
    bg_rms = max(np.sqrt(np.mean(bg ** 2)), 1e-12)
    for ev in events:
        x = render_event(ev, prim_by_name[ev.label], cfg.sample_rate, rng)
        gain = bg_rms * (10.0 ** (ev.snr_db / 20.0))
        start = int(round(ev.onset * cfg.sample_rate))
        stop = min(n, start + len(x))
        mix[start:stop] += gain * x[:stop - start]
    peak = np.max(np.abs(mix))
    if peak > 0.99:
        mix *= 0.99 / peak
    return Waveform(mix, cfg.sample_rate)


def generate_scene(seed: int, inventory: list[ClassPrimitive],
                   cfg: SceneConfig) -> tuple[Waveform, list[PlannedEvent]]:
    events = plan_scene(rng_for(seed, "scene-plan"), inventory, cfg)
    wave = render_scene(events, inventory, cfg, rng_for(seed, "scene-render"))
    return wave, events


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------

_VERBS = {
    "low beep": ("blips softly", "beeps"),
    "high beep": ("pips sharply", "beeps"),
    "rising chirp": ("sweeps upward", "whistles up"),
    "falling chirp": ("slides downward", "whistles down"),
    "click burst": ("crackles briefly", "clicks"),
    "low thump": ("thuds", "knocks"),
    "siren": ("wails up and down", "wails"),
    "engine hum": ("drones steadily", "hums"),
    "organ chord": ("sustains a thick chord", "rings out"),
    "static noise": ("hisses continuously", "hisses"),
}

_DISTRACTORS = (
    "while a camera pans across a busy street scene",
    "as people and parked cars appear in the background of the shot",
    "while a brightly lit storefront fills most of the frame",
    "as the video shows a crowded park under a grey sky",
)


def _position_word(onset: float, duration: float, clip_len: float) -> str:
    if duration > 0.6 * clip_len:
        return "throughout the clip"
    center = onset + duration / 2
    if center < clip_len / 3:
        return "near the start"
    if center < 2 * clip_len / 3:
        return "around the middle"
    return "towards the end"


def _loudness_word(snr_db: float) -> str:
    if snr_db < 6.0:
        return "faint"
    if snr_db < 12.0:
        return "clear"
    return "loud"


def _dedupe_in_order(events: list[PlannedEvent]) -> list[PlannedEvent]:
    seen, out = set(), []
    for ev in sorted(events, key=lambda e: (e.onset, e.label)):
        if ev.label not in seen:
            seen.add(ev.label)
            out.append(ev)
    return out


def synth_caption(events: list[PlannedEvent], style: str, rng: np.random.Generator,
                  cfg: CaptionConfig | None = None, clip_len: float = 10.0) -> str:
    """Render a caption for a scene. Styles: tags, short, verbose."""
    if not events:
        raise ValueError("synth_caption: empty event list")
    cfg = cfg or CaptionConfig()
    uniq = _dedupe_in_order(events)
    names = [e.label for e in uniq]

    if style == "tags":
        from .tokenizer import render_tag_text
        return render_tag_text(names, shuffle=cfg.shuffle_tags,
                               seed=int(rng.integers(2 ** 31)) if cfg.shuffle_tags else None)

    if style == "short":
        if len(names) == 1:
            forms = (f"a {names[0]} {_VERBS[names[0]][1]} in the recording",
                     f"a {names[0]} {_VERBS[names[0]][1]} over soft noise")
            return forms[int(rng.integers(len(forms)))]
        if len(names) == 2:
            joiner = ("before", "and then")[int(rng.integers(2))]
            return (f"a {names[0]} {_VERBS[names[0]][1]} {joiner} "
                    f"a {names[1]} {_VERBS[names[1]][1]}")
        listed = ", ".join(names[:-1]) + f" and {names[-1]}"
        return f"{listed} follow each other"

    if style == "verbose":
        clauses = []
        rich = len(uniq) <= 2
        for i, ev in enumerate(uniq):
            verb = _VERBS[ev.label][0 if rich or i == 0 else 1]
            if rich or i == 0:
                clauses.append(f"a {_loudness_word(ev.snr_db)} {ev.label} {verb} "
                               f"{_position_word(ev.onset, ev.duration, clip_len)}")
            else:
                clauses.append(f"a {ev.label} {verb}")
        joined = clauses[0]
        for c in clauses[1:]:
            joined += (", while " if rng.random() < 0.5 else ", and later ") + c
        opener = ("in this recording, ", "over a soft noise bed, ")[int(rng.integers(2))]
        sentence = opener + joined
        if len(uniq) == 1:
            sentence += ", standing out clearly against the hiss of the room"
        if rich:
            sentence += ", with a low wash of background noise running from start to finish"
        else:
            sentence += ", over steady background noise"
        if rng.random() < cfg.distractor_p:
            sentence += ", " + _DISTRACTORS[int(rng.integers(len(_DISTRACTORS)))]
        return sentence

    raise ValueError(f"unknown caption style {style!r}")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ClipRecord:
    clip_id: str
    wav_path: str
    duration: float
    label_kind: str
    classes: list[str]
    events: list[tuple[str, float, float, float]] | None
    captions: dict[str, str] = field(default_factory=dict)

    def event_list(self) -> list[Event]:
        if self.events is None:
            return []
        return [Event(self.clip_id, label, onset, offset)
                for label, onset, offset, _snr in self.events]


def save_manifest(path, records: list[ClipRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({
                "clip_id": r.clip_id, "wav_path": r.wav_path, "duration": r.duration,
                "label_kind": r.label_kind, "classes": r.classes,
                "events": None if r.events is None else [list(e) for e in r.events],
                "captions": r.captions,
            }, sort_keys=True) + "\n")


def load_manifest(path) -> list[ClipRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            events = None if d["events"] is None else [tuple(e) for e in d["events"]]
            records.append(ClipRecord(d["clip_id"], d["wav_path"], d["duration"],
                                      d["label_kind"], list(d["classes"]), events,
                                      dict(d["captions"])))
    return records


def generate_corpus(out_dir, n_clips: int, seed: int,
                    inventory: list[ClassPrimitive] | None = None,
                    scene_cfg: SceneConfig | None = None,
                    caption_cfg: CaptionConfig | None = None,
                    write_audio: bool = True) -> list[ClipRecord]:
    """Generate `n_clips` annotated scenes under `out_dir` (audio/ + manifest)."""
    inventory = inventory or DEFAULT_INVENTORY
    scene_cfg = scene_cfg or SceneConfig()
    caption_cfg = caption_cfg or CaptionConfig()
    audio_dir = os.path.join(out_dir, "audio")
    os.makedirs(audio_dir, exist_ok=True)
    records = []
    for i in range(n_clips):
        clip_id = f"clip_{i:05d}"
        events = plan_scene(rng_for(seed, "scene-plan", i), inventory, scene_cfg)
        wav_rel = os.path.join("audio", clip_id + ".wav")
        if write_audio:
            wave = render_scene(events, inventory, scene_cfg, rng_for(seed, "scene-render", i))
            save_wav(os.path.join(out_dir, wav_rel), wave)
        captions = {
            "tags": synth_caption(events, "tags", rng_for(seed, "caption-tags", i), caption_cfg),
            "short": synth_caption(events, "short", rng_for(seed, "caption-short", i),
                                   caption_cfg, scene_cfg.duration),
            "verbose": synth_caption(events, "verbose", rng_for(seed, "caption-verbose", i),
                                     caption_cfg, scene_cfg.duration),
        }
        records.append(ClipRecord(
            clip_id, wav_rel, scene_cfg.duration, "strong",
            sorted({e.label for e in events}),
            [(e.label, e.onset, e.offset, e.snr_db) for e in events],
            captions))
    save_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    return records


def weaken_labels(records: list[ClipRecord], fraction: float, seed: int) -> list[ClipRecord]:
    """Strip timestamps from a deterministic `fraction` of clips.

    Already-weak records stay weak; with the same seed the operation is
    idempotent, and with any seed the weak set only grows.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0,1], got {fraction}")
    n_weak = int(round(fraction * len(records)))
    order = rng_for(seed, "weaken").permutation(len(records))
    chosen = set(order[:n_weak])
    out = []
    for i, r in enumerate(records):
        if r.label_kind == "weak" or i in chosen:
            out.append(replace(r, label_kind="weak", events=None))
        else:
            out.append(replace(r))
    return out


def build_splits(records: list[ClipRecord], sizes: tuple[int, int, int],
                 seed: int, max_tries: int = 1000):
    """Disjoint train/val/test splits with every class present in each split."""
    if sum(sizes) > len(records):
        raise ValueError(f"corpus of {len(records)} clips cannot fill splits {sizes}")
    all_classes = sorted({c for r in records for c in r.classes})
    for c in all_classes:
        count = sum(1 for r in records if c in r.classes)
        if count < 3:
            raise ValueError(f"class {c!r} occurs in only {count} clips; coverage infeasible")
    for attempt in range(max_tries):
        order = rng_for(seed, "splits", attempt).permutation(len(records))
        a, b, c = sizes
        train = [records[i] for i in order[:a]]
        val = [records[i] for i in order[a:a + b]]
        test = [records[i] for i in order[a + b:a + b + c]]
        if all({k for r in part for k in r.classes} == set(all_classes)
               for part in (train, val, test)):
            return train, val, test
    raise ValueError(f"could not build class-covering splits in {max_tries} attempts")


def rasterize_events(events: list[Event], n_frames: int, frame_rate: float,
                     class_names: list[str]) -> np.ndarray:
    """Frame-level {0,1} targets; a frame is active when an event covers at
    least half of it."""
    idx = {c: i for i, c in enumerate(class_names)}
    target = np.zeros((n_frames, len(class_names)), dtype=np.float32)
    frame_dur = 1.0 / frame_rate
    for e in events:
        if e.label not in idx:
            continue
        first = max(0, int(np.floor(e.onset * frame_rate)))
        last = min(n_frames, int(np.ceil(e.offset * frame_rate)))
        for k in range(first, last):
            lo, hi = k * frame_dur, (k + 1) * frame_dur
            if min(e.offset, hi) - max(e.onset, lo) >= 0.5 * frame_dur:
                target[k, idx[e.label]] = 1.0
    return target


def class_avg_durations(records: list[ClipRecord]) -> dict[str, float]:
    """Average event duration per class over the strong records."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for r in records:
        if r.events is None:
            continue
        for label, onset, offset, _snr in r.events:
            sums[label] = sums.get(label, 0.0) + (offset - onset)
            counts[label] = counts.get(label, 0) + 1
    return {c: sums[c] / counts[c] for c in sums}

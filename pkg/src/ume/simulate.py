"""Synthetic conversation-like mixture generator.

Each token is rendered as a tone whose frequency encodes the token identity,
so the ASR task is learnable from spectral content alone; per-speaker timbre
(second-harmonic ratio) and tremolo rate make the separation task speaker
dependent. A mixture is the sum of activity-gated sources plus optional
white noise; the generator also emits sample-level activity and token
transcripts, so one dataset serves diarization, separation, and recognition.
"""

from __future__ import annotations

import json
import math
import os
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .rng import stream

PEAK_NORM = 0.7
FADE_S = 0.005
TREMOLO_DEPTH = 0.3
WAV_HEADROOM = 0.99


def token_frequency(token):
    """Fundamental frequency (Hz) assigned to a token id."""
    return 150.0 + 60.0 * token


@dataclass
class UtteranceSpec:
    """One speaker's utterance inside a mixture."""
    speaker: int                      # 1-based speaker index
    tokens: list
    base_gain: float = 1.0
    timbre: float = 0.0               # second-harmonic amplitude ratio, [0, 0.9]
    tremolo_rate: float = 0.0         # Hz
    onset: int = 0                    # sample index

    def validate(self):
        if not self.tokens:
            raise ConfigError("utterance.tokens", "must be non-empty")
        if self.onset < 0:
            raise ConfigError("utterance.onset", "must be >= 0")
        if not 0.0 <= self.timbre <= 0.9:
            raise ConfigError("utterance.timbre", f"must be in [0, 0.9], got {self.timbre}")


@dataclass
class MixtureSample:
    """One item: mixture waveform, per-speaker sources, activity, transcripts."""
    id: str
    sample_rate: int
    mixture: np.ndarray               # [T]
    sources: list                     # C arrays, each [T], zero outside the span
    activity: list                    # per speaker: list of [start, end) sample spans
    transcripts: list                 # per speaker: list of token ids
    noise_snr_db: float | None = None
    _noise: np.ndarray | None = None  # kept in memory for identity tests, not persisted

    @property
    def num_speakers(self):
        return len(self.sources)

    @property
    def length(self):
        return len(self.mixture)

    def activity_matrix(self):
        """Binary [C, T] sample-level activity from the stored spans."""
        y = np.zeros((self.num_speakers, self.length), dtype=np.int8)
        for c, spans in enumerate(self.activity):
            for start, end in spans:
                y[c, start:end] = 1
        return y


@dataclass
class DatasetConfig:
    num_items: int = 10
    speakers: int = 2
    sample_rate: int = 2000
    token_duration_s: float = 0.1
    tokens_per_utterance: tuple = (5, 10)
    vocab_size: int = 8
    overlap_mode: str = "full"        # "full" | "partial"
    min_overlap_s: float = 0.5
    noise_mode: str = "mixclean"      # "mixclean" | "mixboth"
    snr_db_range: tuple = (5.0, 15.0)
    seed: int = 0

    def validate(self, path="data"):
        if self.num_items < 1:
            raise ConfigError(f"{path}.num_items", "must be >= 1")
        if self.speakers not in (2, 3):
            raise ConfigError(f"{path}.speakers", f"must be 2 or 3, got {self.speakers}")
        if self.sample_rate < 200:
            raise ConfigError(f"{path}.sample_rate", "must be >= 200 Hz")
        if self.token_duration_s <= 0:
            raise ConfigError(f"{path}.token_duration_s", "must be positive")
        lo, hi = self.tokens_per_utterance
        if not (1 <= lo <= hi):
            raise ConfigError(f"{path}.tokens_per_utterance", f"invalid range [{lo}, {hi}]")
        if self.vocab_size < 1:
            raise ConfigError(f"{path}.vocab_size", "must be >= 1")
        nyquist = self.sample_rate / 2.0
        if token_frequency(self.vocab_size) > nyquist:
            raise ConfigError(f"{path}.vocab_size",
                              f"token {self.vocab_size} needs {token_frequency(self.vocab_size)} Hz "
                              f"which exceeds the Nyquist rate {nyquist} Hz")
        if self.overlap_mode not in ("full", "partial"):
            raise ConfigError(f"{path}.overlap_mode", f"unknown mode {self.overlap_mode!r}")
        if self.overlap_mode == "partial":
            shortest = lo * self.token_duration_s
            if not self.min_overlap_s < shortest:
                raise ConfigError(f"{path}.min_overlap_s",
                                  f"must be < shortest utterance duration {shortest}s; "
                                  f"raise tokens_per_utterance or shrink the overlap")
        if self.noise_mode not in ("mixclean", "mixboth"):
            raise ConfigError(f"{path}.noise_mode", f"unknown mode {self.noise_mode!r}")
        if self.noise_mode == "mixboth" and self.snr_db_range[0] > self.snr_db_range[1]:
            raise ConfigError(f"{path}.snr_db_range", "low bound exceeds high bound")
        return self

    def harmonics_allowed(self):
        """True when every token's second harmonic stays below Nyquist."""
        return 2.0 * token_frequency(self.vocab_size) <= self.sample_rate / 2.0


def synth_utterance(spec, sample_rate, token_duration_s):
    """Render an utterance: one tone unit per token, faded, peak-normalized.

    Unit for token k: sin(2*pi*f_k*t) * (1 + 0.3*sin(2*pi*tremolo*t)) +
    timbre * sin(4*pi*f_k*t), with f_k = 150 + 60*k Hz, raised-cosine fades
    of 5 ms at the unit edges, then base_gain and a 0.7 peak normalization
    over the whole utterance. Fully deterministic given the spec.
    """
    spec.validate()
    nyquist = sample_rate / 2.0
    unit_len = int(round(token_duration_s * sample_rate))
    if unit_len < 2:
        raise ConfigError("token_duration_s", "too short for the sample rate")
    fade = min(int(round(FADE_S * sample_rate)), unit_len // 2)
    ramp = 0.5 * (1.0 - np.cos(np.pi * (np.arange(fade) + 1) / (fade + 1)))
    t = np.arange(unit_len, dtype=np.float64) / sample_rate
    units = []
    for token in spec.tokens:
        f = token_frequency(token)
        if f > nyquist:
            raise ConfigError("utterance.tokens",
                              f"token {token} needs {f} Hz, above Nyquist {nyquist} Hz")
        if spec.timbre > 0 and 2.0 * f > nyquist:
            raise ConfigError("utterance.timbre",
                              f"second harmonic of token {token} ({2 * f} Hz) is above "
                              f"Nyquist {nyquist} Hz; use timbre 0 or a smaller vocabulary")
        unit = np.sin(2 * np.pi * f * t)
        if spec.tremolo_rate:
            unit = unit * (1.0 + TREMOLO_DEPTH * np.sin(2 * np.pi * spec.tremolo_rate * t))
        if spec.timbre > 0:
            unit = unit + spec.timbre * np.sin(4 * np.pi * f * t)
        if fade:
            unit = unit.copy()
            unit[:fade] *= ramp
            unit[-fade:] *= ramp[::-1]
        units.append(unit)
    wav = np.concatenate(units) * spec.base_gain
    peak = np.abs(wav).max()
    return wav * (PEAK_NORM / peak)


def _draw_specs(config, rng):
    """Per-item utterance specs; timbre bands are disabled when the vocabulary's
    second harmonics would alias."""
    lo, hi = config.tokens_per_utterance
    harmonics = config.harmonics_allowed()
    specs = []
    for c in range(1, config.speakers + 1):
        n_tokens = int(rng.integers(lo, hi + 1))
        tokens = rng.integers(1, config.vocab_size + 1, size=n_tokens).tolist()
        tremolo = float(rng.uniform(2.0 + 3.0 * (c - 1), 4.0 + 3.0 * (c - 1)))
        timbre = float(rng.uniform(0.3 * (c - 1), 0.2 + 0.3 * (c - 1))) if harmonics else 0.0
        specs.append(UtteranceSpec(speaker=c, tokens=tokens, timbre=timbre,
                                   tremolo_rate=tremolo))
    return specs


def _draw_onsets(lengths, config, rng):
    if config.overlap_mode == "full":
        return [0] * len(lengths)
    min_overlap = int(round(config.min_overlap_s * config.sample_rate))
    span = max(lengths)
    for _ in range(100):
        onsets = [int(rng.integers(0, span)) for _ in lengths]
        ok = True
        for i in range(len(lengths)):
            for j in range(i + 1, len(lengths)):
                inter = (min(onsets[i] + lengths[i], onsets[j] + lengths[j])
                         - max(onsets[i], onsets[j]))
                if inter < min_overlap:
                    ok = False
        if ok:
            return onsets
    raise DataError(f"could not satisfy the {config.min_overlap_s}s pairwise overlap "
                    f"after 100 onset draws")


def mix(utterances, config, rng, item_id="item"):
    """Combine per-speaker waveforms into one MixtureSample.

    The mixture is exactly sum_c(activity_c * source_c) + noise before
    quantization. If the raw sum would clip PCM16, all waveforms (mixture,
    sources, noise) are rescaled by one common factor, which preserves the
    additive identity, the activity labels, and the SNR.
    """
    specs, waves = zip(*utterances)
    onsets = [s.onset for s in specs]
    lengths = [len(w) for w in waves]
    total = max(o + n for o, n in zip(onsets, lengths))
    c_count = len(specs)
    sources = np.zeros((c_count, total), dtype=np.float64)
    spans = []
    for c, (onset, wav) in enumerate(zip(onsets, waves)):
        sources[c, onset:onset + len(wav)] = wav
        spans.append([[onset, onset + len(wav)]])
    activity = np.zeros((c_count, total), dtype=np.float64)
    for c, ((start, end),) in enumerate(spans):
        activity[c, start:end] = 1.0
    clean = (activity * sources).sum(axis=0)

    snr_db = None
    noise = np.zeros(total, dtype=np.float64)
    if config.noise_mode == "mixboth":
        snr_db = float(rng.uniform(*config.snr_db_range))
        active = activity.any(axis=0)
        raw = rng.standard_normal(total)
        signal_power = float((clean[active] ** 2).mean())
        raw_power = float((raw[active] ** 2).mean())
        scale = math.sqrt(signal_power / (raw_power * 10.0 ** (snr_db / 10.0)))
        noise = raw * scale

    peak = max(np.abs(clean + noise).max(), np.abs(sources).max())
    if peak > WAV_HEADROOM:
        # rescale the parts, then rebuild the sum, so the additive identity
        # stays bitwise exact on the emitted arrays
        factor = WAV_HEADROOM / peak
        sources = sources * factor
        noise = noise * factor
        clean = (activity * sources).sum(axis=0)
    mixture = clean + noise

    return MixtureSample(id=item_id, sample_rate=config.sample_rate, mixture=mixture,
                         sources=[sources[c] for c in range(c_count)],
                         activity=spans, transcripts=[list(s.tokens) for s in specs],
                         noise_snr_db=snr_db, _noise=noise)


def generate_dataset(config):
    """Deterministic dataset: a pure function of (config, seed)."""
    config.validate()
    samples = []
    for i in range(config.num_items):
        rng = stream(config.seed, "data", i)
        specs = _draw_specs(config, rng)
        waves = [synth_utterance(s, config.sample_rate, config.token_duration_s)
                 for s in specs]
        onsets = _draw_onsets([len(w) for w in waves], config, rng)
        for spec, onset in zip(specs, onsets):
            spec.onset = onset
        samples.append(mix(list(zip(specs, waves)), config, rng, item_id=f"item_{i:05d}"))
    return samples


# ---------------------------------------------------------------------------
# WAV + JSONL persistence
# ---------------------------------------------------------------------------

def write_wav(path, wav, sample_rate):
    pcm = np.clip(np.rint(np.asarray(wav) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise DataError(f"{path}: expected mono PCM16")
        rate = f.getframerate()
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate


def write_dataset(samples, out_dir):
    """Persist samples as WAV files plus a JSONL manifest; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as mf:
        for s in samples:
            mix_name = f"{s.id}_mix.wav"
            write_wav(os.path.join(out_dir, mix_name), s.mixture, s.sample_rate)
            source_names = []
            for c, src in enumerate(s.sources, start=1):
                name = f"{s.id}_s{c}.wav"
                write_wav(os.path.join(out_dir, name), src, s.sample_rate)
                source_names.append(name)
            record = {
                "id": s.id,
                "sample_rate": s.sample_rate,
                "mixture": mix_name,
                "sources": source_names,
                "activity": [[[int(a), int(b)] for a, b in spans] for spans in s.activity],
                "transcripts": [[int(t) for t in toks] for toks in s.transcripts],
                "noise_snr_db": s.noise_snr_db,
            }
            mf.write(json.dumps(record) + "\n")
    return manifest_path


def _validate_spans(spans, total, item_id, speaker):
    prev_end = None
    for start, end in spans:
        if not (0 <= start < end <= total):
            raise DataError(f"{item_id}: speaker {speaker} span [{start}, {end}) "
                            f"outside [0, {total})")
        if prev_end is not None and start < prev_end:
            raise DataError(f"{item_id}: speaker {speaker} has overlapping spans")
        prev_end = end


def read_dataset(manifest_path):
    """Load a manifest back into MixtureSamples (waveforms are PCM16-quantized)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    with open(manifest_path, "r", encoding="utf-8") as mf:
        for lineno, line in enumerate(mf, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{manifest_path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                mixture, rate = read_wav(os.path.join(base, record["mixture"]))
                if rate != record["sample_rate"]:
                    raise DataError(f"{record['id']}: wav rate {rate} != manifest "
                                    f"{record['sample_rate']}")
                sources = []
                for name in record["sources"]:
                    src, _ = read_wav(os.path.join(base, name))
                    sources.append(src)
            except FileNotFoundError as exc:
                raise DataError(f"{manifest_path}:{lineno}: missing file: {exc}") from exc
            total = len(mixture)
            spans = [[(int(a), int(b)) for a, b in speaker_spans]
                     for speaker_spans in record["activity"]]
            for c, speaker_spans in enumerate(spans, start=1):
                _validate_spans(speaker_spans, total, record["id"], c)
            samples.append(MixtureSample(
                id=record["id"], sample_rate=record["sample_rate"], mixture=mixture,
                sources=sources, activity=spans,
                transcripts=[list(map(int, t)) for t in record["transcripts"]],
                noise_snr_db=record.get("noise_snr_db")))
    return samples

"""Synthetic utterances with exact token alignments.

Each token id owns a fixed random prototype vector (row 0 is the silence
prototype). An utterance is leading silence, a run of token spans, then
trailing silence; every frame's features are its prototype plus Gaussian
noise. Prototypes are drawn from ``prototype_seed`` so every split of a
corpus shares them, while utterance content is drawn from the split seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from pfctc.errors import DatasetError, UsageError

FIELDS = ("id", "frame_ms", "features", "labels", "label_end_frames", "speech_end_frame")


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 8
    utterance_count: int = 200
    min_tokens: int = 5
    max_tokens: int = 9
    min_frames_per_token: int = 5
    max_frames_per_token: int = 9
    min_silence: int = 4
    max_silence: int = 8
    feature_dim: int = 16
    noise_std: float = 0.3
    frame_ms: float = 40.0
    prototype_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise UsageError("vocab_size must be >= 2")
        if self.utterance_count < 0:
            raise UsageError("utterance_count must be >= 0")
        if self.feature_dim < 1:
            raise UsageError("feature_dim must be >= 1")
        for lo, hi in (("min_tokens", "max_tokens"),
                       ("min_frames_per_token", "max_frames_per_token"),
                       ("min_silence", "max_silence")):
            a, b = getattr(self, lo), getattr(self, hi)
            if a < 0 or a > b:
                raise UsageError(f"invalid range {lo}={a} > {hi}={b}")
        if self.min_tokens < 1:
            raise UsageError("min_tokens must be >= 1")
        if self.min_frames_per_token < 1:
            raise UsageError("min_frames_per_token must be >= 1")
        if self.vocab_size == 2 and self.min_frames_per_token < 2:
            # a single token id forces repeats, which need a blank frame between
            raise UsageError("vocab_size=2 needs min_frames_per_token >= 2")
        if not self.noise_std >= 0:
            raise UsageError("noise_std must be >= 0")
        if not self.frame_ms > 0:
            raise UsageError("frame_ms must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class Utterance:
    id: str
    features: np.ndarray
    labels: list[int]
    label_end_frames: list[int]
    speech_end_frame: int
    frame_ms: float

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    def validate(self) -> None:
        T = self.num_frames
        if self.features.ndim != 2:
            raise DatasetError(f"{self.id}: features must be a 2-D matrix")
        if any(k < 1 for k in self.labels):
            raise DatasetError(f"{self.id}: labels must be >= 1")
        if len(self.label_end_frames) != len(self.labels):
            raise DatasetError(f"{self.id}: label_end_frames length differs from labels")
        ends = self.label_end_frames
        if any(b <= a for a, b in zip(ends, ends[1:])):
            raise DatasetError(f"{self.id}: label_end_frames must be strictly increasing")
        if ends and self.speech_end_frame < ends[-1]:
            raise DatasetError(f"{self.id}: speech_end_frame precedes the last token end")
        if (ends and ends[-1] >= T) or self.speech_end_frame >= T:
            raise DatasetError(f"{self.id}: end frames must lie inside the utterance")
        if not self.frame_ms > 0:
            raise DatasetError(f"{self.id}: frame_ms must be positive")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "frame_ms": self.frame_ms,
            "features": self.features.tolist(),
            "labels": list(self.labels),
            "label_end_frames": list(self.label_end_frames),
            "speech_end_frame": self.speech_end_frame,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Utterance":
        missing = [k for k in FIELDS if k not in obj]
        if missing:
            raise DatasetError(f"missing fields: {', '.join(missing)}")
        feats = np.asarray(obj["features"], dtype=np.float64)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(0, 0)
        utt = cls(
            id=str(obj["id"]),
            features=feats,
            labels=[int(k) for k in obj["labels"]],
            label_end_frames=[int(e) for e in obj["label_end_frames"]],
            speech_end_frame=int(obj["speech_end_frame"]),
            frame_ms=float(obj["frame_ms"]),
        )
        utt.validate()
        return utt

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.id == other.id
                and self.labels == other.labels
                and self.label_end_frames == other.label_end_frames
                and self.speech_end_frame == other.speech_end_frame
                and self.frame_ms == other.frame_ms
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class Dataset:
    utterances: list[Utterance]
    config: SynthConfig | None = None
    seed: int | None = None
    _index: dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for i, utt in enumerate(self.utterances):
            if utt.id in self._index:
                raise DatasetError(f"duplicate utterance id {utt.id!r}")
            self._index[utt.id] = i

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __getitem__(self, key):
        if isinstance(key, str):
            try:
                return self.utterances[self._index[key]]
            except KeyError:
                raise KeyError(f"unknown utterance id {key!r}") from None
        return self.utterances[key]

    @property
    def feature_dim(self) -> int | None:
        return self.utterances[0].features.shape[1] if self.utterances else None

    @property
    def max_label(self) -> int:
        return max((max(u.labels) for u in self.utterances if u.labels), default=0)


def prototypes(config: SynthConfig) -> np.ndarray:
    """``(V, feature_dim)`` prototype table; row 0 is silence."""
    rng = np.random.default_rng(config.prototype_seed)
    return rng.standard_normal((config.vocab_size, config.feature_dim))


def _sample_labels(rng: np.random.Generator, n: int, V: int) -> list[int]:
    # no immediate repeats: adjacent equal tokens would share one prototype span
    labels = [int(rng.integers(1, V))]
    while len(labels) < n:
        if V == 2:
            labels.append(1)
            continue
        k = int(rng.integers(1, V - 1))
        labels.append(k if k < labels[-1] else k + 1)
    return labels


def generate_utterance(config: SynthConfig, rng: np.random.Generator,
                       protos: np.ndarray, utt_id: str) -> Utterance:
    n = int(rng.integers(config.min_tokens, config.max_tokens + 1))
    labels = _sample_labels(rng, n, config.vocab_size)
    durations = rng.integers(config.min_frames_per_token, config.max_frames_per_token + 1, size=n)
    lead, trail = rng.integers(config.min_silence, config.max_silence + 1, size=2)

    frame_ids = [0] * int(lead)
    ends = []
    for k, d in zip(labels, durations):
        frame_ids.extend([k] * int(d))
        ends.append(len(frame_ids) - 1)
    speech_end = len(frame_ids) - 1
    frame_ids.extend([0] * int(trail))

    T = len(frame_ids)
    noise = rng.standard_normal((T, config.feature_dim)) * config.noise_std
    features = protos[np.asarray(frame_ids)] + noise
    return Utterance(
        id=utt_id,
        features=features,
        labels=labels,
        label_end_frames=ends,
        speech_end_frame=speech_end,
        frame_ms=float(config.frame_ms),
    )


def generate_dataset(config: SynthConfig, seed: int, id_prefix: str = "utt") -> Dataset:
    """Draw ``config.utterance_count`` utterances from one seeded stream."""
    rng = np.random.default_rng(seed)
    protos = prototypes(config)
    utts = [generate_utterance(config, rng, protos, f"{id_prefix}{i:05d}")
            for i in range(config.utterance_count)]
    return Dataset(utts, config=config, seed=seed)


def write_jsonl(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for utt in dataset:
            fh.write(json.dumps(utt.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path: str | Path) -> Dataset:
    """Load a dataset; errors name the offending line."""
    utts = []
    seen: set[str] = set()
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise DatasetError("expected a JSON object")
                utt = Utterance.from_json(obj)
            except (json.JSONDecodeError, DatasetError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
            if utt.id in seen:
                raise DatasetError(f"{path}: line {lineno}: duplicate utterance id {utt.id!r}")
            seen.add(utt.id)
            utts.append(utt)
    return Dataset(utts)

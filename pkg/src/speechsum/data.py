"""Corpus plumbing: feature files, manifests, vocabulary, synthetic data.

The synthetic generator mirrors the structure of instructional-video
supervision at desk scale: each "video" is a sequence of symbol events
rendered as runs of noisy prototype frames, with a transcript (all
events), a short summary (first occurrences, capped), and a concept
set (symbols that recur).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# reserved vocabulary slots
PAD, BLANK, SOS, EOS, UNK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<blank>", "<sos>", "<eos>", "<unk>")

FEATURE_MAGIC = b"FEAT"
FEATURE_VERSION = 1


class FeatureFormatError(ValueError):
    """Feature file violates the FEAT layout; message carries the byte offset."""


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    features: str  # path relative to the manifest file
    transcript: str
    summary: str
    concepts: list[str]

    def target_text(self, task: str) -> str:
        if task == "asr":
            return self.transcript
        if task == "summarization":
            return self.summary
        if task == "concepts":
            return " ".join(self.concepts)
        raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# feature files: magic, u32 version, u32 rows, u32 cols, f32 row-major (all LE)
# ---------------------------------------------------------------------------


def write_features(path, matrix: np.ndarray) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2 or mat.shape[0] == 0 or mat.shape[1] == 0:
        raise ValueError(f"feature matrix must be non-empty 2-D, got {mat.shape}")
    if not np.isfinite(mat).all():
        raise ValueError("feature matrix must be finite")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, mat.shape[0], mat.shape[1]))
        f.write(mat.tobytes())


def read_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"bad magic at byte 0 in {path}")
    if len(blob) < 16:
        raise FeatureFormatError(f"truncated header at byte {len(blob)} in {path}")
    version, rows, cols = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported version {version} at byte 4 in {path}")
    expected = 16 + rows * cols * 4
    if len(blob) != expected:
        raise FeatureFormatError(
            f"payload ends at byte {len(blob)}, expected {expected} in {path}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    return data.reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# manifests: JSON Lines, one record per line
# ---------------------------------------------------------------------------


def write_manifest(path, records: list[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "features": rec.features,
                        "transcript": rec.transcript,
                        "summary": rec.summary,
                        "concepts": rec.concepts,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            raw = json.loads(line)
            rec = ManifestRecord(
                id=raw["id"],
                features=raw["features"],
                transcript=raw["transcript"],
                summary=raw["summary"],
                concepts=list(raw["concepts"]),
            )
            if rec.id in seen:
                raise ValueError(f"duplicate record id {rec.id!r} at line {line_no}")
            seen.add(rec.id)
            records.append(rec)
    return records


def resolve_features(manifest_path, rec: ManifestRecord) -> Path:
    return Path(manifest_path).parent / rec.features


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Word-level token<->id bijection with fixed reserved ids 0..4."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(w, UNK) for w in text.lower().split()]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if i in (PAD, SOS, EOS, BLANK):
                continue
            out.append(self.tokens[i])
        return out

    def to_json(self) -> list[str]:
        return self.tokens[len(RESERVED) :]

    @classmethod
    def from_json(cls, tokens: list[str]) -> "Vocabulary":
        return cls(tokens)


def build_vocab(records: list[ManifestRecord], task: str) -> Vocabulary:
    """Frequency-sorted word vocabulary over the task's target field
    (ties broken alphabetically), reserved tokens prepended."""
    if not records:
        raise ValueError("cannot build a vocabulary from an empty manifest")
    counts: dict[str, int] = {}
    for rec in records:
        for w in rec.target_text(task).lower().split():
            counts[w] = counts.get(w, 0) + 1
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ordered)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the synthetic long-input corpus."""

    n_symbols: int = 50
    events_min: int = 20
    events_max: int = 120
    frames_per_event_min: int = 5
    frames_per_event_max: int = 15
    feature_dim: int = 43
    noise_sigma: float = 0.1
    summary_max_symbols: int = 12
    concept_min_count: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.events_min < 1 or self.events_max < self.events_min:
            raise ValueError("invalid event count range")
        if self.frames_per_event_min < 1 or self.frames_per_event_max < self.frames_per_event_min:
            raise ValueError("invalid frames-per-event range")

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def summary_of(events: list[int], max_symbols: int) -> list[int]:
    """Distinct symbols in first-occurrence order, capped."""
    seen: list[int] = []
    for s in events:
        if s not in seen:
            seen.append(s)
            if len(seen) == max_symbols:
                break
    return seen


def concepts_of(events: list[int], min_count: int) -> list[int]:
    """Symbols occurring at least min_count times, in first-occurrence order."""
    counts: dict[int, int] = {}
    order: list[int] = []
    for s in events:
        counts[s] = counts.get(s, 0) + 1
        if s not in order:
            order.append(s)
    return [s for s in order if counts[s] >= min_count]


def _symbol_name(i: int) -> str:
    return f"s{i}"


def render_video(spec: SynthSpec, prototypes: np.ndarray, rng: np.random.Generator):
    """Sample one video: (features, events)."""
    n_events = int(rng.integers(spec.events_min, spec.events_max + 1))
    events = [int(s) for s in rng.integers(0, spec.n_symbols, size=n_events)]
    chunks = []
    for s in events:
        r = int(
            rng.integers(spec.frames_per_event_min, spec.frames_per_event_max + 1)
        )
        noise = rng.normal(size=(r, spec.feature_dim)) * spec.noise_sigma
        chunks.append(prototypes[s] + noise)
    return np.concatenate(chunks).astype(np.float32), events


def generate_corpus(spec: SynthSpec, n_train: int, n_test: int, out_dir):
    """Write train/test manifests plus feature files under out_dir.

    Deterministic per spec.seed: prototypes come from the root stream and
    every record gets its own spawned substream, so output trees are
    byte-identical across runs and worker layouts.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    prototypes = np.random.default_rng(root.spawn(1)[0]).normal(
        size=(spec.n_symbols, spec.feature_dim)
    )

    manifests = {}
    index = 0
    for split, count in (("train", n_train), ("test", n_test)):
        records = []
        for _ in range(count):
            rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1, index)))
            feats, events = render_video(spec, prototypes, rng)
            rec_id = f"{split}-{index:05d}"
            rel = f"features/{rec_id}.feat"
            write_features(out / rel, feats)
            records.append(
                ManifestRecord(
                    id=rec_id,
                    features=rel,
                    transcript=" ".join(_symbol_name(s) for s in events),
                    summary=" ".join(
                        _symbol_name(s)
                        for s in summary_of(events, spec.summary_max_symbols)
                    ),
                    concepts=[
                        _symbol_name(s)
                        for s in concepts_of(events, spec.concept_min_count)
                    ],
                )
            )
            index += 1
        path = out / f"{split}.jsonl"
        write_manifest(path, records)
        manifests[split] = path
    with open(out / "synth_spec.json", "w", encoding="utf-8") as f:
        json.dump(spec.__dict__, f, indent=2, sort_keys=True)
    return manifests

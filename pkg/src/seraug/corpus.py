"""Feature-file format, utterance manifests, fold splits, and sampling.

Feature tensors are stored in SERF files: a 16-byte little-endian header
(magic ``SERF``, version u32, L u16, D u16, T u32) followed by L*T*D float32
values in layer-major, frame-major order. Any producer emitting SERF files
plus a JSON-lines manifest is a compatible feature source; a Gaussian-blob
generator ships for desk-scale end-to-end runs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .utils import derive_np_rng, derive_rng, read_jsonl, write_jsonl

CLASSES = ("happy", "sad", "angry", "neutral")
CLASS_INDEX = {label: i for i, label in enumerate(CLASSES)}

# Emotion styles that carry over into SER training; everything else is
# excluded from the 4-class task. "excited" merges into happy.
STYLE_TO_LABEL = {
    "cheerful": "happy",
    "excited": "happy",
    "sad": "sad",
    "angry": "angry",
    "neutral": "neutral",
}

# The canonical SER corpus totals 5531 utterances across 5 sessions; used as
# a checksum for externally produced manifests.
REAL_CORPUS_CHECKSUM = 5531


def check_real_corpus_total(records: list["UtteranceRecord"]) -> bool:
    """True when the real-domain record count matches the canonical total.

    Desk-scale generated corpora will not match; callers treat a mismatch as
    advisory, not fatal.
    """
    return sum(1 for r in records if r.domain == "real") == REAL_CORPUS_CHECKSUM

SESSIONS = (1, 2, 3, 4, 5)
FRAMES_PER_SECOND = 50

_MAGIC = b"SERF"
_VERSION = 1
_HEADER = struct.Struct("<4sIHHI")


@dataclass
class UtteranceRecord:
    """One manifest row. Synthetic records carry their generation tuple."""

    id: str
    domain: str  # "real" | "synthetic"
    label: str | None
    session: int | None
    speaker: str
    duration_s: float
    text: str
    feature_path: str
    style: str | None = None
    narrative_style: str | None = None
    max_tokens: int | None = None

    def validate(self) -> None:
        if self.domain not in ("real", "synthetic"):
            raise DataError(f"record {self.id}: bad domain {self.domain!r}")
        if self.label is not None and self.label not in CLASSES:
            raise DataError(f"record {self.id}: bad label {self.label!r}")
        if self.domain == "real":
            if self.session not in SESSIONS:
                raise DataError(f"record {self.id}: real records need a session 1-5")
            if self.label is None:
                raise DataError(f"record {self.id}: real records need a label")
        if not self.duration_s > 0:
            raise DataError(f"record {self.id}: duration_s must be > 0")


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


@dataclass
class Item:
    """A loaded training example: features in 64-bit plus integer label."""

    id: str
    x: np.ndarray  # (L, T, D) float64
    label_idx: int
    domain_idx: int  # 0 = real, 1 = synthetic
    duration_s: float


def write_features(path: str | Path, tensor: np.ndarray) -> None:
    """Write one (L, T, D) tensor as a SERF file."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 3:
        raise DataError(f"feature tensor must be 3-dimensional, got shape {tensor.shape}")
    n_layers, n_frames, n_dims = tensor.shape
    if n_layers < 1 or n_frames < 1 or n_dims < 1:
        raise DataError(f"feature tensor axes must be positive, got shape {tensor.shape}")
    if not np.isfinite(tensor).all():
        raise DataError("feature tensor contains non-finite values")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(_MAGIC, _VERSION, n_layers, n_dims, n_frames)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    """Read a SERF file back into a (L, T, D) float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(raw)}",
            offset=len(raw),
        )
    magic, version, n_layers, n_dims, n_frames = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    expected = n_layers * n_frames * n_dims * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload length mismatch, expected {expected} bytes, "
            f"got {len(payload)}",
            offset=_HEADER.size + min(len(payload), expected),
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n_layers, n_frames, n_dims)
    return np.array(data)  # owned, writable copy


def map_style_to_label(style: str) -> str | None:
    """Map a synthesis style to its SER class, or None if out of task."""
    from .promptgen import DEFAULT_EMOTIONS

    if style in STYLE_TO_LABEL:
        return STYLE_TO_LABEL[style]
    if style in DEFAULT_EMOTIONS:
        return None
    raise DataError(f"unknown emotion style: {style!r}")


def make_folds(records: list[UtteranceRecord], seed: int) -> list[FoldSplit]:
    """Leave-one-session-out splits: fold k tests session k.

    The remaining four sessions are shuffled with a fold-derived seed and
    split 8:2 into train/val (floor on the val size). Candidate ids are
    sorted before shuffling, so splits do not depend on manifest order.
    """
    real = [r for r in records if r.domain == "real"]
    by_session: dict[int, list[str]] = {s: [] for s in SESSIONS}
    for rec in real:
        rec.validate()
        by_session[rec.session].append(rec.id)
    missing = [s for s in SESSIONS if not by_session[s]]
    if missing:
        raise DataError(f"no real utterances for sessions: {missing}")

    folds = []
    for k in SESSIONS:
        test_ids = sorted(by_session[k])
        rest = sorted(uid for s in SESSIONS if s != k for uid in by_session[s])
        rng = derive_rng(seed, "fold", k)
        rng.shuffle(rest)
        n_val = math.floor(len(rest) * 0.2)
        folds.append(
            FoldSplit(
                fold_index=k,
                train_ids=rest[n_val:],
                val_ids=rest[:n_val],
                test_ids=test_ids,
            )
        )
    return folds


def select_synthetic_subset(
    records: list[UtteranceRecord],
    max_token_bucket: int = 10,
    allowed_labels: tuple[str, ...] = CLASSES,
    narrative_style: str = "dialogue",
) -> list[UtteranceRecord]:
    """Filter synthetic records to the training-compatible subset.

    Keeps records generated as `narrative_style` with the given max-token
    bucket whose style maps onto an allowed SER class.
    """
    out = []
    for rec in records:
        if rec.domain != "synthetic":
            continue
        if rec.max_tokens != max_token_bucket or rec.narrative_style != narrative_style:
            continue
        label = map_style_to_label(rec.style) if rec.style else rec.label
        if label is None or label not in allowed_labels:
            continue
        out.append(rec)
    return out


def sample_ratio(
    synthetic: list[UtteranceRecord],
    real_train_count: int,
    ratio: float,
    seed: int,
) -> list[UtteranceRecord]:
    """Sample round(real_train_count * ratio) synthetic records.

    Sampling is without replacement, stratified by label with largest-remainder
    apportionment, so output class proportions track the pool's within +/-1
    per class. Deterministic per seed.
    """
    if ratio <= 0:
        raise DataError("ratio must be > 0")
    n_wanted = round(real_train_count * ratio)
    if n_wanted > len(synthetic):
        raise DataError(
            f"requested {n_wanted} synthetic records but only {len(synthetic)} available"
        )
    if n_wanted == 0:
        return []

    by_label: dict[str, list[UtteranceRecord]] = {}
    for rec in sorted(synthetic, key=lambda r: r.id):
        if rec.label is None:
            raise DataError(f"synthetic record {rec.id} has no label, select a subset first")
        by_label.setdefault(rec.label, []).append(rec)

    total = len(synthetic)
    labels = sorted(by_label)
    quotas = {lab: n_wanted * len(by_label[lab]) / total for lab in labels}
    counts = {lab: math.floor(quotas[lab]) for lab in labels}
    shortfall = n_wanted - sum(counts.values())
    for lab in sorted(labels, key=lambda l: (quotas[l] - counts[l], l), reverse=True)[:shortfall]:
        counts[lab] += 1

    rng = derive_rng(seed, "ratio-sample")
    chosen = []
    for lab in labels:
        pool = list(by_label[lab])
        rng.shuffle(pool)
        chosen.extend(pool[: counts[lab]])
    chosen.sort(key=lambda r: r.id)
    return chosen


def generate_blob_corpus(
    out_dir: str | Path,
    n_per_class: int = 25,
    n_synthetic: int = 0,
    dims: int = 12,
    t_range: tuple[int, int] = (10, 40),
    class_separation: float = 5.0,
    noise_std: float = 1.0,
    domain_shift: float = 0.0,
    n_layers: int = 1,
    seed: int = 0,
) -> list[UtteranceRecord]:
    """Generate a Gaussian-blob pseudo-feature corpus with SERF files.

    Real records: n_per_class per class, sessions round-robin 1-5 within each
    class. Synthetic records: n_synthetic total, classes round-robin (balanced
    to +/-1), offset by domain_shift along a fixed unit vector, and tagged as
    dialogue/max-token-10 so they pass subset selection. Class c's mean is
    class_separation along coordinate axis c; each frame adds N(0, noise_std)
    noise. Extra layers are scaled copies (layer l scaled by 1/(1+l)).
    Fully deterministic given the seed.

    Returns the records; writes manifest.jsonl and features/ under out_dir.
    """
    if class_separation <= 0:
        raise DataError("class_separation must be > 0")
    if dims < len(CLASSES):
        raise DataError(f"dims must be >= {len(CLASSES)} for distinct class directions")
    if not (1 <= t_range[0] <= t_range[1]):
        raise DataError(f"bad t_range {t_range}")

    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    rng = derive_np_rng(seed, "blob")
    shift_direction = np.ones(dims) / math.sqrt(dims)
    label_to_style = {"happy": "cheerful", "sad": "sad", "angry": "angry", "neutral": "neutral"}

    records: list[UtteranceRecord] = []

    def emit(rec_id: str, label: str, domain: str, session: int | None, speaker: str) -> None:
        class_idx = CLASS_INDEX[label]
        mean = np.zeros(dims)
        mean[class_idx] = class_separation
        if domain == "synthetic":
            mean = mean + domain_shift * shift_direction
        n_frames = int(rng.integers(t_range[0], t_range[1] + 1))
        base = mean + rng.normal(0.0, noise_std, size=(n_frames, dims))
        tensor = np.stack([base / (1 + layer) for layer in range(n_layers)])
        rel_path = f"features/{rec_id}.serf"
        write_features(out_dir / rel_path, tensor.astype(np.float32))
        records.append(
            UtteranceRecord(
                id=rec_id,
                domain=domain,
                label=label,
                session=session,
                speaker=speaker,
                duration_s=n_frames / FRAMES_PER_SECOND,
                text=f"{label} blob utterance",
                feature_path=rel_path,
                style=label_to_style[label] if domain == "synthetic" else None,
                narrative_style="dialogue" if domain == "synthetic" else None,
                max_tokens=10 if domain == "synthetic" else None,
            )
        )

    for label in CLASSES:
        for i in range(n_per_class):
            session = SESSIONS[i % len(SESSIONS)]
            emit(
                f"real-{label}-{i:04d}", label, "real", session,
                speaker=f"Ses{session}{'F' if i % 2 == 0 else 'M'}",
            )
    for i in range(n_synthetic):
        label = CLASSES[i % len(CLASSES)]
        emit(f"synth-{label}-{i:04d}", label, "synthetic", None, speaker=f"voice{i % 9}")

    features_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(out_dir / "manifest.jsonl", records)
    return records


def save_manifest(path: str | Path, records: list[UtteranceRecord]) -> None:
    write_jsonl(path, (asdict(r) for r in records))


def load_manifest(path: str | Path) -> list[UtteranceRecord]:
    records = []
    for row in read_jsonl(path):
        try:
            rec = UtteranceRecord(**row)
        except TypeError as exc:
            raise DataError(f"bad manifest row in {path}: {exc}") from exc
        rec.validate()
        records.append(rec)
    return records


def load_items(
    records: list[UtteranceRecord], base_dir: str | Path
) -> list[Item]:
    """Load feature tensors for records; promotes storage to 64-bit.

    Feature paths are resolved relative to `base_dir` (the manifest's
    directory).
    """
    base_dir = Path(base_dir)
    items = []
    for rec in records:
        if rec.label is None:
            raise DataError(f"record {rec.id} has no SER label")
        x = read_features(base_dir / rec.feature_path).astype(np.float64)
        items.append(
            Item(
                id=rec.id,
                x=x,
                label_idx=CLASS_INDEX[rec.label],
                domain_idx=0 if rec.domain == "real" else 1,
                duration_s=rec.duration_s,
            )
        )
    return items

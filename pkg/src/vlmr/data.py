"""Dataset manifests, binary feature files, and the synthetic generator.

Feature files are a fixed little-endian layout (magic, version, rows, cols
as u32, then row-major float32), widened to float64 on load. Manifests are
human-editable JSON so precomputed real features can be plugged in without
code changes. The synthetic generator plants a per-video concept vector
inside a hidden interval of the frame stream and echoes noisy copies of it
in the paired query's tokens, so the correct moment is recoverable and
learning is measurable at desk scale.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .proposals import Interval

FEATURE_MAGIC = b"VMRF"
FEATURE_VERSION = 1
DATA_ROOT_ENV = "VLMR_DATA_ROOT"


class DataError(ValueError):
    pass


class FeatureFileError(DataError):
    pass


class ManifestError(DataError):
    pass


# ---- binary feature files ---------------------------------------------

def write_features(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or min(matrix.shape) < 1:
        raise FeatureFileError(f"feature matrix must be 2-D and non-empty, got {matrix.shape}")
    payload = matrix.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(payload)


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise FeatureFileError(f"{path}: truncated header ({len(header)} of 16 bytes)")
        magic, rest = header[:4], header[4:]
        if magic != FEATURE_MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}")
        version, rows, cols = struct.unpack("<III", rest)
        if version != FEATURE_VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        if rows < 1 or cols < 1:
            raise FeatureFileError(f"{path}: empty extent rows={rows} cols={cols}")
        expected = rows * cols * 4
        payload = fh.read()
    if len(payload) != expected:
        raise FeatureFileError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return data.reshape(rows, cols)


# ---- manifests ---------------------------------------------------------

@dataclass(frozen=True)
class VideoEntry:
    id: str
    length: int
    features: str


@dataclass(frozen=True)
class QueryEntry:
    id: str
    features: str


@dataclass(frozen=True)
class Pair:
    video_id: str
    query_id: str
    gt: Interval | None
    split: str


@dataclass
class Manifest:
    dataset: str
    mode: str  # "frame-grid" | "segment-units"
    videos: dict[str, VideoEntry]
    queries: dict[str, QueryEntry]
    pairs: list[Pair]
    root: Path

    def resolve(self, relpath: str) -> Path:
        root = os.environ.get(DATA_ROOT_ENV)
        base = Path(root) if root else self.root
        return base / relpath


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc

    for key in ("dataset", "mode", "videos", "queries", "pairs"):
        if key not in raw:
            raise ManifestError(f"{path}: missing field {key!r}")
    if raw["mode"] not in ("frame-grid", "segment-units"):
        raise ManifestError(f"{path}: unknown mode {raw['mode']!r}")

    videos = {}
    for v in raw["videos"]:
        entry = VideoEntry(id=str(v["id"]), length=int(v["length"]), features=str(v["features"]))
        if entry.length < 1:
            raise ManifestError(f"{path}: video {entry.id} has non-positive length")
        if entry.id in videos:
            raise ManifestError(f"{path}: duplicate video id {entry.id}")
        videos[entry.id] = entry
    queries = {}
    for q in raw["queries"]:
        entry = QueryEntry(id=str(q["id"]), features=str(q["features"]))
        if entry.id in queries:
            raise ManifestError(f"{path}: duplicate query id {entry.id}")
        queries[entry.id] = entry

    manifest = Manifest(dataset=str(raw["dataset"]), mode=str(raw["mode"]),
                        videos=videos, queries=queries, pairs=[], root=path.parent)

    for p in raw["pairs"]:
        vid, qid = str(p["video"]), str(p["query"])
        if vid not in videos:
            raise ManifestError(f"{path}: pair references unknown video {vid!r}")
        if qid not in queries:
            raise ManifestError(f"{path}: pair references unknown query {qid!r}")
        gt = None
        if p.get("gt") is not None:
            raw_gt = p["gt"]
            if not (isinstance(raw_gt, list) and len(raw_gt) == 2):
                raise ManifestError(f"{path}: malformed gt {raw_gt!r} for ({vid}, {qid})")
            try:
                gt = Interval(int(raw_gt[0]), int(raw_gt[1]))
            except ValueError as exc:
                raise ManifestError(f"{path}: malformed gt {raw_gt!r} for ({vid}, {qid})") from exc
            if gt.end > videos[vid].length:
                raise ManifestError(
                    f"{path}: gt {raw_gt} exceeds video {vid} length {videos[vid].length}")
        manifest.pairs.append(Pair(video_id=vid, query_id=qid, gt=gt,
                                   split=str(p.get("split", "train"))))

    for entry in list(videos.values()) + list(queries.values()):
        resolved = manifest.resolve(entry.features)
        if not resolved.exists():
            raise ManifestError(f"{path}: feature file not found: {resolved}")
    return manifest


def save_manifest(manifest_dict: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest_dict, indent=2, sort_keys=True) + "\n")


class Dataset:
    """Manifest plus cached, validated feature access."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def open(cls, manifest_path) -> "Dataset":
        return cls(load_manifest(manifest_path))

    @property
    def mode(self) -> str:
        return self.manifest.mode

    def video_features(self, video_id: str) -> np.ndarray:
        entry = self.manifest.videos[video_id]
        key = f"v:{video_id}"
        if key not in self._cache:
            mat = load_features(self.manifest.resolve(entry.features))
            if mat.shape[0] != entry.length:
                raise ManifestError(
                    f"video {video_id}: manifest declares {entry.length} rows, "
                    f"file has {mat.shape[0]}")
            self._cache[key] = mat
        return self._cache[key]

    def query_tokens(self, query_id: str) -> np.ndarray:
        entry = self.manifest.queries[query_id]
        key = f"q:{query_id}"
        if key not in self._cache:
            self._cache[key] = load_features(self.manifest.resolve(entry.features))
        return self._cache[key]

    def pairs(self, split: str | None = None) -> list[Pair]:
        if split is None:
            return list(self.manifest.pairs)
        return [p for p in self.manifest.pairs if p.split == split]

    def dims(self) -> tuple[int, int]:
        """(token dim, raw frame dim), validated consistent across files."""
        d_emb = d_raw = None
        for p in self.manifest.pairs:
            tok = self.query_tokens(p.query_id)
            frm = self.video_features(p.video_id)
            if d_emb is None:
                d_emb, d_raw = tok.shape[1], frm.shape[1]
            elif tok.shape[1] != d_emb or frm.shape[1] != d_raw:
                raise ManifestError(
                    f"inconsistent feature dims at pair ({p.video_id}, {p.query_id})")
        if d_emb is None:
            raise ManifestError("manifest has no pairs")
        return d_emb, d_raw


# ---- synthetic planted-alignment generator -----------------------------

@dataclass
class SyntheticSpec:
    videos: int = 250
    test_videos: int = 50
    frames: int = 240
    d_raw: int = 32
    token_range: tuple[int, int] = (5, 10)
    concept_dim: int = 32
    noise: float = 0.1
    planted_len_range: tuple[int, int] = (64, 128)
    seed: int = 0

    def __post_init__(self):
        self.token_range = tuple(self.token_range)
        self.planted_len_range = tuple(self.planted_len_range)
        if self.noise < 0:
            raise DataError(f"noise scale must be >= 0, got {self.noise}")
        if self.planted_len_range[1] > self.frames:
            raise DataError(
                f"planted interval length {self.planted_len_range[1]} exceeds "
                f"video length {self.frames}")
        if not 1 <= self.concept_dim <= self.d_raw:
            raise DataError(f"concept_dim must be in [1, d_raw], got {self.concept_dim}")
        if not 0 <= self.test_videos < self.videos:
            raise DataError("test_videos must leave at least one training video")


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write feature files plus manifest.json under `out_dir`; returns the
    manifest path. Byte-deterministic in the seed."""
    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    videos, queries, pairs = [], [], []
    n_train = spec.videos - spec.test_videos
    for i in range(spec.videos):
        vid, qid = f"v{i:04d}", f"q{i:04d}"
        concept = np.zeros(spec.d_raw)
        raw = rng.standard_normal(spec.concept_dim)
        concept[:spec.concept_dim] = raw / np.linalg.norm(raw)

        length = int(rng.integers(spec.planted_len_range[0], spec.planted_len_range[1] + 1))
        start = int(rng.integers(0, spec.frames - length + 1))
        frames = spec.noise * rng.standard_normal((spec.frames, spec.d_raw))
        frames[start:start + length] += concept

        n_tokens = int(rng.integers(spec.token_range[0], spec.token_range[1] + 1))
        n_distract = n_tokens // 3
        tokens = np.empty((n_tokens, spec.d_raw))
        for t in range(n_tokens - n_distract):
            tokens[t] = concept + spec.noise * rng.standard_normal(spec.d_raw)
        for t in range(n_tokens - n_distract, n_tokens):
            direction = rng.standard_normal(spec.d_raw)
            tokens[t] = direction / np.linalg.norm(direction) \
                + spec.noise * rng.standard_normal(spec.d_raw)
        tokens = tokens[rng.permutation(n_tokens)]

        write_features(features_dir / f"{vid}.bin", frames)
        write_features(features_dir / f"{qid}.bin", tokens)
        videos.append({"id": vid, "length": spec.frames, "features": f"features/{vid}.bin"})
        queries.append({"id": qid, "features": f"features/{qid}.bin"})
        pairs.append({"video": vid, "query": qid, "gt": [start, start + length],
                      "split": "train" if i < n_train else "test"})

    manifest_path = out_dir / "manifest.json"
    save_manifest({"dataset": "synthetic", "mode": "frame-grid",
                   "videos": videos, "queries": queries, "pairs": pairs},
                  manifest_path)
    return manifest_path


@dataclass
class SeparationReport:
    ok: bool
    worst_margin: float
    failures: list[tuple[str, str]] = field(default_factory=list)


def verify_separation(dataset: Dataset) -> SeparationReport:
    """Check the planted signal: each video's mean in-interval frame must be
    strictly closer (cosine) to its own query's mean token than to any other
    query's."""
    pairs = dataset.pairs()
    query_means = {}
    for p in pairs:
        tok = dataset.query_tokens(p.query_id)
        query_means[p.query_id] = tok.mean(axis=0)

    worst = np.inf
    failures = []
    for p in pairs:
        if p.gt is None:
            continue
        frames = dataset.video_features(p.video_id)
        v = frames[p.gt.start:p.gt.end].mean(axis=0)
        v = v / np.linalg.norm(v)

        def cos(q):
            return float(v @ q / np.linalg.norm(q))

        own = cos(query_means[p.query_id])
        for qid, qmean in query_means.items():
            if qid == p.query_id:
                continue
            margin = own - cos(qmean)
            if margin < worst:
                worst = margin
            if margin <= 0:
                failures.append((p.video_id, qid))
    return SeparationReport(ok=not failures, worst_margin=float(worst), failures=failures)

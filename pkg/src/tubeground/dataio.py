"""File formats and dataset tooling.

Covers the annotation JSON schema, dataset manifests, the binary feature
file, the named-array archive used for parameter checkpoints and raw
predictions, dataset validation with per-field error kinds, and split
statistics. All binary payloads are little-endian regardless of host.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tubeground.encoder import FeatureBundle
from tubeground.geometry import check_segment

__all__ = [
    "tokenize",
    "Mention",
    "TargetTrack",
    "AnnotationRecord",
    "AnnotationError",
    "parse_annotation",
    "record_to_dict",
    "load_annotation",
    "save_annotation",
    "ManifestEntry",
    "load_manifest",
    "save_manifest",
    "ValidationIssue",
    "ValidationReport",
    "validate_dataset",
    "read_features",
    "write_features",
    "read_arrays",
    "write_arrays",
    "DatasetStats",
    "dataset_stats",
]

SCHEMA_VERSION = 1
MAX_TARGETS = 10

FEATURE_MAGIC = b"TGFB"
ARCHIVE_MAGIC = b"TGNA"
BINARY_VERSION = 1
# refuse absurd headers before allocating: per-block element cap
_MAX_ELEMENTS = 1 << 31

_TOKEN_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)?", re.UNICODE)


def tokenize(text: str) -> list:
    """Lowercased whitespace-and-punctuation tokenization.

    Mention spans in annotations are defined against this tokenizer.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Mention:
    """One object mention in the query: class word, token span, multiplicity.

    ``span`` is (start, end) with end exclusive, indexing into the token list.
    """

    class_word: str
    span: tuple
    count: int = 1


@dataclass
class TargetTrack:
    """One target's box track: frame index -> (cx, cy, w, h)."""

    class_word: str
    mention: int
    boxes: dict


@dataclass
class AnnotationRecord:
    video_id: str
    num_frames: int
    fps: float
    query: str
    tokens: list
    mentions: list
    segment: tuple
    targets: list

    @property
    def target_count(self) -> int:
        return len(self.targets)


class AnnotationError(ValueError):
    """Annotation that cannot be used; ``kind`` names the violation class.

    Kinds: syntax, token-mismatch, target-count, mention-count, span-range,
    segment-bounds, track-coverage, box-range, mention-ref.
    """

    def __init__(self, kind: str, path: str, message: str):
        super().__init__(f"[{kind}] {path}: {message}")
        self.kind = kind
        self.path = path


@dataclass
class ValidationIssue:
    kind: str
    path: str
    message: str


def _require(data: dict, key: str, types, path: str, issues: list):
    if key not in data:
        issues.append(ValidationIssue("syntax", f"{path}.{key}", "missing field"))
        return None
    value = data[key]
    if not isinstance(value, types):
        issues.append(ValidationIssue("syntax", f"{path}.{key}", f"expected {types}, got {type(value).__name__}"))
        return None
    return value


def _collect_issues(data) -> list:
    issues: list = []
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            return [ValidationIssue("syntax", "$", f"invalid JSON: {exc}")]
    if not isinstance(data, dict):
        return [ValidationIssue("syntax", "$", "annotation must be a JSON object")]

    video_id = _require(data, "video_id", str, "$", issues)
    num_frames = _require(data, "num_frames", int, "$", issues)
    _require(data, "fps", (int, float), "$", issues)
    query = _require(data, "query", str, "$", issues)
    tokens = _require(data, "tokens", list, "$", issues)
    mentions = _require(data, "mentions", list, "$", issues)
    segment = _require(data, "segment", list, "$", issues)
    targets = _require(data, "targets", list, "$", issues)
    if issues:
        return issues

    if tokens != tokenize(query):
        issues.append(ValidationIssue("token-mismatch", "$.tokens", "tokens do not match the tokenized query"))

    if not 1 <= len(targets) <= MAX_TARGETS:
        issues.append(
            ValidationIssue("target-count", "$.targets", f"target count {len(targets)} outside [1, {MAX_TARGETS}]")
        )

    n_tokens = len(tokens)
    for i, m in enumerate(mentions):
        path = f"$.mentions[{i}]"
        if not isinstance(m, dict) or not isinstance(m.get("class_word"), str) \
                or not isinstance(m.get("span"), list) or len(m.get("span", [])) != 2:
            issues.append(ValidationIssue("syntax", path, "mention needs class_word and a 2-element span"))
            continue
        lo, hi = m["span"]
        if not (isinstance(lo, int) and isinstance(hi, int) and 0 <= lo < hi <= n_tokens):
            issues.append(ValidationIssue("span-range", f"{path}.span", f"span [{lo}, {hi}) outside tokens [0, {n_tokens})"))
        if not isinstance(m.get("count", 1), int) or m.get("count", 1) < 1:
            issues.append(ValidationIssue("mention-count", f"{path}.count", "count must be a positive integer"))

    if not any(i.kind == "mention-count" for i in issues) and all(isinstance(m, dict) for m in mentions):
        total = sum(int(m.get("count", 1)) for m in mentions)
        if total != len(targets):
            issues.append(
                ValidationIssue("mention-count", "$.mentions", f"mention counts sum to {total}, but there are {len(targets)} targets")
            )

    seg = None
    if len(segment) != 2 or not all(isinstance(x, int) for x in segment):
        issues.append(ValidationIssue("syntax", "$.segment", "segment must be [start, end] integers"))
    else:
        try:
            seg = check_segment(segment, num_frames if isinstance(num_frames, int) else None)
        except ValueError as exc:
            issues.append(ValidationIssue("segment-bounds", "$.segment", str(exc)))

    for t, target in enumerate(targets):
        path = f"$.targets[{t}]"
        if not isinstance(target, dict) or not isinstance(target.get("class_word"), str) \
                or not isinstance(target.get("mention"), int) or not isinstance(target.get("track"), dict):
            issues.append(ValidationIssue("syntax", path, "target needs class_word, mention index, and track"))
            continue
        mi = target["mention"]
        if not 0 <= mi < len(mentions):
            issues.append(ValidationIssue("mention-ref", f"{path}.mention", f"mention index {mi} out of range"))
        elif isinstance(mentions[mi], dict) and mentions[mi].get("class_word") != target["class_word"]:
            issues.append(ValidationIssue("mention-ref", f"{path}.class_word", "class word differs from the referenced mention"))

        track = target["track"]
        frames = []
        bad_box = False
        for key, box in track.items():
            try:
                frames.append(int(key))
            except (TypeError, ValueError):
                issues.append(ValidationIssue("syntax", f"{path}.track[{key!r}]", "frame keys must be integers"))
                continue
            if not (isinstance(box, list) and len(box) == 4 and all(isinstance(v, (int, float)) for v in box)):
                issues.append(ValidationIssue("syntax", f"{path}.track[{key}]", "box must be [cx, cy, w, h]"))
                continue
            if not all(0.0 <= float(v) <= 1.0 for v in box):
                bad_box = True
        if bad_box:
            issues.append(ValidationIssue("box-range", f"{path}.track", "box coordinates outside [0, 1]"))
        if seg is not None:
            expected = set(range(seg[0], seg[1] + 1))
            if set(frames) != expected:
                issues.append(
                    ValidationIssue("track-coverage", f"{path}.track", "track frames do not cover exactly the segment")
                )
    return issues


def parse_annotation(data) -> AnnotationRecord:
    """Parse and validate one annotation; raises AnnotationError on the
    first violation (all violations are reported by validate_dataset)."""
    issues = _collect_issues(data)
    if issues:
        first = issues[0]
        raise AnnotationError(first.kind, first.path, first.message)
    if isinstance(data, (str, bytes)):
        data = json.loads(data)
    mentions = [Mention(m["class_word"], (m["span"][0], m["span"][1]), int(m.get("count", 1))) for m in data["mentions"]]
    targets = [
        TargetTrack(
            class_word=t["class_word"],
            mention=t["mention"],
            boxes={int(k): np.asarray(v, dtype=np.float64) for k, v in t["track"].items()},
        )
        for t in data["targets"]
    ]
    return AnnotationRecord(
        video_id=data["video_id"],
        num_frames=int(data["num_frames"]),
        fps=float(data["fps"]),
        query=data["query"],
        tokens=list(data["tokens"]),
        mentions=mentions,
        segment=(int(data["segment"][0]), int(data["segment"][1])),
        targets=targets,
    )


def record_to_dict(record: AnnotationRecord) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "video_id": record.video_id,
        "num_frames": record.num_frames,
        "fps": record.fps,
        "query": record.query,
        "tokens": list(record.tokens),
        "mentions": [
            {"class_word": m.class_word, "span": [m.span[0], m.span[1]], "count": m.count} for m in record.mentions
        ],
        "segment": [record.segment[0], record.segment[1]],
        "targets": [
            {
                "class_word": t.class_word,
                "mention": t.mention,
                "track": {str(k): [float(x) for x in t.boxes[k]] for k in sorted(t.boxes)},
            }
            for t in record.targets
        ],
    }


def load_annotation(path) -> AnnotationRecord:
    return parse_annotation(Path(path).read_text())


def save_annotation(path, record: AnnotationRecord) -> None:
    Path(path).write_text(json.dumps(record_to_dict(record), sort_keys=True, indent=1) + "\n")


@dataclass
class ManifestEntry:
    video_id: str
    annotation: Path
    features: Path


def load_manifest(path) -> list:
    """Read a manifest; relative sample paths are resolved against it."""
    path = Path(path)
    data = json.loads(path.read_text())
    if not isinstance(data, dict) or not isinstance(data.get("samples"), list):
        raise ValueError(f"{path}: manifest must hold a 'samples' list")
    base = path.parent
    entries = []
    for i, s in enumerate(data["samples"]):
        if not isinstance(s, dict) or "video_id" not in s:
            raise ValueError(f"{path}: sample {i} needs a video_id")
        entries.append(
            ManifestEntry(
                video_id=s["video_id"],
                annotation=base / s["annotation"],
                features=base / s["features"],
            )
        )
    return entries


def save_manifest(path, entries, meta: dict | None = None) -> None:
    path = Path(path)
    base = path.parent
    data = {
        "schema_version": SCHEMA_VERSION,
        "meta": meta or {},
        "samples": [
            {
                "video_id": e.video_id,
                "annotation": str(Path(e.annotation).relative_to(base)),
                "features": str(Path(e.features).relative_to(base)),
            }
            for e in entries
        ],
    }
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


@dataclass
class ValidationReport:
    checked: int = 0
    failures: list = field(default_factory=list)  # (video_id, [ValidationIssue])

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list:
        out = [f"checked {self.checked} records, {len(self.failures)} failed"]
        for video_id, issues in self.failures:
            for issue in issues:
                out.append(f"  {video_id}: [{issue.kind}] {issue.path}: {issue.message}")
        return out


def validate_dataset(entries) -> ValidationReport:
    """Validate every annotation in a manifest; failures are data, not errors."""
    report = ValidationReport()
    for entry in entries:
        report.checked += 1
        try:
            raw = Path(entry.annotation).read_text()
        except OSError as exc:
            report.failures.append((entry.video_id, [ValidationIssue("syntax", "$", f"unreadable: {exc}")]))
            continue
        issues = _collect_issues(raw)
        if issues:
            report.failures.append((entry.video_id, issues))
    return report


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"{path}: truncated payload while reading {what}")
    return buf


def write_features(path, bundle: FeatureBundle) -> None:
    """Write a feature bundle: fixed header then float32 blocks."""
    n_v, h, w, d_a = bundle.appearance.shape
    d_m = bundle.motion.shape[3]
    n_t, d_t = bundle.text.shape
    header = np.array([BINARY_VERSION, n_v, h, w, d_a, d_m, n_t, d_t], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(bundle.appearance, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bundle.motion, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bundle.text, dtype="<f4").tobytes())


def read_features(path) -> FeatureBundle:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file (magic {magic!r})")
        header = np.frombuffer(_read_exact(fh, 32, path, "header"), dtype="<u4")
        version, n_v, h, w, d_a, d_m, n_t, d_t = (int(x) for x in header)
        if version != BINARY_VERSION:
            raise ValueError(f"{path}: unsupported feature file version {version}")
        shapes = [(n_v, h, w, d_a), (n_v, h, w, d_m), (n_t, d_t)]
        blocks = []
        for shape in shapes:
            count = int(np.prod(shape, dtype=np.int64))
            if count <= 0 or count > _MAX_ELEMENTS:
                raise ValueError(f"{path}: header dimensions overflow ({shape})")
            raw = _read_exact(fh, 4 * count, path, f"block {shape}")
            blocks.append(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape))
        if fh.read(1):
            raise ValueError(f"{path}: trailing data after declared payload")
    return FeatureBundle(appearance=blocks[0], motion=blocks[1], text=blocks[2])


_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


def write_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays: a JSON descriptor listing names/dtypes/shapes,
    then the raw little-endian payload in descriptor order."""
    entries = []
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = {"f": "<f4" if arr.dtype.itemsize == 4 else "<f8", "i": "<i8"}.get(arr.dtype.kind)
        if code is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=code).tobytes())
    descriptor = json.dumps(
        {"version": BINARY_VERSION, "meta": meta or {}, "entries": entries}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(np.array([len(descriptor)], dtype="<u4").tobytes())
        fh.write(descriptor)
        for block in payload:
            fh.write(block)


def read_arrays(path):
    """Read a named-array archive; returns (arrays dict, meta dict)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != ARCHIVE_MAGIC:
            raise ValueError(f"{path}: not a named-array archive (magic {magic!r})")
        (head_len,) = np.frombuffer(_read_exact(fh, 4, path, "descriptor length"), dtype="<u4")
        descriptor = json.loads(_read_exact(fh, int(head_len), path, "descriptor"))
        if descriptor.get("version") != BINARY_VERSION:
            raise ValueError(f"{path}: unsupported archive version {descriptor.get('version')}")
        arrays = {}
        for entry in descriptor["entries"]:
            dtype = entry["dtype"]
            if dtype not in _DTYPES:
                raise ValueError(f"{path}: unsupported dtype {dtype}")
            shape = tuple(int(x) for x in entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if count < 0 or count > _MAX_ELEMENTS:
                raise ValueError(f"{path}: descriptor dimensions overflow ({shape})")
            raw = _read_exact(fh, np.dtype(dtype).itemsize * count, path, entry["name"])
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(_DTYPES[dtype])
        if fh.read(1):
            raise ValueError(f"{path}: trailing data after declared payload")
    return arrays, descriptor.get("meta", {})


def subset_of(target_count: int) -> str:
    """Split bucket by target count: low 1-3, medium 4-6, high >= 7."""
    if target_count <= 3:
        return "low"
    if target_count <= 6:
        return "medium"
    return "high"


@dataclass
class DatasetStats:
    n_videos: int
    mean_frames: float
    mean_targets: float
    mean_boxes: float
    target_histogram: dict
    subsets: dict

    def lines(self) -> list:
        hist = ", ".join(f"{k}:{v}" for k, v in sorted(self.target_histogram.items()))
        return [
            f"videos            {self.n_videos}",
            f"mean frames       {self.mean_frames:.1f}",
            f"mean targets      {self.mean_targets:.2f}",
            f"mean boxes/video  {self.mean_boxes:.1f}",
            f"target histogram  {hist}",
            f"subsets           low={self.subsets['low']} medium={self.subsets['medium']} high={self.subsets['high']}",
        ]


def dataset_stats(records) -> DatasetStats:
    records = list(records)
    if not records:
        raise ValueError("cannot compute statistics of an empty manifest")
    hist: dict = {}
    subsets = {"low": 0, "medium": 0, "high": 0}
    boxes = 0
    for r in records:
        hist[r.target_count] = hist.get(r.target_count, 0) + 1
        subsets[subset_of(r.target_count)] += 1
        boxes += sum(len(t.boxes) for t in r.targets)
    return DatasetStats(
        n_videos=len(records),
        mean_frames=sum(r.num_frames for r in records) / len(records),
        mean_targets=sum(r.target_count for r in records) / len(records),
        mean_boxes=boxes / len(records),
        target_histogram=hist,
        subsets=subsets,
    )

"""Interchange-directory inspection and conversion to bundle files.

Interchange layout: one subdirectory per slide containing

    header.json   UTF-8 JSON {slide_id, label, N, K, d, dtype: "float32le",
                  optional free-form grid geometry notes}
    scan.f32le    raw little-endian float32, N*d values, row-major
    sub.f32le     raw little-endian float32, N*K*d values, region-major

Bundle output format ("RLGB", independent reimplementation of the published
layout): magic "RLGB", u32 version=1, u32 N, u32 K, u32 d, u8 label,
u8 has_region_truth, then the scan and sub float payloads verbatim.
Conversion copies payload bytes as-is — floats are never re-encoded.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER_NAME = "header.json"
SCAN_NAME = "scan.f32le"
SUB_NAME = "sub.f32le"

BUNDLE_MAGIC = b"RLGB"
BUNDLE_VERSION = 1
_BUNDLE_HEADER = struct.Struct("<4sIIIIBB")
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

_REQUIRED_KEYS = ("slide_id", "label", "N", "K", "d", "dtype")


class IngestError(Exception):
    pass


@dataclass
class Issue:
    slide: str          # slide directory name (slide_id once known)
    kind: str           # machine-matchable defect class
    message: str
    severity: str = "error"   # error | warning

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class InterchangeSlide:
    slide_id: str
    label: int
    N: int
    K: int
    d: int
    scan_bytes: bytes
    sub_bytes: bytes


@dataclass
class Report:
    input_dir: str
    slides: list[dict] = field(default_factory=list)
    issues: list[Issue] = field(default_factory=list)

    @property
    def n_errors(self) -> int:
        return sum(1 for i in self.issues if i.severity == "error")

    @property
    def n_warnings(self) -> int:
        return sum(1 for i in self.issues if i.severity == "warning")

    def to_json(self) -> dict:
        return {"input_dir": self.input_dir,
                "n_slides": len(self.slides),
                "n_errors": self.n_errors,
                "n_warnings": self.n_warnings,
                "slides": self.slides,
                "issues": [i.to_json() for i in self.issues]}


def _first_nonfinite_offset(payload: bytes) -> int | None:
    """Byte offset of the first non-finite float32 in a raw payload."""
    values = np.frombuffer(payload, dtype="<f4")
    bad = ~np.isfinite(values)
    if not bad.any():
        return None
    return 4 * int(np.argmax(bad))


def inspect_slide(slide_dir: str):
    """Read and check one interchange slide directory.

    Returns (InterchangeSlide | None, issues). A slide is returned only when
    every check passes; issues carry the defect details either way.
    """
    name = os.path.basename(os.path.normpath(slide_dir))
    issues: list[Issue] = []
    header_path = os.path.join(slide_dir, HEADER_NAME)
    try:
        with open(header_path, encoding="utf-8") as f:
            header = json.load(f)
    except FileNotFoundError:
        return None, [Issue(name, "missing-file", f"{HEADER_NAME} not found")]
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        return None, [Issue(name, "bad-header", f"{HEADER_NAME}: {e}")]
    if not isinstance(header, dict):
        return None, [Issue(name, "bad-header",
                            f"{HEADER_NAME} must hold a JSON object")]
    missing = [k for k in _REQUIRED_KEYS if k not in header]
    if missing:
        return None, [Issue(name, "bad-header",
                            f"missing header keys: {', '.join(missing)}")]
    slide_id = str(header["slide_id"])
    if header["dtype"] != "float32le":
        issues.append(Issue(slide_id, "bad-dtype",
                            f"unsupported dtype {header['dtype']!r}"))
    try:
        N, K, d = int(header["N"]), int(header["K"]), int(header["d"])
        label = int(header["label"])
    except (TypeError, ValueError):
        return None, issues + [Issue(slide_id, "bad-header",
                                     "N/K/d/label must be integers")]
    if min(N, K, d) < 1:
        issues.append(Issue(slide_id, "bad-dimensions",
                            f"non-positive dimensions N={N} K={K} d={d}"))
    if label not in (0, 1):
        issues.append(Issue(slide_id, "bad-label",
                            f"label must be 0 or 1, got {label}"))
    if issues:
        return None, issues

    payloads = {}
    for fname, expected in ((SCAN_NAME, 4 * N * d), (SUB_NAME, 4 * N * K * d)):
        path = os.path.join(slide_dir, fname)
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except FileNotFoundError:
            issues.append(Issue(slide_id, "missing-file", f"{fname} not found"))
            continue
        if len(blob) != expected:
            issues.append(Issue(
                slide_id, "length-mismatch",
                f"{fname}: expected {expected} bytes, got {len(blob)}"))
            continue
        offset = _first_nonfinite_offset(blob)
        if offset is not None:
            issues.append(Issue(
                slide_id, "non-finite",
                f"{fname}: non-finite value at byte offset {offset}"))
            continue
        payloads[fname] = blob
    if issues:
        return None, issues
    return InterchangeSlide(slide_id=slide_id, label=label, N=N, K=K, d=d,
                            scan_bytes=payloads[SCAN_NAME],
                            sub_bytes=payloads[SUB_NAME]), []


def _slide_dirs(in_dir: str) -> list[str]:
    if not os.path.isdir(in_dir):
        raise IngestError(f"input directory {in_dir} does not exist")
    return sorted(os.path.join(in_dir, n) for n in os.listdir(in_dir)
                  if os.path.isdir(os.path.join(in_dir, n)))


def _inspect_all(in_dir: str):
    """Shared walk for validate and convert: per-slide checks plus the
    cross-slide ones (duplicate ids, feature-width disagreement)."""
    report = Report(input_dir=os.path.abspath(in_dir))
    slides: list[InterchangeSlide] = []
    seen_ids: set[str] = set()
    widths: dict[int, str] = {}
    for slide_dir in _slide_dirs(in_dir):
        slide, issues = inspect_slide(slide_dir)
        report.issues.extend(issues)
        if slide is None:
            continue
        if slide.slide_id in seen_ids:
            report.issues.append(Issue(
                slide.slide_id, "duplicate-id",
                f"slide_id {slide.slide_id!r} appears more than once"))
            continue
        seen_ids.add(slide.slide_id)
        if widths and slide.d not in widths:
            report.issues.append(Issue(
                slide.slide_id, "dim-mismatch",
                f"d={slide.d} differs from {sorted(widths)[0]} "
                f"(first seen in {widths[sorted(widths)[0]]}); bundles permit "
                "this but training requires uniform d", severity="warning"))
        widths.setdefault(slide.d, slide.slide_id)
        report.slides.append({"slide_id": slide.slide_id, "label": slide.label,
                              "N": slide.N, "K": slide.K, "d": slide.d})
        slides.append(slide)
    return report, slides


def validate(in_dir: str) -> Report:
    """Dry-run of convert: same checks, no writes."""
    report, _slides = _inspect_all(in_dir)
    return report


def _dataset_digest(slides: list[InterchangeSlide]) -> str:
    h = hashlib.sha256()
    for s in slides:
        h.update(f"{s.slide_id}|{s.label}|{s.N}|{s.K}|{s.d}\n".encode())
    return "ingest:" + h.hexdigest()[:16]


def write_bundle(slide: InterchangeSlide, path: str):
    header = _BUNDLE_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, slide.N,
                                 slide.K, slide.d, slide.label, 0)
    with open(path, "wb") as f:
        f.write(header)
        f.write(slide.scan_bytes)   # verbatim payload copy
        f.write(slide.sub_bytes)


def convert(in_dir: str, out_dir: str):
    """Convert every valid slide to a bundle file and emit a manifest.

    Returns (manifest_path | None, Report). Defective slides are skipped and
    reported; the manifest covers the converted ones only and is omitted when
    nothing converted.
    """
    report, slides = _inspect_all(in_dir)
    bundle_dir = os.path.join(out_dir, "bundles")
    os.makedirs(bundle_dir, exist_ok=True)
    entries = []
    for slide in slides:
        rel = os.path.join("bundles", f"{slide.slide_id}.rlgb")
        write_bundle(slide, os.path.join(out_dir, rel))
        entries.append({"id": slide.slide_id, "path": rel,
                        "label": slide.label, "n_regions": slide.N})
    manifest_path = None
    if entries:
        manifest_path = os.path.join(out_dir, MANIFEST_NAME)
        with open(manifest_path, "w") as f:
            json.dump({"version": MANIFEST_VERSION,
                       "config_digest": _dataset_digest(slides),
                       "slides": entries}, f, indent=1)
    return manifest_path, report


def export_bundle(bundle_path: str, out_dir: str, notes: str | None = None):
    """Inverse helper: unpack one bundle file into an interchange directory
    (region truth, if present, has no interchange representation and is
    dropped). Used for round-trip testing and for re-exporting datasets."""
    with open(bundle_path, "rb") as f:
        blob = f.read()
    if blob[:4] != BUNDLE_MAGIC:
        raise IngestError(f"{bundle_path}: bad bundle magic {blob[:4]!r}")
    magic, version, N, K, d, label, has_truth = _BUNDLE_HEADER.unpack_from(blob)
    if version != BUNDLE_VERSION:
        raise IngestError(f"{bundle_path}: unsupported bundle version {version}")
    scan_len, sub_len = 4 * N * d, 4 * N * K * d
    expected = _BUNDLE_HEADER.size + scan_len + sub_len + (N if has_truth else 0)
    if len(blob) != expected:
        raise IngestError(f"{bundle_path}: expected {expected} bytes, "
                          f"got {len(blob)}")
    slide_id = os.path.splitext(os.path.basename(bundle_path))[0]
    slide_dir = os.path.join(out_dir, slide_id)
    os.makedirs(slide_dir, exist_ok=True)
    header = {"slide_id": slide_id, "label": int(label), "N": N, "K": K,
              "d": d, "dtype": "float32le"}
    if notes:
        header["notes"] = notes
    with open(os.path.join(slide_dir, HEADER_NAME), "w", encoding="utf-8") as f:
        json.dump(header, f, indent=1)
    off = _BUNDLE_HEADER.size
    with open(os.path.join(slide_dir, SCAN_NAME), "wb") as f:
        f.write(blob[off:off + scan_len])
    with open(os.path.join(slide_dir, SUB_NAME), "wb") as f:
        f.write(blob[off + scan_len:off + scan_len + sub_len])
    return slide_dir

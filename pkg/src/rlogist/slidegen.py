"""Synthetic two-level slide bundles with planted diagnostic regions, plus the
binary bundle format and JSON dataset manifests.

Generative process per slide:
    slide latent   b   ~ Normal(0, sigma_b^2 I_d)          (shared shift)
    sub-patch      v_j^i = b + z_ij * delta * u + Normal(0, sigma_sub^2 I_d)
    scanning level v_i   = mean_j(v_j^i) + Normal(0, sigma_scan^2 I_d)
where u is the first basis direction and z_ij marks diagnostic sub-patches
inside planted positive regions.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

MAGIC = b"RLGB"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIIIIBB")  # magic, version, N, K, d, label, truth flag


class SlidegenError(Exception):
    pass


class GenerationError(SlidegenError):
    pass


class FormatError(SlidegenError):
    pass


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class DimensionError(FormatError):
    pass


class ManifestError(SlidegenError):
    pass


@dataclass
class GenConfig:
    d: int = 16
    K: int = 16
    N_range: tuple[int, int] = (32, 128)
    positive_region_fraction_range: tuple[float, float] = (0.05, 0.20)
    positive_subpatch_fraction: float = 0.5
    class_signal: float = 2.0
    sigma_sub: float = 1.0
    sigma_scan: float = 0.45
    sigma_b: float = 1.0
    class_balance: float = 0.5
    seed: int = 0

    def validate(self):
        if self.d < 1 or self.K < 1:
            raise GenerationError("d and K must be >= 1")
        lo, hi = self.N_range
        if lo < 1 or hi < lo:
            raise GenerationError("empty N_range")
        for frac in (*self.positive_region_fraction_range,
                     self.positive_subpatch_fraction, self.class_balance):
            if not 0.0 < frac < 1.0:
                raise GenerationError(f"fraction {frac} outside (0,1)")
        for scales in (self.sigma_sub,):
            if scales <= 0:
                raise GenerationError("noise scales must be positive")
        if self.sigma_scan < 0 or self.sigma_b < 0:
            raise GenerationError("noise scales must be nonnegative")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SlideBundle:
    slide_id: str
    label: int
    scan_features: np.ndarray  # (N, d) float32
    sub_features: np.ndarray   # (N, K, d) float32
    region_truth: np.ndarray | None = None  # (N,) bool, diagnostics only

    @property
    def N(self) -> int:
        return self.scan_features.shape[0]

    @property
    def K(self) -> int:
        return self.sub_features.shape[1]

    @property
    def d(self) -> int:
        return self.scan_features.shape[1]

    def validate(self):
        N, d = self.scan_features.shape
        if self.sub_features.shape[0] != N or self.sub_features.shape[2] != d:
            raise DimensionError("scan/sub feature shape mismatch")
        if self.label not in (0, 1):
            raise DimensionError(f"label {self.label} not in {{0,1}}")
        if not np.all(np.isfinite(self.scan_features)):
            raise FormatError("non-finite scan features")
        if not np.all(np.isfinite(self.sub_features)):
            raise FormatError("non-finite sub features")
        if self.region_truth is not None:
            if self.region_truth.shape != (N,):
                raise DimensionError("region_truth length mismatch")
            if self.label == 0 and self.region_truth.any():
                raise FormatError("negative slide with positive region_truth")
            if self.label == 1 and not self.region_truth.any():
                raise FormatError("positive slide without positive region")


def generate_slide(config: GenConfig, slide_seed: int,
                   label: int | None = None) -> SlideBundle:
    """One slide bundle; deterministic in (config, slide_seed)."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, slide_seed)))
    d, K = config.d, config.K
    N = int(rng.integers(config.N_range[0], config.N_range[1] + 1))
    y = int(rng.random() < config.class_balance) if label is None else int(label)

    b = rng.normal(0.0, config.sigma_b, size=d) if config.sigma_b > 0 else np.zeros(d)
    truth = np.zeros(N, dtype=bool)
    z = np.zeros((N, K), dtype=bool)
    if y == 1:
        lo, hi = config.positive_region_fraction_range
        frac = rng.uniform(lo, hi)
        n_pos = max(1, int(round(frac * N)))
        pos_regions = rng.choice(N, size=n_pos, replace=False)
        truth[pos_regions] = True
        n_sub = max(1, int(round(config.positive_subpatch_fraction * K)))
        for i in pos_regions:
            z[i, rng.choice(K, size=n_sub, replace=False)] = True

    sub = b[None, None, :] + rng.normal(0.0, config.sigma_sub, size=(N, K, d))
    sub[:, :, 0] += z * config.class_signal
    scan = sub.mean(axis=1)
    if config.sigma_scan > 0:
        scan = scan + rng.normal(0.0, config.sigma_scan, size=(N, d))

    bundle = SlideBundle(
        slide_id=f"s{slide_seed:06d}",
        label=y,
        scan_features=scan.astype(np.float32),
        sub_features=sub.astype(np.float32),
        region_truth=truth,
    )
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# bundle file format


def write_bundle(bundle: SlideBundle, path: str):
    bundle.validate()
    has_truth = bundle.region_truth is not None
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, bundle.N, bundle.K, bundle.d,
                          bundle.label, int(has_truth))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(bundle.scan_features, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(bundle.sub_features, dtype="<f4").tobytes())
        if has_truth:
            f.write(bundle.region_truth.astype(np.uint8).tobytes())


def read_bundle(path: str) -> SlideBundle:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise TruncationError(
            f"file too short for header: expected >= {_HEADER.size} bytes, got {len(blob)}")
    magic, version, N, K, d, label, has_truth = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported bundle version {version}")
    if N < 1 or K < 1 or d < 1:
        raise DimensionError(f"invalid dimensions N={N} K={K} d={d}")
    scan_bytes = 4 * N * d
    sub_bytes = 4 * N * K * d
    expected = _HEADER.size + scan_bytes + sub_bytes + (N if has_truth else 0)
    if len(blob) != expected:
        raise TruncationError(
            f"expected {expected} bytes, got {len(blob)}")
    off = _HEADER.size
    scan = np.frombuffer(blob, dtype="<f4", count=N * d, offset=off).reshape(N, d)
    off += scan_bytes
    sub = np.frombuffer(blob, dtype="<f4", count=N * K * d, offset=off).reshape(N, K, d)
    off += sub_bytes
    truth = None
    if has_truth:
        truth = np.frombuffer(blob, dtype=np.uint8, count=N, offset=off).astype(bool)
    bundle = SlideBundle(
        slide_id=os.path.splitext(os.path.basename(path))[0],
        label=int(label),
        scan_features=scan.copy(),
        sub_features=sub.copy(),
        region_truth=truth,
    )
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    id: str
    path: str  # relative to the manifest file
    label: int
    n_regions: int


@dataclass
class DatasetManifest:
    config_digest: str
    slides: list[ManifestEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    base_dir: str = "."

    def bundle_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.base_dir, entry.path)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.slides], dtype=np.int64)


def write_manifest(manifest: DatasetManifest, path: str):
    doc = {
        "version": manifest.version,
        "config_digest": manifest.config_digest,
        "slides": [{"id": e.id, "path": e.path, "label": e.label,
                    "n_regions": e.n_regions} for e in manifest.slides],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_manifest(path: str, validate: bool = True) -> DatasetManifest:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')}")
    base = os.path.dirname(os.path.abspath(path))
    entries = [ManifestEntry(s["id"], s["path"], int(s["label"]), int(s["n_regions"]))
               for s in doc["slides"]]
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate slide ids in manifest")
    manifest = DatasetManifest(config_digest=doc["config_digest"],
                               slides=entries, base_dir=base)
    if validate:
        for e in entries:
            p = manifest.bundle_path(e)
            if not os.path.exists(p):
                raise ManifestError(f"missing bundle file {e.path}")
            _validate_header(p, e)
    return manifest


def _validate_header(path: str, entry: ManifestEntry):
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise TruncationError(f"{entry.path}: header truncated")
    magic, version, N, K, d, label, has_truth = _HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagicError(f"{entry.path}: bad magic")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{entry.path}: version {version}")
    if N != entry.n_regions or int(label) != entry.label:
        raise ManifestError(f"{entry.path}: header disagrees with manifest")
    expected = _HEADER.size + 4 * N * d + 4 * N * K * d + (N if has_truth else 0)
    actual = os.path.getsize(path)
    if actual != expected:
        raise TruncationError(
            f"{entry.path}: expected {expected} bytes, got {actual}")


def load_bundles(manifest: DatasetManifest) -> list[SlideBundle]:
    return [read_bundle(manifest.bundle_path(e)) for e in manifest.slides]


# ---------------------------------------------------------------------------
# dataset generation


def _gen_and_write(args):
    config, slide_seed, label, out_path = args
    bundle = generate_slide(config, slide_seed, label=label)
    write_bundle(bundle, out_path)
    return bundle.slide_id, bundle.N


def generate_dataset(config: GenConfig, count: int, split_ratio: float,
                     out_dir: str, workers: int = 1):
    """Write ``count`` bundles under ``out_dir`` and return (train, test)
    manifests, stratified by label with disjoint slide ids."""
    config.validate()
    if count < 2:
        raise GenerationError("count must be >= 2")
    if not 0.0 < split_ratio < 1.0:
        raise GenerationError("split_ratio must be in (0,1)")
    n_pos = int(round(count * config.class_balance))
    n_neg = count - n_pos
    if n_pos < 1 or n_neg < 1:
        raise GenerationError("count too small to stratify by label")

    labels = [1] * n_pos + [0] * n_neg
    bundle_dir = os.path.join(out_dir, "bundles")
    os.makedirs(bundle_dir, exist_ok=True)
    jobs = []
    for idx, label in enumerate(labels):
        path = os.path.join(bundle_dir, f"s{idx:06d}.rlgb")
        jobs.append((config, idx, label, path))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_gen_and_write, jobs))
    else:
        results = [_gen_and_write(j) for j in jobs]

    entries = [ManifestEntry(sid, os.path.join("bundles", f"{sid}.rlgb"),
                             label, n)
               for (sid, n), label in zip(results, labels)]
    by_label = {0: [e for e in entries if e.label == 0],
                1: [e for e in entries if e.label == 1]}
    train_entries, test_entries = [], []
    for lab in (1, 0):
        group = by_label[lab]
        cut = int(round(len(group) * split_ratio))
        if cut < 1 or cut >= len(group):
            raise GenerationError("count too small to stratify the split")
        train_entries.extend(group[:cut])
        test_entries.extend(group[cut:])

    digest = config.digest()
    train = DatasetManifest(config_digest=digest, slides=train_entries,
                            base_dir=os.path.abspath(out_dir))
    test = DatasetManifest(config_digest=digest, slides=test_entries,
                           base_dir=os.path.abspath(out_dir))
    write_manifest(train, os.path.join(out_dir, "train.json"))
    write_manifest(test, os.path.join(out_dir, "test.json"))
    return train, test


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationReport:
    oracle_auc_high: float
    oracle_auc_scan: float


def _pooled_features(matrix: np.ndarray) -> np.ndarray:
    """Per-slide summary a linear probe can use: [mean; max] over regions."""
    return np.concatenate([matrix.mean(axis=0), matrix.max(axis=0)])


def calibrate(config: GenConfig, sample_size: int = 200,
              seed_offset: int = 10_000_000) -> CalibrationReport:
    """Train throwaway logistic probes on full high-magnification region means
    and on raw scanning features; report held-out AUCs.

    The gap between the two AUCs quantifies how much the scanning level hides."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import roc_auc_score

    config.validate()

    def sample(offset, n):
        X_high, X_scan, y = [], [], []
        labels = ([1] * (n // 2)) + ([0] * (n - n // 2))
        for i, lab in enumerate(labels):
            bundle = generate_slide(config, offset + i, label=lab)
            X_high.append(_pooled_features(bundle.sub_features.mean(axis=1)))
            X_scan.append(_pooled_features(bundle.scan_features))
            y.append(bundle.label)
        return np.array(X_high), np.array(X_scan), np.array(y)

    Xh_tr, Xs_tr, y_tr = sample(seed_offset, sample_size)
    Xh_te, Xs_te, y_te = sample(seed_offset + sample_size, sample_size)

    def probe_auc(X_tr, X_te):
        clf = LogisticRegression(max_iter=2000, C=1.0)
        clf.fit(X_tr, y_tr)
        return float(roc_auc_score(y_te, clf.predict_proba(X_te)[:, 1]))

    return CalibrationReport(
        oracle_auc_high=probe_auc(Xh_tr, Xh_te),
        oracle_auc_scan=probe_auc(Xs_tr, Xs_te),
    )

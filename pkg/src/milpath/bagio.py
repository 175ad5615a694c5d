"""Feature-bag serialization, cohort manifests, curation, and split generation.

A feature bag collects one case's patch feature vectors, each tagged with the
slide it came from and its level-0 pixel coordinates. Bags are stored in the
FBAG binary format (little-endian):

    magic "FBAG" (4 bytes)
    version      u32  (currently 1)
    D            u32  feature dimension
    N            u64  instance count
    case_id_len  u16
    case_id      UTF-8 bytes
    N records of (slide_index u16, x i32, y i32)
    N*D f32 feature matrix, row-major

Cohort manifests are JSON files listing cases with site, hierarchical labels
(category / family / type), and bag file references.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FBAG_MAGIC = b"FBAG"
FBAG_VERSION = 1
# Fixed-size header bytes before the variable-length case id.
_HEADER_FMT = "<IIQH"
_HEADER_SIZE = 4 + struct.calcsize(_HEADER_FMT)
_RECORD_DTYPE = np.dtype([("slide", "<u2"), ("x", "<i4"), ("y", "<i4")])

LABEL_LEVELS = ("category", "family", "type")


class BagError(Exception):
    """Base class for feature-bag failures."""


class BagFormatError(BagError):
    """Structurally invalid FBAG bytes: bad magic, version, or layout."""


class BagTruncatedError(BagFormatError):
    """File shorter than the header-declared payload."""

    def __init__(self, expected: int, actual: int, where: str):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"truncated bag file: expected {expected} bytes, got {actual} ({where})"
        )


class BagIntegrityError(BagError):
    """Well-formed file whose content violates bag invariants."""


class ManifestError(Exception):
    """Invalid cohort manifest."""


class CurationError(Exception):
    """Curation left no usable classes."""


class SplitError(Exception):
    """Split generation cannot satisfy its constraints."""


class BalanceError(Exception):
    """Balanced-subset selection cannot satisfy its constraints."""


@dataclass(eq=False)
class FeatureBag:
    """One case's instances: coordinate-tagged feature vectors.

    ``features`` must be float32; the on-disk format stores f32 and round
    trips are bit-exact only when memory and file agree.
    """

    case_id: str
    slide_index: np.ndarray  # (N,) uint16
    coords: np.ndarray  # (N, 2) int32, level-0 (x, y)
    features: np.ndarray  # (N, D) float32

    @property
    def n_instances(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def validate(self) -> None:
        if not isinstance(self.case_id, str) or not self.case_id:
            raise BagIntegrityError("case_id must be a non-empty string")
        if len(self.case_id.encode("utf-8")) > 0xFFFF:
            raise BagIntegrityError("case_id exceeds 65535 UTF-8 bytes")
        feats = self.features
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise BagIntegrityError(
                f"features must be a non-empty 2-D matrix, got shape {feats.shape}"
            )
        if feats.dtype != np.float32:
            raise BagIntegrityError(f"features must be float32, got {feats.dtype}")
        if not np.all(np.isfinite(feats)):
            bad = int(np.argwhere(~np.isfinite(feats))[0][0])
            raise BagIntegrityError(f"non-finite feature value in instance row {bad}")
        n = feats.shape[0]
        if self.slide_index.shape != (n,):
            raise BagIntegrityError("slide_index length does not match instance count")
        if self.coords.shape != (n, 2):
            raise BagIntegrityError("coords must have shape (N, 2)")
        if int(self.slide_index.min()) < 0 or int(self.slide_index.max()) > 0xFFFF:
            raise BagIntegrityError("slide_index out of uint16 range")
        if np.any(self.coords < np.iinfo(np.int32).min) or np.any(
            self.coords > np.iinfo(np.int32).max
        ):
            raise BagIntegrityError("coordinates out of int32 range")
        triples = _coordinate_triples(self)
        if len(np.unique(triples)) != n:
            dup = _first_duplicate_triple(triples)
            raise BagIntegrityError(f"duplicate (slide_index, x, y) coordinate {dup}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and np.array_equal(self.slide_index, other.slide_index)
            and np.array_equal(self.coords, other.coords)
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
        )


def make_bag(
    case_id: str,
    features: np.ndarray,
    coords: np.ndarray | None = None,
    slide_index: np.ndarray | int = 0,
) -> FeatureBag:
    """Assemble and validate a bag; coords default to a 224-px synthetic grid."""
    feats = np.ascontiguousarray(features, dtype=np.float32)
    n = feats.shape[0]
    if coords is None:
        cols = max(1, math.ceil(math.sqrt(n)))
        idx = np.arange(n)
        coords = np.stack([(idx % cols) * 224, (idx // cols) * 224], axis=1)
    coords = np.ascontiguousarray(coords, dtype=np.int32)
    if np.isscalar(slide_index):
        slide = np.full(n, int(slide_index), dtype=np.uint16)
    else:
        slide = np.ascontiguousarray(slide_index, dtype=np.uint16)
    bag = FeatureBag(case_id=case_id, slide_index=slide, coords=coords, features=feats)
    bag.validate()
    return bag


def _coordinate_triples(bag: FeatureBag) -> np.ndarray:
    triples = np.empty(bag.n_instances, dtype=_RECORD_DTYPE)
    triples["slide"] = bag.slide_index
    triples["x"] = bag.coords[:, 0]
    triples["y"] = bag.coords[:, 1]
    return triples


def _first_duplicate_triple(triples: np.ndarray) -> tuple:
    seen = set()
    for t in triples:
        key = (int(t["slide"]), int(t["x"]), int(t["y"]))
        if key in seen:
            return key
        seen.add(key)
    return ()


def write_bag(bag: FeatureBag, path: str | Path) -> None:
    """Write ``bag`` to ``path`` atomically (temp file + rename)."""
    bag.validate()
    path = Path(path)
    cid = bag.case_id.encode("utf-8")
    header = FBAG_MAGIC + struct.pack(
        _HEADER_FMT, FBAG_VERSION, bag.feature_dim, bag.n_instances, len(cid)
    )
    records = _coordinate_triples(bag)
    payload = np.ascontiguousarray(bag.features, dtype="<f4")
    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".fbag.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(cid)
            fh.write(records.tobytes())
            fh.write(payload.tobytes())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def expected_file_size(feature_dim: int, n_instances: int, case_id: str) -> int:
    """Exact FBAG byte count for the given shape."""
    return (
        _HEADER_SIZE
        + len(case_id.encode("utf-8"))
        + n_instances * _RECORD_DTYPE.itemsize
        + n_instances * feature_dim * 4
    )


def read_bag(path: str | Path) -> FeatureBag:
    """Read and validate an FBAG file."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FBAG_MAGIC:
        raise BagFormatError(
            f"bad magic {data[:4]!r}, expected {FBAG_MAGIC!r}"
        )
    if len(data) < _HEADER_SIZE:
        raise BagTruncatedError(_HEADER_SIZE, len(data), "header")
    version, dim, n, cid_len = struct.unpack_from(_HEADER_FMT, data, 4)
    if version != FBAG_VERSION:
        raise BagFormatError(f"unsupported version {version}, expected {FBAG_VERSION}")
    if dim < 1:
        raise BagFormatError(f"feature dimension must be positive, got {dim}")
    if n < 1:
        raise BagFormatError(f"instance count must be positive, got {n}")
    cid_end = _HEADER_SIZE + cid_len
    rec_end = cid_end + n * _RECORD_DTYPE.itemsize
    total = rec_end + n * dim * 4
    if len(data) < cid_end:
        raise BagTruncatedError(total, len(data), "case id")
    if len(data) < rec_end:
        raise BagTruncatedError(total, len(data), "coordinate records")
    if len(data) < total:
        raise BagTruncatedError(total, len(data), "feature matrix")
    if len(data) > total:
        raise BagFormatError(
            f"trailing data: expected {total} bytes, got {len(data)}"
        )
    try:
        case_id = data[_HEADER_SIZE:cid_end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BagFormatError(f"case id is not valid UTF-8: {exc}") from exc
    records = np.frombuffer(data, dtype=_RECORD_DTYPE, count=n, offset=cid_end)
    feats = np.frombuffer(data, dtype="<f4", count=n * dim, offset=rec_end)
    feats = feats.reshape(n, dim).copy()
    if not np.all(np.isfinite(feats)):
        bad = int(np.argwhere(~np.isfinite(feats))[0][0])
        raise BagIntegrityError(f"non-finite feature value in instance row {bad}")
    coords = np.stack([records["x"], records["y"]], axis=1).astype(np.int32)
    slide = records["slide"].astype(np.uint16)
    if len(np.unique(records)) != n:
        dup = _first_duplicate_triple(records)
        raise BagIntegrityError(f"duplicate (slide_index, x, y) coordinate {dup}")
    bag = FeatureBag(case_id=case_id, slide_index=slide, coords=coords, features=feats)
    bag.validate()
    return bag


def concat_case(slide_bags: Sequence[FeatureBag]) -> FeatureBag:
    """Concatenate per-slide bags of one case into a single bag.

    Input bags are taken to be one per slide; slide_index is reassigned
    0..S-1 in input order and instance order is preserved.
    """
    if not slide_bags:
        raise BagIntegrityError("concat_case needs at least one bag")
    case_id = slide_bags[0].case_id
    dim = slide_bags[0].feature_dim
    for b in slide_bags:
        if b.case_id != case_id:
            raise BagIntegrityError(
                f"mixed case ids: {case_id!r} vs {b.case_id!r}"
            )
        if b.feature_dim != dim:
            raise BagIntegrityError(
                f"mixed feature dims: {dim} vs {b.feature_dim}"
            )
    slide = np.concatenate(
        [np.full(b.n_instances, i, dtype=np.uint16) for i, b in enumerate(slide_bags)]
    )
    out = FeatureBag(
        case_id=case_id,
        slide_index=slide,
        coords=np.concatenate([b.coords for b in slide_bags]),
        features=np.concatenate([b.features for b in slide_bags]),
    )
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Cohort manifest
# ---------------------------------------------------------------------------

_CASE_FIELDS = (
    "case_id",
    "site",
    "label_category",
    "label_family",
    "label_type",
    "bag_path",
    "n_instances",
    "excluded_reason",
)


@dataclass
class CaseRecord:
    case_id: str
    site: str
    label_category: str
    label_family: str | None = None
    label_type: str | None = None
    bag_path: str = ""
    n_instances: int | None = None  # area proxy for tissue balancing
    excluded_reason: str | None = None

    def label_at(self, level: str) -> str | None:
        if level == "category":
            return self.label_category
        if level == "family":
            return self.label_family
        if level == "type":
            return self.label_type
        raise ValueError(f"unknown label level {level!r}")


@dataclass
class CohortManifest:
    cases: list[CaseRecord]
    # category -> family -> [types]; empty dict means "derive nothing".
    label_taxonomy: dict = field(default_factory=dict)

    def sites(self) -> set[str]:
        return {c.site for c in self.cases}

    def classes_at(self, level: str) -> dict[str, int]:
        counts: dict[str, int] = {}
        for c in self.cases:
            lab = c.label_at(level)
            if lab is not None:
                counts[lab] = counts.get(lab, 0) + 1
        return counts

    def validate(self, base_dir: str | Path | None = None, check_paths: bool = False) -> None:
        seen: set[str] = set()
        for c in self.cases:
            if c.case_id in seen:
                raise ManifestError(f"duplicate case_id {c.case_id!r}")
            seen.add(c.case_id)
            if not c.site:
                raise ManifestError(f"case {c.case_id!r} has an empty site")
            if not c.label_category:
                raise ManifestError(f"case {c.case_id!r} has no label_category")
        _validate_taxonomy(self.label_taxonomy)
        if self.label_taxonomy:
            fam_to_cat, type_to_fam = _taxonomy_maps(self.label_taxonomy)
            for c in self.cases:
                if c.label_family is not None:
                    cat = fam_to_cat.get(c.label_family)
                    if cat is not None and cat != c.label_category:
                        raise ManifestError(
                            f"case {c.case_id!r}: family {c.label_family!r} belongs "
                            f"to category {cat!r}, not {c.label_category!r}"
                        )
                if c.label_type is not None:
                    fam = type_to_fam.get(c.label_type)
                    if fam is not None and c.label_family is not None and fam != c.label_family:
                        raise ManifestError(
                            f"case {c.case_id!r}: type {c.label_type!r} belongs "
                            f"to family {fam!r}, not {c.label_family!r}"
                        )
        if check_paths:
            root = Path(base_dir) if base_dir is not None else Path(".")
            for c in self.cases:
                if not c.bag_path:
                    raise ManifestError(f"case {c.case_id!r} has no bag_path")
                if not (root / c.bag_path).exists():
                    raise ManifestError(
                        f"case {c.case_id!r}: bag file {c.bag_path!r} not found under {root}"
                    )


def _validate_taxonomy(taxonomy: dict) -> None:
    seen_fam: dict[str, str] = {}
    seen_type: dict[str, str] = {}
    for cat, families in taxonomy.items():
        if not isinstance(families, dict):
            raise ManifestError(f"taxonomy category {cat!r} must map to families")
        for fam, types in families.items():
            if fam in seen_fam:
                raise ManifestError(
                    f"family {fam!r} appears under both {seen_fam[fam]!r} and {cat!r}"
                )
            seen_fam[fam] = cat
            if not isinstance(types, list):
                raise ManifestError(f"taxonomy family {fam!r} must map to a type list")
            for t in types:
                if t in seen_type:
                    raise ManifestError(
                        f"type {t!r} appears under both {seen_type[t]!r} and {fam!r}"
                    )
                seen_type[t] = fam


def _taxonomy_maps(taxonomy: dict) -> tuple[dict[str, str], dict[str, str]]:
    fam_to_cat: dict[str, str] = {}
    type_to_fam: dict[str, str] = {}
    for cat, families in taxonomy.items():
        for fam, types in families.items():
            fam_to_cat[fam] = cat
            for t in types:
                type_to_fam[t] = fam
    return fam_to_cat, type_to_fam


def load_manifest(path: str | Path, check_paths: bool = False) -> CohortManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict) or "cases" not in raw:
        raise ManifestError(f"{path}: manifest must be an object with a 'cases' list")
    cases = []
    for i, entry in enumerate(raw["cases"]):
        if not isinstance(entry, dict):
            raise ManifestError(f"{path}: cases[{i}] must be an object")
        known = {k: v for k, v in entry.items() if k in _CASE_FIELDS}
        missing = {"case_id", "site", "label_category"} - known.keys()
        if missing:
            raise ManifestError(
                f"{path}: cases[{i}] missing required fields {sorted(missing)}"
            )
        cases.append(CaseRecord(**known))
    manifest = CohortManifest(cases=cases, label_taxonomy=raw.get("label_taxonomy", {}))
    manifest.validate(base_dir=path.parent, check_paths=check_paths)
    return manifest


def save_manifest(manifest: CohortManifest, path: str | Path) -> None:
    manifest.validate()
    entries = []
    for c in manifest.cases:
        entry = {k: getattr(c, k) for k in _CASE_FIELDS}
        entries.append({k: v for k, v in entry.items() if v is not None})
    doc = {"cases": entries, "label_taxonomy": manifest.label_taxonomy}
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".json.tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp_name, path)


# ---------------------------------------------------------------------------
# Curation
# ---------------------------------------------------------------------------


@dataclass
class CurationReport:
    level: str
    min_cases: int
    class_counts: dict[str, dict[str, int]]  # class -> {"kept": n, "dropped": n}
    n_excluded: int
    n_missing_label: int

    def lines(self) -> list[str]:
        out = [f"curation at level={self.level}, min_cases={self.min_cases}"]
        if self.n_excluded:
            out.append(f"  excluded (marked): {self.n_excluded}")
        if self.n_missing_label:
            out.append(f"  missing label at {self.level}: {self.n_missing_label}")
        for name in sorted(self.class_counts):
            c = self.class_counts[name]
            out.append(f"  {name}: kept {c['kept']}, dropped {c['dropped']}")
        return out


@dataclass
class CurationResult:
    manifest: CohortManifest
    report: CurationReport


def curate(manifest: CohortManifest, level: str, min_cases: int) -> CurationResult:
    """Restrict to classes with >= min_cases cases at ``level``.

    Cases carrying an ``excluded_reason`` are dropped first, then cases with
    no label at ``level``, then whole classes below the threshold.
    """
    if min_cases < 1:
        raise CurationError("min_cases must be >= 1")
    if level not in LABEL_LEVELS:
        raise CurationError(f"unknown label level {level!r}")
    active = [c for c in manifest.cases if not c.excluded_reason]
    n_excluded = len(manifest.cases) - len(active)
    labeled = [c for c in active if c.label_at(level) is not None]
    n_missing = len(active) - len(labeled)
    counts: dict[str, int] = {}
    for c in labeled:
        counts[c.label_at(level)] = counts.get(c.label_at(level), 0) + 1
    survivors = {name for name, n in counts.items() if n >= min_cases}
    if not survivors:
        raise CurationError(
            f"no classes survive threshold min_cases={min_cases} at level {level!r}"
        )
    kept_cases = [c for c in labeled if c.label_at(level) in survivors]
    report = CurationReport(
        level=level,
        min_cases=min_cases,
        class_counts={
            name: {"kept": n if name in survivors else 0,
                   "dropped": 0 if name in survivors else n}
            for name, n in counts.items()
        },
        n_excluded=n_excluded,
        n_missing_label=n_missing,
    )
    for line in report.lines():
        logger.info(line)
    return CurationResult(
        manifest=CohortManifest(cases=kept_cases, label_taxonomy=manifest.label_taxonomy),
        report=report,
    )


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    replicate_id: int
    seed: int
    stratify_level: str
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def all_cases(self) -> set[str]:
        return set(self.train) | set(self.val) | set(self.test)


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer allocation of n by largest remainder, then enforce >= 1 each."""
    ideal = [f * n for f in fractions]
    alloc = [math.floor(x) for x in ideal]
    short = n - sum(alloc)
    order = sorted(range(len(fractions)), key=lambda j: (-(ideal[j] - alloc[j]), j))
    for j in order[:short]:
        alloc[j] += 1
    for j in range(len(alloc)):
        while alloc[j] == 0:
            donor = max(range(len(alloc)), key=lambda i: (alloc[i], -i))
            if alloc[donor] <= 1:
                raise SplitError(f"cannot place one case per partition with n={n}")
            alloc[donor] -= 1
            alloc[j] += 1
    return alloc


def make_splits(
    manifest: CohortManifest,
    level: str,
    fractions: Sequence[float],
    n_replicates: int,
    base_seed: int,
) -> list[SplitPlan]:
    """Stratified train/val/test plans; replicate i is keyed by base_seed XOR i."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise SplitError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {sum(fractions)}")
    if n_replicates < 1:
        raise SplitError("n_replicates must be >= 1")
    by_class: dict[str, list[str]] = {}
    for c in manifest.cases:
        lab = c.label_at(level)
        if lab is None:
            raise SplitError(
                f"case {c.case_id!r} has no label at level {level!r}; curate first"
            )
        by_class.setdefault(lab, []).append(c.case_id)
    for name, ids in by_class.items():
        if len(ids) < 3:
            raise SplitError(
                f"class {name!r} has {len(ids)} cases; need >= 3 to cover all partitions"
            )
    plans = []
    for rep in range(n_replicates):
        seed = (int(base_seed) ^ rep) & 0xFFFFFFFFFFFFFFFF
        rng = np.random.Generator(np.random.Philox(key=seed))
        train: list[str] = []
        val: list[str] = []
        test: list[str] = []
        for name in sorted(by_class):
            ids = sorted(by_class[name])
            perm = rng.permutation(len(ids))
            shuffled = [ids[i] for i in perm]
            n_train, n_val, n_test = _largest_remainder(len(ids), fractions)
            train += shuffled[:n_train]
            val += shuffled[n_train : n_train + n_val]
            test += shuffled[n_train + n_val :]
        plans.append(
            SplitPlan(
                replicate_id=rep,
                seed=seed,
                stratify_level=level,
                train=tuple(sorted(train)),
                val=tuple(sorted(val)),
                test=tuple(sorted(test)),
            )
        )
    return plans


# ---------------------------------------------------------------------------
# Site holdout
# ---------------------------------------------------------------------------


@dataclass
class SiteHoldoutResult:
    train: CohortManifest
    test: CohortManifest
    roster: dict[str, dict[str, int]]  # class -> {"train": n, "test": n}
    warnings: list[str]


def make_site_holdout(
    manifest: CohortManifest,
    train_sites: Iterable[str],
    level: str,
    min_cases: int,
) -> SiteHoldoutResult:
    """Split the cohort by site; curation applies to the train side only."""
    train_sites = set(train_sites)
    all_sites = manifest.sites()
    if not train_sites:
        raise ManifestError("train_sites must be non-empty")
    if not train_sites < all_sites:
        raise ManifestError(
            f"train_sites {sorted(train_sites)} must be a strict subset of "
            f"manifest sites {sorted(all_sites)}"
        )
    train_cases = [c for c in manifest.cases if c.site in train_sites]
    train_manifest = CohortManifest(train_cases, manifest.label_taxonomy)
    curated = curate(train_manifest, level, min_cases)
    classes = set(curated.manifest.classes_at(level))
    test_cases = [
        c
        for c in manifest.cases
        if c.site not in train_sites
        and not c.excluded_reason
        and c.label_at(level) in classes
    ]
    test_manifest = CohortManifest(test_cases, manifest.label_taxonomy)
    test_counts = test_manifest.classes_at(level)
    roster = {
        name: {"train": n, "test": test_counts.get(name, 0)}
        for name, n in sorted(curated.manifest.classes_at(level).items())
    }
    warns = []
    for name, row in roster.items():
        if row["test"] == 0:
            msg = f"class {name!r} has no cases in the test sites; retained"
            warns.append(msg)
            logger.warning(msg)
    return SiteHoldoutResult(
        train=curated.manifest, test=test_manifest, roster=roster, warnings=warns
    )


# ---------------------------------------------------------------------------
# Balanced subsets
# ---------------------------------------------------------------------------


def balance_subset(
    manifest: CohortManifest,
    level: str,
    mode: str,
    target: int | None,
    seed: int,
) -> CohortManifest:
    """Per-class balancing by case count or by total instance count.

    mode="cases": draw exactly ``target`` cases per class without replacement.
    mode="tissue_area": shuffle each class, then accumulate cases until the
    class's instance total first reaches the smallest class total (``target``
    is ignored). Instance counts are the fixed-patch-size area proxy.
    """
    by_class: dict[str, list[CaseRecord]] = {}
    for c in manifest.cases:
        lab = c.label_at(level)
        if lab is None:
            raise BalanceError(f"case {c.case_id!r} has no label at level {level!r}")
        by_class.setdefault(lab, []).append(c)
    rng = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
    selected: set[str] = set()
    if mode == "cases":
        if target is None or target < 1:
            raise BalanceError("mode='cases' requires a positive target")
        for name in sorted(by_class):
            ids = sorted(c.case_id for c in by_class[name])
            if len(ids) < target:
                raise BalanceError(
                    f"class {name!r} has {len(ids)} cases, below target {target}"
                )
            perm = rng.permutation(len(ids))
            selected.update(ids[i] for i in perm[:target])
    elif mode == "tissue_area":
        totals: dict[str, int] = {}
        for name, cases in by_class.items():
            for c in cases:
                if c.n_instances is None:
                    raise BalanceError(
                        f"case {c.case_id!r} lacks n_instances, required for "
                        "tissue_area balancing"
                    )
            totals[name] = sum(c.n_instances for c in cases)
        floor = min(totals.values())
        for name in sorted(by_class):
            ids = sorted(c.case_id for c in by_class[name])
            sizes = {c.case_id: c.n_instances for c in by_class[name]}
            perm = rng.permutation(len(ids))
            acc = 0
            for i in perm:
                selected.add(ids[i])
                acc += sizes[ids[i]]
                if acc >= floor:
                    break
    else:
        raise BalanceError(f"unknown balance mode {mode!r}")
    kept = [c for c in manifest.cases if c.case_id in selected]
    return CohortManifest(cases=kept, label_taxonomy=manifest.label_taxonomy)


def load_bags(
    manifest: CohortManifest, base_dir: str | Path
) -> dict[str, FeatureBag]:
    """Read every case's bag file, keyed by case_id."""
    root = Path(base_dir)
    bags = {}
    for c in manifest.cases:
        if not c.bag_path:
            raise ManifestError(f"case {c.case_id!r} has no bag_path")
        bag = read_bag(root / c.bag_path)
        if bag.case_id != c.case_id:
            raise ManifestError(
                f"bag file {c.bag_path!r} holds case {bag.case_id!r}, "
                f"manifest says {c.case_id!r}"
            )
        bags[c.case_id] = bag
    return bags

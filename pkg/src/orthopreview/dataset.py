"""Patient pairs, the synthetic cohort generator, on-disk layout and k-fold splits."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from os import PathLike
from pathlib import Path

import numpy as np

from .geometry import point_line_distance
from .mesh import (
    LOWER_LIP,
    POGONION,
    SUBNASALE,
    UPPER_LIP,
    LandmarkSet,
    Mesh,
    load_landmarks,
    load_obj,
    save_landmarks,
    save_obj,
)
from .morphable import FitReport, MorphableModel, decode_vertices

PROVENANCES = ("real", "synthetic", "augmented")

# landmark groups for the deformity targets
LIP_LANDMARKS = tuple(range(48, 68))
CHIN_LANDMARKS = (5, 6, 7, 8, 9, 10, 11, 55, 56, 57, 58, 59, 65, 66, 67)
HOLD_WEIGHT = 10.0


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FaceRecord:
    mesh: Mesh
    landmarks: LandmarkSet
    code: np.ndarray
    report: FitReport


@dataclass(frozen=True, eq=False)
class PatientPair:
    id: str
    pre: FaceRecord
    post: FaceRecord
    provenance: str = "real"
    source: str | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise DatasetError(f"unknown provenance {self.provenance!r}")
        if not self.pre.mesh.same_topology(self.post.mesh):
            raise DatasetError(f"pair {self.id}: pre and post differ in topology")
        if self.pre.code.shape != self.post.code.shape:
            raise DatasetError(f"pair {self.id}: code lengths differ")


def exact_report(n_landmarks=68) -> FitReport:
    """Report for faces decoded straight from a code (zero landmark error)."""
    return FitReport(np.zeros(n_landmarks), 0.0, None, 0)


def face_record(model: MorphableModel, code, vertices=None) -> FaceRecord:
    code = np.array(code, dtype=np.float64)
    code.setflags(write=False)
    v = decode_vertices(model, code) if vertices is None else vertices
    mesh = Mesh(v, model.triangles)
    return FaceRecord(mesh, LandmarkSet(v[model.landmark_indices]), code, exact_report())


def code_arrays(pairs):
    """Stacked ``(pre, post)`` codes, each (n, K)."""
    if not pairs:
        raise DatasetError("no pairs")
    return (np.stack([p.pre.code for p in pairs]), np.stack([p.post.code for p in pairs]))


# ---------------------------------------------------------------- cohort


@dataclass(frozen=True)
class DeformityConfig:
    protrusion: tuple = (3.0, 10.0)
    asymmetry: tuple = (2.0, 8.0)
    correction: tuple = (0.7, 1.0)
    base_std: float = 0.5
    asymmetric_base_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("protrusion", "asymmetry", "correction"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi):
                raise DatasetError(f"{name} range must be positive and ordered, got {(lo, hi)}")
        if self.correction[1] > 1.0:
            raise DatasetError("correction completeness must lie in (0, 1]")
        if self.base_std < 0 or self.asymmetric_base_scale < 0:
            raise DatasetError("base_std and asymmetric_base_scale must be >= 0")


def _direction(a, target):
    sol, _, rank, _ = np.linalg.lstsq(a, target, rcond=None)
    if rank < min(a.shape):
        raise DatasetError("deformity direction solve is rank-deficient")
    return sol


def _sline_slope(lm, motion):
    """Mean rate of change of the two lip-to-s-line distances along ``motion``."""
    out = 0.0
    for lip in (UPPER_LIP, LOWER_LIP):
        d = [point_line_distance(p[lip], p[SUBNASALE], p[POGONION]) for p in (lm, lm + motion)]
        out += 0.5 * (d[1] - d[0])
    if out <= 0.0:
        raise DatasetError("protrusion direction does not move the lips away from the s-line")
    return out


def upper_face_vertices(model: MorphableModel, margin=5.0):
    """Vertices more than ``margin`` mm above the template subnasale."""
    t = model.template
    return np.flatnonzero(t[:, 1] > t[model.landmark_indices[SUBNASALE], 1] + margin)


def deformity_directions(model: MorphableModel, hold=HOLD_WEIGHT):
    """Codes realising the two deformities at unit (1 mm) strength.

    Protrusion pushes the lip landmarks anteriorly; lateral shift moves
    the chin landmarks along +x using only the antisymmetric modes. Each is
    the least-squares code for that landmark target while holding the
    remaining landmarks, and (with weight ``hold``) every upper-face
    vertex, in place, since surgery leaves the upper face alone. The code
    is then rescaled to 1 mm: of lip-to-s-line distance for protrusion
    (exact at the template, since distances are not linear in the code),
    of chin landmark motion on average for the lateral shift.
    """
    return _directions_cached(model, float(hold))


@lru_cache(maxsize=8)
def _directions_cached(model, hold):
    k = model.n_modes
    m = model.mode_matrix
    upper = upper_face_vertices(model)
    a = np.vstack([m[model.rows(model.landmark_indices)], np.sqrt(hold) * m[model.rows(upper)]])
    pad = np.zeros(3 * len(upper))

    t_p = np.zeros((68, 3))
    t_p[list(LIP_LANDMARKS), 2] = 1.0
    d_p = _direction(a, np.concatenate([t_p.ravel(), pad]))

    t_a = np.zeros((68, 3))
    t_a[list(CHIN_LANDMARKS), 0] = 1.0
    odd = np.arange(1, k, 2)
    d_a = np.zeros(k)
    d_a[odd] = _direction(a[:, odd], np.concatenate([t_a.ravel(), pad]))

    # rescale: protrusion to 1 mm of lip-to-s-line distance, the shift to
    # 1 mm of chin landmark motion, both on average
    rows = m[model.rows(model.landmark_indices)]
    tmpl = model.template[model.landmark_indices]
    d_p = d_p / _sline_slope(tmpl, (rows @ d_p).reshape(-1, 3))
    lm_a = (rows @ d_a).reshape(-1, 3)
    d_a = d_a / lm_a[list(CHIN_LANDMARKS), 0].mean()
    d_p.setflags(write=False)
    d_a.setflags(write=False)
    return d_p, d_a


def sample_patient(model, config: DeformityConfig, rng):
    """Draw ``(beta_pre, beta_post, params)`` for one synthetic patient."""
    d_p, d_a = deformity_directions(model)
    beta0 = config.base_std * rng.standard_normal(model.n_modes)
    # baseline faces are near-symmetric, so the asymmetry comes from the deformity
    beta0[1::2] *= config.asymmetric_base_scale
    a = rng.uniform(*config.protrusion)
    b = rng.uniform(*config.asymmetry) * rng.choice((-1.0, 1.0))
    gc = rng.uniform(*config.correction)
    deform = a * d_p + b * d_a
    return beta0 + deform, beta0 + (1.0 - gc) * deform, {"protrusion": a, "asymmetry": b, "correction": gc}


def generate_synthetic_cohort(model: MorphableModel, n: int, config: DeformityConfig = DeformityConfig()):
    """``n`` pre/post patients whose codes are known by construction.

    Each patient draws from its own child seed, so patient ``i`` does not
    depend on ``n``.
    """
    if n < 1:
        raise DatasetError("cohort size must be >= 1")
    seeds = np.random.SeedSequence(config.seed).spawn(n)
    pairs = []
    for i, ss in enumerate(seeds):
        pre, post, _ = sample_patient(model, config, np.random.default_rng(ss))
        pairs.append(PatientPair(f"p{i:04d}", face_record(model, pre), face_record(model, post), "real"))
    return pairs


# ---------------------------------------------------------------- disk layout


@dataclass(frozen=True)
class DatasetManifest:
    model: tuple  # (seed, K, resolution)
    entries: list = field(default_factory=list)  # (id, provenance)
    seed: int = 0


FILES = ("pre.obj", "post.obj", "pre.landmarks.txt", "post.landmarks.txt", "meta.txt")


def _fmt_vec(v):
    return " ".join(repr(float(x)) for x in np.ravel(v))


def save_dataset(pairs, directory: str | PathLike, model_id=(0, 0, 0), seed=0) -> DatasetManifest:
    root = Path(directory)
    ids = [p.id for p in pairs]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetError(f"duplicate pair ids: {dup}")
    root.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        d = root / p.id
        d.mkdir(exist_ok=True)
        save_obj(p.pre.mesh, d / "pre.obj")
        save_obj(p.post.mesh, d / "post.obj")
        save_landmarks(p.pre.landmarks, d / "pre.landmarks.txt")
        save_landmarks(p.post.landmarks, d / "post.landmarks.txt")
        lines = [f"provenance {p.provenance}", f"source {p.source or '-'}"]
        for side, rec in (("pre", p.pre), ("post", p.post)):
            lines.append(f"{side}_code {_fmt_vec(rec.code)}")
            lines.append(f"{side}_landmark_errors {_fmt_vec(rec.report.landmark_errors)}")
            rms = "-" if rec.report.surface_rms is None else repr(rec.report.surface_rms)
            lines.append(f"{side}_surface_rms {rms}")
            lines.append(f"{side}_iterations {rec.report.iterations}")
        (d / "meta.txt").write_text("\n".join(lines) + "\n")
    manifest = DatasetManifest(tuple(int(x) for x in model_id), [(p.id, p.provenance) for p in pairs], int(seed))
    out = [f"model {' '.join(str(x) for x in manifest.model)}", f"seed {manifest.seed}", f"pairs {len(pairs)}"]
    for pid, prov in manifest.entries:
        out.append(f"{pid} {prov} " + " ".join(f"{pid}/{f}" for f in FILES))
    (root / "manifest.txt").write_text("\n".join(out) + "\n")
    return manifest


def read_manifest(directory: str | PathLike) -> DatasetManifest:
    root = Path(directory)
    path = root / "manifest.txt"
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    lines = path.read_text().splitlines()
    try:
        model_id = tuple(int(x) for x in lines[0].split()[1:])
        seed = int(lines[1].split()[1])
        n = int(lines[2].split()[1])
        rows = [ln.split() for ln in lines[3:3 + n]]
    except (IndexError, ValueError):
        raise DatasetError(f"{path}: malformed manifest") from None
    if len(rows) != n:
        raise DatasetError(f"{path}: expected {n} entries, found {len(rows)}")
    entries = []
    for row in rows:
        for rel in row[2:]:
            if not (root / rel).exists():
                raise DatasetError(f"missing file: {root / rel}")
        entries.append((row[0], row[1]))
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate pair ids")
    return DatasetManifest(model_id, entries, seed)


def _read_meta(path):
    meta = {}
    for line in path.read_text().splitlines():
        key, _, rest = line.partition(" ")
        meta[key] = rest
    return meta


def _record(d, side, meta):
    mesh = load_obj(d / f"{side}.obj")
    lm = load_landmarks(d / f"{side}.landmarks.txt")
    code = np.array([float(x) for x in meta[f"{side}_code"].split()])
    code.setflags(write=False)
    errs = np.array([float(x) for x in meta[f"{side}_landmark_errors"].split()])
    rms = meta[f"{side}_surface_rms"]
    report = FitReport(errs, float(np.mean(errs)) if errs.size else 0.0,
                       None if rms == "-" else float(rms), int(meta[f"{side}_iterations"]))
    return FaceRecord(mesh, lm, code, report)


def load_dataset(directory: str | PathLike):
    root = Path(directory)
    manifest = read_manifest(root)
    pairs = []
    for pid, prov in manifest.entries:
        d = root / pid
        meta = _read_meta(d / "meta.txt")
        if meta.get("provenance") != prov:
            raise DatasetError(f"{d / 'meta.txt'}: provenance disagrees with manifest")
        src = meta.get("source", "-")
        pairs.append(PatientPair(pid, _record(d, "pre", meta), _record(d, "post", meta), prov,
                                 None if src == "-" else src))
    return pairs


# ---------------------------------------------------------------- splits


def split_kfold(n_or_pairs, k=5, seed=0):
    """Seeded shuffle, then ``k`` consecutive folds whose sizes differ by at most one."""
    n = n_or_pairs if isinstance(n_or_pairs, (int, np.integer)) else len(n_or_pairs)
    if k < 2:
        raise DatasetError("k must be >= 2")
    if k > n:
        raise DatasetError(f"cannot split {n} pairs into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    return [f.copy() for f in np.array_split(order, k)]

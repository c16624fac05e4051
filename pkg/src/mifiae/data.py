"""Synthetic cohorts with a known latent hazard, their on-disk format, and
cross-validation folds.

Cohort directory layout::

    manifest.txt       JSON index: format, generator config, ids, latent risks
    clinical.csv       id,time,event,f1..fk
    volumes/<id>.vol   CT volume
    masks/<id>.vol     binary tumour mask

``.vol`` files hold b"VOL0", a u32 rank, u32 extents and little-endian
float64 voxels in row-major order.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOL_MAGIC = b"VOL0"
FORMAT_NAME = "mifiae-cohort/1"


class CohortFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    n_patients: int = 200
    volume_shape: tuple[int, int, int] = (16, 16, 16)
    tabular_dim: int = 8
    censoring_rate: float = 0.3
    w_img: float = 1.0
    w_tab: float = 1.0
    baseline_hazard: float = 1.0 / 24.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(s) for s in self.volume_shape))
        if self.n_patients < 1:
            raise ValueError(f"n_patients must be positive, got {self.n_patients}")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 4:
            raise ValueError(f"volume_shape must be 3 extents >= 4, got {self.volume_shape}")
        if self.tabular_dim < 1:
            raise ValueError(f"tabular_dim must be positive, got {self.tabular_dim}")
        if not 0.0 < self.censoring_rate < 1.0:
            raise ValueError(f"censoring_rate must lie in (0, 1), got {self.censoring_rate}")
        if self.w_img < 0 or self.w_tab < 0:
            raise ValueError("signal weights must be non-negative")
        if self.baseline_hazard <= 0:
            raise ValueError("baseline_hazard must be positive")

    @property
    def has_signal(self) -> bool:
        """A null cohort (both weights zero) has hazard independent of z."""
        return self.w_img > 0 or self.w_tab > 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        return d


@dataclass
class PatientRecord:
    id: str
    ct: np.ndarray
    mask: np.ndarray
    tabular: np.ndarray
    time: float
    event: int


@dataclass
class Cohort:
    patients: list[PatientRecord]
    generator_config: dict = field(default_factory=dict)
    seed: int | None = None
    ground_truth_risk: np.ndarray | None = None

    def __post_init__(self):
        ids = [p.id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise CohortFormatError("duplicate patient ids")
        if self.patients:
            shape = self.patients[0].ct.shape
            k = self.patients[0].tabular.shape
            for p in self.patients:
                if p.ct.shape != shape or p.mask.shape != shape or p.tabular.shape != k:
                    raise CohortFormatError(f"patient {p.id}: inconsistent shapes")

    def __len__(self):
        return len(self.patients)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.patients]

    @property
    def times(self) -> np.ndarray:
        return np.array([p.time for p in self.patients])

    @property
    def events(self) -> np.ndarray:
        return np.array([p.event for p in self.patients], dtype=np.int64)

    def arrays(self, idx=None):
        """Stacked (ct [B,1,H,W,D], mask, tabular [B,k], times, events)."""
        pts = self.patients if idx is None else [self.patients[i] for i in idx]
        ct = np.stack([p.ct for p in pts])[:, None]
        mask = np.stack([p.mask for p in pts])[:, None]
        tab = np.stack([p.tabular for p in pts])
        return ct, mask, tab, np.array([p.time for p in pts]), np.array([p.event for p in pts])

    @property
    def censoring_fraction(self) -> float:
        return float(1.0 - self.events.mean())


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def _calibrate_censoring(event_times: np.ndarray, unit_draws: np.ndarray, target: float) -> float:
    """Censoring rate mu such that #{T_i > E_i / mu} / n is closest to ``target``.

    ``unit_draws`` are Exp(1) variates, so censoring times are ``unit_draws / mu``;
    the censored fraction is monotone in mu and found by bisection on log mu.
    """
    def frac(mu):
        return float((event_times > unit_draws / mu).mean())

    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(np.exp(mid)) < target:
            lo = mid
        else:
            hi = mid
    cands = [np.exp(lo), np.exp(hi)]
    return min(cands, key=lambda mu: (abs(frac(mu) - target), mu))


def _render_volume(rng, shape, z, w_img):
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    extent = np.array(shape, dtype=np.float64)
    centre = (extent - 1) / 2.0 + rng.uniform(-0.1, 0.1, size=3) * extent
    growth = np.exp(0.25 * w_img * np.clip(z, -2.5, 2.5))
    radii = 0.22 * extent * growth * rng.uniform(0.9, 1.1, size=3)
    radii = np.maximum(radii, 0.75)
    r2 = (((grid - centre[:, None, None, None]) / radii[:, None, None, None]) ** 2).sum(axis=0)
    mask = (r2 <= 1.0).astype(np.float64)
    if mask.sum() == 0:
        mask[tuple(np.clip(np.round(centre).astype(int), 0, extent.astype(int) - 1))] = 1.0
    background = 0.2 + 0.05 * rng.standard_normal(shape)
    intensity = 0.6 + 0.15 * w_img * z
    tumour = intensity + 0.05 * rng.standard_normal(shape)
    ct = np.where(mask > 0, tumour, background)
    return ct, mask


def generate_synthetic_cohort(cfg: SyntheticConfig) -> Cohort:
    """Patients whose hazard is ``baseline_hazard * exp(z)``, z ~ N(0, 1).

    The latent score shows up as tumour size and intensity (scaled by
    ``w_img``) and linearly in the first half of the tabular features
    (scaled by ``w_tab``).  With both weights zero the hazard is constant,
    so z is pure noise.  Censoring is exponential, with its rate solved
    so the realised censored fraction matches the target.
    """
    rng = np.random.default_rng(cfg.seed)
    n, k = cfg.n_patients, cfg.tabular_dim
    z = rng.standard_normal(n)
    log_hazard = z if cfg.has_signal else np.zeros(n)
    event_times = rng.exponential(1.0, size=n) / (cfg.baseline_hazard * np.exp(log_hazard))
    unit_cens = rng.exponential(1.0, size=n)
    mu = _calibrate_censoring(event_times, unit_cens, cfg.censoring_rate)
    cens_times = unit_cens / mu
    times = np.minimum(event_times, cens_times)
    events = (event_times <= cens_times).astype(np.int64)

    n_signal = max(1, k // 2)
    loadings = np.zeros(k)
    loadings[:n_signal] = 1.0
    tabular = cfg.w_tab * z[:, None] * loadings[None, :] + rng.standard_normal((n, k))

    width = len(str(n - 1))
    patients = []
    for i in range(n):
        prng = np.random.default_rng([cfg.seed, i])
        ct, mask = _render_volume(prng, cfg.volume_shape, z[i], cfg.w_img)
        patients.append(PatientRecord(f"P{i:0{width}d}", ct, mask, tabular[i].copy(),
                                      float(times[i]), int(events[i])))
    return Cohort(patients, cfg.to_dict(), cfg.seed, z)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_volume(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    header = VOL_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    path.write_bytes(header + arr.tobytes(order="C"))


def read_volume(path: Path, patient_id: str = "?") -> np.ndarray:
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise CohortFormatError(f"patient {patient_id}: missing volume file {path}") from exc
    if buf[:4] != VOL_MAGIC or len(buf) < 8:
        raise CohortFormatError(f"patient {patient_id}: corrupt volume file {path} (bad header)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + 4 * rank:
        raise CohortFormatError(f"patient {patient_id}: corrupt volume file {path} (truncated header)")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape))
    if len(buf) != offset + 8 * count:
        raise CohortFormatError(
            f"patient {patient_id}: corrupt volume file {path} "
            f"(expected {8 * count} payload bytes, found {len(buf) - offset})")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).copy()


def save_cohort(cohort: Cohort, directory: str | Path) -> None:
    root = Path(directory)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    k = cohort.patients[0].tabular.size if cohort.patients else 0
    manifest = {
        "format": FORMAT_NAME,
        "n_patients": len(cohort),
        "volume_shape": list(cohort.patients[0].ct.shape) if cohort.patients else [],
        "tabular_dim": k,
        "seed": cohort.seed,
        "generator_config": cohort.generator_config,
        "ids": cohort.ids,
        "ground_truth_risk": None if cohort.ground_truth_risk is None
        else [float(v) for v in cohort.ground_truth_risk],
    }
    (root / "manifest.txt").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "time", "event"] + [f"f{j + 1}" for j in range(k)])
    for p in cohort.patients:
        w.writerow([p.id, repr(float(p.time)), int(p.event)] + [repr(float(v)) for v in p.tabular])
    (root / "clinical.csv").write_text(buf.getvalue())
    for p in cohort.patients:
        write_volume(root / "volumes" / f"{p.id}.vol", p.ct)
        write_volume(root / "masks" / f"{p.id}.vol", p.mask)


def load_cohort(directory: str | Path) -> Cohort:
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.txt").read_text())
    except FileNotFoundError as exc:
        raise CohortFormatError(f"{root}: no manifest.txt") from exc
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"{root / 'manifest.txt'}: malformed ({exc})") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise CohortFormatError(f"{root / 'manifest.txt'}: unknown format {manifest.get('format')!r}")
    ids = manifest["ids"]
    if manifest["n_patients"] != len(ids):
        raise CohortFormatError(f"{root / 'manifest.txt'}: n_patients disagrees with id list")

    try:
        rows = list(csv.reader((root / "clinical.csv").read_text().splitlines()))
    except FileNotFoundError as exc:
        raise CohortFormatError(f"{root}: no clinical.csv") from exc
    header, rows = rows[0], rows[1:]
    k = manifest["tabular_dim"]
    if header[:3] != ["id", "time", "event"] or len(header) != 3 + k:
        raise CohortFormatError(f"{root / 'clinical.csv'}: unexpected header {header}")
    if len(rows) != len(ids):
        raise CohortFormatError(
            f"{root / 'clinical.csv'}: {len(rows)} rows but manifest lists {len(ids)} patients")
    for sub in ("volumes", "masks"):
        on_disk = sorted(p.stem for p in (root / sub).glob("*.vol"))
        if on_disk != sorted(ids):
            raise CohortFormatError(
                f"{root / sub}: {len(on_disk)} volume files do not match {len(ids)} manifest ids")

    shape = tuple(manifest["volume_shape"])
    patients = []
    for pid, row in zip(ids, rows):
        if row[0] != pid or len(row) != 3 + k:
            raise CohortFormatError(f"{root / 'clinical.csv'}: row for {pid} malformed or out of order")
        try:
            time, event = float(row[1]), int(row[2])
            tab = np.array([float(v) for v in row[3:]])
        except ValueError as exc:
            raise CohortFormatError(f"{root / 'clinical.csv'}: bad value in row {pid}") from exc
        ct = read_volume(root / "volumes" / f"{pid}.vol", pid)
        mask = read_volume(root / "masks" / f"{pid}.vol", pid)
        if ct.shape != shape or mask.shape != shape:
            raise CohortFormatError(f"patient {pid}: volume shape {ct.shape} vs manifest {shape}")
        patients.append(PatientRecord(pid, ct, mask, tab, time, event))
    gt = manifest.get("ground_truth_risk")
    return Cohort(patients, manifest.get("generator_config") or {}, manifest.get("seed"),
                  None if gt is None else np.array(gt, dtype=np.float64))


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def kfold_split(n: int, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition; the first ``n % k`` test folds get one extra index."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out

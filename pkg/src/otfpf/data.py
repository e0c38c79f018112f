"""Synthetic volumetric subjects and dataset manifests.

Each subject is a centered ellipsoidal phantom: a cortical shell whose
relative thickness falls linearly with age and an interior compartment
whose intensity rises with age, so age is recoverable from morphology by
construction. The T1 volume composites both plus seeded Gaussian noise;
the gray- and white-matter volumes are the clean disjoint masks times
their intensities. Generation is deterministic per seed (each subject
draws from its own spawned substream, so parallel generation cannot
reorder randomness) and re-running produces byte-identical files.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import SubjectSample
from .tensor_io import load_tensor, save_tensor

AGE_RANGE = (3.0, 97.0)
DEFAULT_SPLIT_RATIOS = {"train": 0.8, "val": 0.1, "test": 0.1}
_SPLITS = ("train", "val", "test")

_GM_INTENSITY = 0.7
_NOISE_SIGMA = 0.05


@dataclass
class ManifestRecord:
    subject_id: str
    t1_path: str
    gm_path: str
    wm_path: str
    sex: int
    age: float
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    seed: int
    size: int
    split_ratios: dict[str, float]

    def __post_init__(self):
        total = sum(self.split_ratios.get(k, 0.0) for k in _SPLITS)
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"split ratios must sum to 1, got {self.split_ratios}")
        for rec in self.records:
            if rec.split not in _SPLITS:
                raise DataError(f"unknown split tag {rec.split!r} on {rec.subject_id}")

    def split_records(self, split: str) -> list[ManifestRecord]:
        if split not in _SPLITS:
            raise DataError(f"unknown split {split!r}; expected one of {_SPLITS}")
        return [r for r in self.records if r.split == split]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "size": self.size,
            "split_ratios": {k: self.split_ratios[k] for k in _SPLITS},
            "records": [asdict(r) for r in self.records],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        try:
            records = [ManifestRecord(**r) for r in payload["records"]]
            manifest = cls(records=records, seed=int(payload["seed"]),
                           size=int(payload["size"]),
                           split_ratios=dict(payload["split_ratios"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"manifest {path} missing fields: {exc}") from exc
        base = path.parent
        for rec in records:
            for rel in (rec.t1_path, rec.gm_path, rec.wm_path):
                if not (base / rel).exists():
                    raise DataError(f"manifest references missing file: {base / rel}")
        return manifest


def synthesize_subject(age: float, sex: int, size: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build (t1, gm, wm) volumes of shape [size, size, size, 1] for one subject."""
    axis = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    dd, ww, hh = np.meshgrid(axis, axis, axis, indexing="ij")
    jitter = rng.uniform(-0.03, 0.03, size=3)
    radii = 0.82 * (1.0 + 0.02 * sex) * (1.0 + jitter) * np.array([1.0, 0.94, 0.88])
    rho = np.sqrt((dd / radii[0]) ** 2 + (ww / radii[1]) ** 2 + (hh / radii[2]) ** 2)
    alpha = (age - AGE_RANGE[0]) / (AGE_RANGE[1] - AGE_RANGE[0])
    shell_thickness = 0.30 - 0.22 * alpha
    inside = rho <= 1.0
    interior = rho <= 1.0 - shell_thickness
    shell = inside & ~interior
    wm_intensity = 0.45 + 0.35 * alpha
    gm = (shell * _GM_INTENSITY).astype(np.float32)
    wm = (interior * wm_intensity).astype(np.float32)
    noise = rng.normal(0.0, _NOISE_SIGMA, size=rho.shape)
    t1 = (gm + wm + noise).astype(np.float32)
    return t1[..., None], gm[..., None], wm[..., None]


def generate_synthetic_dataset(n: int, size: int, seed: int, out_dir,
                               split_ratios: dict[str, float] | None = None) -> DatasetManifest:
    """Write ``n`` synthetic subjects plus a manifest under ``out_dir``."""
    if n < 10:
        raise ConfigError(f"need at least 10 subjects for a meaningful split, got {n}")
    if size < 16:
        raise ConfigError(f"volume size must be >= 16 voxels per axis, got {size}")
    ratios = dict(split_ratios or DEFAULT_SPLIT_RATIOS)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory not writable: {out_dir} ({exc})") from exc

    master = np.random.default_rng(seed)
    ages = master.uniform(*AGE_RANGE, size=n)
    sexes = master.integers(0, 2, size=n)
    perm = master.permutation(n)
    n_train = int(round(ratios["train"] * n))
    n_val = int(round(ratios["val"] * n))
    split_of = {}
    for rank, idx in enumerate(perm):
        if rank < n_train:
            split_of[idx] = "train"
        elif rank < n_train + n_val:
            split_of[idx] = "val"
        else:
            split_of[idx] = "test"

    children = np.random.SeedSequence(seed).spawn(n)

    def build(i: int) -> ManifestRecord:
        rng = np.random.default_rng(children[i])
        t1, gm, wm = synthesize_subject(float(ages[i]), int(sexes[i]), size, rng)
        sid = f"subj_{i:04d}"
        save_tensor(out_dir / f"{sid}_t1", t1)
        save_tensor(out_dir / f"{sid}_gm", gm)
        save_tensor(out_dir / f"{sid}_wm", wm)
        return ManifestRecord(
            subject_id=sid,
            t1_path=f"{sid}_t1.json",
            gm_path=f"{sid}_gm.json",
            wm_path=f"{sid}_wm.json",
            sex=int(sexes[i]),
            age=float(ages[i]),
            split=split_of[i],
        )

    workers = int(os.environ.get("OTFPF_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(build, range(n)))
    else:
        records = [build(i) for i in range(n)]
    manifest = DatasetManifest(records=records, seed=seed, size=size,
                               split_ratios=ratios)
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_samples(manifest: DatasetManifest, base_dir, split: str | None = None
                 ) -> list[SubjectSample]:
    """Materialize subject volumes for one split (or all records)."""
    base = Path(base_dir)
    records = manifest.records if split is None else manifest.split_records(split)
    out = []
    for rec in records:
        out.append(SubjectSample(
            t1=load_tensor(base / rec.t1_path),
            gm=load_tensor(base / rec.gm_path),
            wm=load_tensor(base / rec.wm_path),
            sex=rec.sex,
            age=rec.age,
        ))
    return out

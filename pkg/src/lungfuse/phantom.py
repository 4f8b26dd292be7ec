"""Synthetic paired CT/PET dataset generator with exact ground truth.

Each patient is an analytic scene: a bright body ellipse with two dark
lung ellipses and one tumor blob in the CT; a smooth metabolic glow
with a hotspot over the tumor in the PET.  The PET scene is rendered at
a recorded rigid jitter of the CT geometry, so registration has a known
answer without any resampling error.  Subtype signal is planted in the
tumor texture (CT), the hotspot intensity and extent (PET), and a
subset of the tabular columns; signal_strength scales all three.

The lung edge is shaped so that the clean CT crosses the default
segmentation threshold (0.35) exactly on the geometric lung boundary,
which makes the shipped truth masks recoverable to pixel accuracy.

A dataset directory contains:
    images/<id>_ct.pgm, images/<id>_pet.pgm      noisy inputs
    truth/<id>_pet_clean.pgm, truth/<id>_lungs.pgm
    tabular.csv, tabular.schema.json
    manifest.json   rows {id, ct, pet, tabular_row_id, label}
    truth.json      per-patient geometry, jitter, plant parameters
    meta.json       resolved config echo
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .fusion import RigidTransform
from .images import read_pgm, write_pgm
from .tabular import ColumnSpec, TabularDataset, read_table, write_table

__all__ = [
    "PhantomConfig",
    "SUBTYPES",
    "generate",
    "describe",
    "render_ct",
    "render_pet",
    "mask_from_geometry",
    "apply_point",
    "sample_patient",
    "load_manifest",
]

SUBTYPES = ("adenocarcinoma", "squamous")

_MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PhantomConfig:
    n_patients: int = 60
    image_size: int = 64  # divisible by 4
    class_balance: float = 0.5  # fraction of adenocarcinoma
    noise_sigma: float = 0.02
    registration_jitter: float = 3.0  # max |tx|, |ty| in px
    signal_strength: float = 1.0
    missing_rate: float = 0.0
    seed: int = 42

    def __post_init__(self):
        if self.n_patients < 2:
            raise ConfigError(f"n_patients must be >= 2, got {self.n_patients}")
        if self.image_size % 4 or self.image_size < 16:
            raise ConfigError(
                f"image_size must be >= 16 and divisible by 4, got {self.image_size}"
            )
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigError(f"class_balance must be in (0, 1), got {self.class_balance}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.registration_jitter < 0:
            raise ConfigError(f"registration_jitter must be >= 0, got {self.registration_jitter}")
        if self.signal_strength < 0:
            raise ConfigError(f"signal_strength must be >= 0, got {self.signal_strength}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"missing_rate must be in [0, 1), got {self.missing_rate}")


def _sig(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return xx, yy


def _edist(xx, yy, center, axes, phi=0.0):
    """Normalized radial distance to a rotated ellipse (1.0 = boundary)."""
    dx, dy = xx - center[0], yy - center[1]
    ca, sa = math.cos(phi), math.sin(phi)
    u = (ca * dx + sa * dy) / axes[0]
    v = (-sa * dx + ca * dy) / axes[1]
    return np.hypot(u, v)


def apply_point(t: RigidTransform, size: int, p):
    """Forward-map a point the way resampling moves image content."""
    c = (size - 1) / 2.0
    dx, dy = p[0] - c, p[1] - c
    ca, sa = math.cos(t.theta), math.sin(t.theta)
    return [
        t.scale * (ca * dx - sa * dy) + c + t.tx,
        t.scale * (sa * dx + ca * dy) + c + t.ty,
    ]


def render_ct(geom: dict, size: int) -> np.ndarray:
    """Noise-free CT scene from a truth geometry record."""
    xx, yy = _grid(size)
    img = 0.05 + 0.80 * _sig((1.0 - _edist(xx, yy, geom["body_center"], geom["body_axes"])) / 0.035)
    for lung in geom["lungs"]:
        d = _edist(xx, yy, lung["center"], lung["axes"])
        # depth 1.0 puts the 0.35 threshold crossing exactly at d = 1
        img -= 1.0 * _sig((1.0 - d) / 0.056)
    tx, ty = geom["tumor_center"]
    sig2 = geom["tumor_sigma"] ** 2
    tex = geom["texture"]
    ux, uy = tex["direction"]
    grating = 1.0 + tex["amp"] * np.cos(
        2.0 * math.pi * (ux * (xx - tx) + uy * (yy - ty)) / tex["wavelength"] + tex["phase"]
    )
    img += geom["tumor_amp"] * np.exp(-((xx - tx) ** 2 + (yy - ty) ** 2) / (2.0 * sig2)) * grating
    return np.clip(img, 0.0, 1.0)


def render_pet(geom: dict, size: int, hotspot: bool = True) -> np.ndarray:
    """Noise-free PET scene (jitter already baked into the geometry)."""
    xx, yy = _grid(size)
    pet = geom["pet"]
    d = _edist(xx, yy, pet["glow_center"], pet["glow_axes"], pet["glow_phi"])
    # edge slope matches the CT body edge so cross-modal registration
    # sees the same boundary profile in both images
    img = 0.06 + pet["glow_amp"] * _sig((1.0 - d) / 0.035)
    for lung in pet["lungs"]:
        # air-filled lung takes up less tracer; also anchors rotation
        dl = _edist(xx, yy, lung["center"], lung["axes"], pet["glow_phi"])
        img -= 0.12 * _sig((1.0 - dl) / 0.056)
    if hotspot:
        hx, hy = pet["hotspot_center"]
        img += pet["hotspot_amp"] * np.exp(
            -((xx - hx) ** 2 + (yy - hy) ** 2) / (2.0 * pet["hotspot_sigma2"])
        )
    return np.clip(img, 0.0, 1.0)


def mask_from_geometry(geom: dict, size: int) -> np.ndarray:
    """Boolean lung mask: interiors of the two lung ellipses."""
    xx, yy = _grid(size)
    mask = np.zeros((size, size), dtype=bool)
    for lung in geom["lungs"]:
        mask |= _edist(xx, yy, lung["center"], lung["axes"]) <= 1.0
    return mask


def _jitter_transform(rec: dict) -> RigidTransform:
    return RigidTransform(
        tx=rec["tx"], ty=rec["ty"], theta=math.radians(rec["theta_deg"]), scale=rec["scale"]
    )


def sample_patient(rng, cfg: PhantomConfig, subtype: str) -> dict:
    """Draw one patient's geometry, jitter and plant parameters."""
    size = cfg.image_size
    s = cfg.signal_strength
    is_squamous = subtype == "squamous"
    cx = size / 2.0 + rng.uniform(-2.0, 2.0)
    cy = size / 2.0 + rng.uniform(-2.0, 2.0)
    body_axes = [size * 0.42 * rng.uniform(0.97, 1.03), size * 0.36 * rng.uniform(0.97, 1.03)]
    lungs = []
    for side in (-1, 1):
        lungs.append(
            {
                "center": [
                    cx + side * size * 0.17,
                    cy - size * 0.02 + side * size * 0.01,
                ],
                "axes": [
                    size * 0.11 * rng.uniform(0.95, 1.05),
                    size * 0.20 * rng.uniform(0.95, 1.05),
                ],
            }
        )
    lung = lungs[int(rng.integers(2))]
    tumor_center = [
        lung["center"][0] + rng.uniform(-0.15, 0.15) * lung["axes"][0],
        lung["center"][1] + rng.uniform(-0.30, 0.30) * lung["axes"][1],
    ]
    tumor_sigma = max(1.8, 0.034 * size)
    angle = rng.uniform(0.0, math.pi)
    blend = min(s, 1.0)
    texture = {
        # the grating frequency carries the CT subtype signal
        "wavelength": 7.0 - 4.0 * blend if is_squamous else 7.0,
        "amp": 0.45,
        "direction": [math.cos(angle), math.sin(angle)],
        "phase": rng.uniform(0.0, 2.0 * math.pi),
    }
    jitter = {
        "tx": rng.uniform(-cfg.registration_jitter, cfg.registration_jitter),
        "ty": rng.uniform(-cfg.registration_jitter, cfg.registration_jitter),
        "theta_deg": rng.uniform(-2.0, 2.0),
        "scale": rng.uniform(0.97, 1.03),
    }
    t = _jitter_transform(jitter)
    glow_center = apply_point(t, size, [cx, cy])
    hotspot_center = apply_point(t, size, tumor_center)
    boost = s if is_squamous else 0.0
    pet = {
        "glow_center": glow_center,
        "glow_axes": [body_axes[0] * t.scale, body_axes[1] * t.scale],
        "glow_phi": math.radians(jitter["theta_deg"]),
        "lungs": [
            {
                "center": apply_point(t, size, lung["center"]),
                "axes": [lung["axes"][0] * t.scale, lung["axes"][1] * t.scale],
            }
            for lung in lungs
        ],
        # higher overall uptake for squamous: the subtype signal that
        # survives low-pass fusion into every region of the fused image
        "glow_amp": 0.34 * (1.0 + 0.08 * boost),
        "hotspot_center": hotspot_center,
        "hotspot_amp": 0.45 * (1.0 + 0.20 * boost),
        "hotspot_sigma2": 12.0 * (size / 64.0) ** 2 * (1.0 + 0.40 * boost),
    }
    return {
        "subtype": subtype,
        "jitter": jitter,
        "geometry": {
            "body_center": [cx, cy],
            "body_axes": body_axes,
            "lungs": lungs,
            "tumor_center": tumor_center,
            "tumor_sigma": tumor_sigma,
            "tumor_amp": 0.35,
            "texture": texture,
            "pet": pet,
        },
    }


_GENE_SHIFTS = (1.6, 1.2, 0.9)  # applied to gene_00..gene_02 for squamous

_SMOKING = ("never", "former", "current")
_SEX = ("female", "male")


def _patient_tabular(rng, cfg: PhantomConfig, subtype: str):
    """One clinical + genomic row; returns a list of raw values."""
    s = cfg.signal_strength
    y = 1.0 if subtype == "squamous" else 0.0
    blend = min(s, 1.0)
    base = np.array([0.45, 0.35, 0.20]) if y == 0 else np.array([0.15, 0.35, 0.50])
    probs = (1.0 - blend) * np.full(3, 1.0 / 3.0) + blend * base
    probs = probs / probs.sum()
    row = [
        float(rng.normal(63.0, 9.0) + 3.0 * s * y),  # age
        _SEX[int(rng.integers(2))],
        _SMOKING[int(rng.choice(3, p=probs))],
        float(max(0.0, rng.normal(18.0, 9.0) + 16.0 * s * y)),  # pack_years
        float(rng.integers(0, 3)),  # ecog
        float(rng.normal(26.0, 4.0)),  # bmi
    ]
    for gi in range(10):
        shift = _GENE_SHIFTS[gi] * s * y if gi < len(_GENE_SHIFTS) else 0.0
        row.append(float(rng.normal(0.0, 1.0) + shift))
    return row


def _tabular_columns():
    cols = [
        ColumnSpec("age", "numeric"),
        ColumnSpec("sex", "categorical", _SEX),
        ColumnSpec("smoking", "categorical", _SMOKING),
        ColumnSpec("pack_years", "numeric"),
        ColumnSpec("ecog", "numeric"),
        ColumnSpec("bmi", "numeric"),
    ]
    cols.extend(ColumnSpec(f"gene_{gi:02d}", "numeric") for gi in range(10))
    return cols


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def generate(cfg: PhantomConfig, out_dir) -> dict:
    """Write a complete dataset directory; returns a small summary.

    Fully deterministic: one RNG stream in a fixed draw order, so the
    same config reproduces every byte.
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "truth"), exist_ok=True)

    n_adeno = round(cfg.n_patients * cfg.class_balance)
    n_adeno = min(max(n_adeno, 1), cfg.n_patients - 1)  # both classes present
    subtypes = [SUBTYPES[0]] * n_adeno + [SUBTYPES[1]] * (cfg.n_patients - n_adeno)
    rng.shuffle(subtypes)

    rows, labels, ids, patients, manifest_rows = [], [], [], [], []
    for i, subtype in enumerate(subtypes):
        pid = f"pt{i:04d}"
        truth = sample_patient(rng, cfg, subtype)
        geom = truth["geometry"]
        ct = np.clip(render_ct(geom, size) + rng.normal(0.0, cfg.noise_sigma, (size, size)), 0.0, 1.0)
        pet_clean = render_pet(geom, size)
        pet = np.clip(pet_clean + rng.normal(0.0, cfg.noise_sigma, (size, size)), 0.0, 1.0)
        ct_rel = f"images/{pid}_ct.pgm"
        pet_rel = f"images/{pid}_pet.pgm"
        clean_rel = f"truth/{pid}_pet_clean.pgm"
        mask_rel = f"truth/{pid}_lungs.pgm"
        write_pgm(ct, os.path.join(out_dir, ct_rel))
        write_pgm(pet, os.path.join(out_dir, pet_rel))
        write_pgm(pet_clean, os.path.join(out_dir, clean_rel))
        write_pgm(mask_from_geometry(geom, size).astype(np.float64), os.path.join(out_dir, mask_rel))
        rows.append(_patient_tabular(rng, cfg, subtype))
        labels.append(subtype)
        ids.append(pid)
        truth.update({"id": pid, "pet_clean": clean_rel, "lung_mask": mask_rel})
        patients.append(truth)
        manifest_rows.append(
            {"id": pid, "ct": ct_rel, "pet": pet_rel, "tabular_row_id": pid, "label": subtype}
        )

    if cfg.missing_rate > 0:
        for row in rows:
            for j in range(len(row)):
                if rng.uniform() < cfg.missing_rate:
                    row[j] = None

    table = TabularDataset(_tabular_columns(), rows, labels, ids)
    write_table(
        os.path.join(out_dir, "tabular.csv"),
        table,
        os.path.join(out_dir, "tabular.schema.json"),
        label_column="subtype",
        id_column="patient",
    )
    _write_json(
        os.path.join(out_dir, "manifest.json"),
        {
            "schema_version": _MANIFEST_VERSION,
            "kind": "phantom-manifest",
            "image_size": size,
            "tabular": "tabular.csv",
            "tabular_schema": "tabular.schema.json",
            "rows": manifest_rows,
        },
    )
    _write_json(
        os.path.join(out_dir, "truth.json"),
        {
            "schema_version": _MANIFEST_VERSION,
            "kind": "phantom-truth",
            "patients": patients,
        },
    )
    _write_json(
        os.path.join(out_dir, "meta.json"),
        {
            "schema_version": _MANIFEST_VERSION,
            "kind": "phantom-meta",
            "config": asdict(cfg),
        },
    )
    counts = {s: subtypes.count(s) for s in SUBTYPES}
    return {"dir": str(out_dir), "n_patients": cfg.n_patients, "classes": counts}


def _require(path, what):
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    return path


def load_manifest(dataset_dir) -> dict:
    path = _require(os.path.join(dataset_dir, "manifest.json"), "manifest")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from None
    if doc.get("kind") != "phantom-manifest":
        raise FormatError(f"{path}: not a phantom manifest")
    return doc


def describe(dataset_dir) -> dict:
    """Deterministic summary of a generated dataset directory."""
    manifest = load_manifest(dataset_dir)
    rows = manifest["rows"]
    counts: dict = {}
    for r in rows:
        counts[r["label"]] = counts.get(r["label"], 0) + 1
    ct_means, pet_means = [], []
    for r in rows:
        ct_means.append(float(np.mean(read_pgm(os.path.join(dataset_dir, r["ct"])))))
        pet_means.append(float(np.mean(read_pgm(os.path.join(dataset_dir, r["pet"])))))
    table = read_table(
        os.path.join(dataset_dir, manifest["tabular"]),
        os.path.join(dataset_dir, manifest["tabular_schema"]),
    )
    missing = {c.name: 0 for c in table.columns}
    for row in table.rows:
        for col, v in zip(table.columns, row):
            if v is None:
                missing[col.name] += 1
    return {
        "kind": "phantom-summary",
        "n_patients": len(rows),
        "classes": counts,
        "image_size": manifest["image_size"],
        "ct_mean_intensity": float(np.mean(ct_means)),
        "pet_mean_intensity": float(np.mean(pet_means)),
        "tabular_rows": table.n_rows,
        "tabular_columns": len(table.columns),
        "missing_values": missing,
        "total_missing": int(sum(missing.values())),
    }

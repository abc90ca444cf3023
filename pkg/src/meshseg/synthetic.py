"""Synthetic phantoms and cohorts for desk-scale checks and demos."""

from __future__ import annotations

import numpy as np

from .rng import make_rng
from .stats import SubjectRecord
from .volume import Volume, minmax_normalize

# class -> mean intensity per modality
PHANTOM_INTENSITY = ((0.1, 0.5, 0.9), (0.8, 0.3, 0.55))


def phantom_labels(side, center=None):
    """Three-region phantom: background 0, ellipsoidal shell 1, core 2."""
    c = np.asarray(center if center is not None else (side / 2 - 0.5,) * 3)
    g = np.indices((side,) * 3, dtype=np.float64)
    radii = np.array([0.38, 0.32, 0.35]) * side
    r = np.sqrt(sum(((g[a] - c[a]) / radii[a]) ** 2 for a in range(3)))
    labels = np.zeros((side,) * 3, dtype=np.uint8)
    labels[r <= 1.0] = 1
    # off-center core so the classes are not radially symmetric
    core_c = c + np.array([0.08, -0.05, 0.04]) * side
    rc = np.sqrt(sum(((g[a] - core_c[a]) / (0.55 * radii[a])) ** 2 for a in range(3)))
    labels[rc <= 1.0] = 2
    return labels


def phantom(side=32, modalities=1, noise=0.05, seed=0, intensities=None):
    """Noisy intensity volume(s) and the matching label volume.

    ``intensities`` overrides the per-class means of the first modality,
    e.g. to simulate a scanner with different contrast.
    """
    labels = phantom_labels(side)
    rng = make_rng(seed, stream=7)
    vols = []
    for m in range(modalities):
        means = np.asarray(intensities if (intensities is not None and m == 0) else PHANTOM_INTENSITY[m % 2])
        img = means[labels] + noise * rng.standard_normal(labels.shape)
        vols.append(minmax_normalize(Volume(img.astype(np.float32))))
    return vols, Volume(labels, kind="labels")


ARCHETYPES = {
    # bucket -> (patient offset under reference, patient offset under meshnet), in units of delta
    "label_only": (1.0, 1.0),
    "both": (1.0, 3.0),
    "neither": (0.0, 0.0),
    "interaction_only": (-1.0, 1.0),
}


def simulate_cohort(n_per_group=150, rois=None, delta=150.0, seed=0, paired=True, sites=7):
    """Control/patient cohort with per-ROI volumes for two methods.

    ``rois`` maps ROI name -> archetype key of :data:`ARCHETYPES`. With
    ``paired=True`` each patient is a covariate-matched twin of a control,
    sharing its volumes except for the archetype offsets, so the designed
    null effects are exactly zero. With ``paired=False`` patients are drawn
    independently and null effects hold only in distribution.
    """
    rois = rois or {name: name for name in ARCHETYPES}
    rng = make_rng(seed, stream=11)

    def draw_subject(i, group, twin=None):
        if twin is None:
            age = float(rng.uniform(18, 62))
            gender = int(rng.random() < 0.3)
            site = int(rng.integers(0, sites))
            vb = float(rng.normal(1.2e6, 1e5))
            base = {}
            for roi in rois:
                site_eff = 40.0 * np.sin(site + len(roi))
                true = 3000 + 15 * age - 0.12 * age ** 2 + 250 * gender + 0.004 * vb + site_eff
                true += rng.normal(0, 200)
                base[roi] = (true + rng.normal(0, 60), true + 80 + rng.normal(0, 60))
        else:
            age, gender, site, vb, base = twin
        volumes = {"reference": {}, "meshnet": {}}
        for roi, arche in rois.items():
            a, b = ARCHETYPES[arche] if group == "patient" else (0.0, 0.0)
            volumes["reference"][roi] = base[roi][0] + a * delta
            volumes["meshnet"][roi] = base[roi][1] + b * delta
        rec = SubjectRecord(f"{group}{i:04d}", age, gender, site, group, volumes,
                            {"reference": vb, "meshnet": vb * 1.01})
        return rec, (age, gender, site, vb, base)

    records = []
    for i in range(n_per_group):
        ctrl, raw = draw_subject(i, "control")
        records.append(ctrl)
        pat, _ = draw_subject(i, "patient", twin=raw if paired else None)
        records.append(pat)
    return records, list(rois)

"""Group-difference meta-analysis on per-ROI volumes.

Two stages per ROI and method: regress the ROI volume on nuisance covariates
(age, age^2, gender, brain volume, their gender interactions, site dummies)
and keep the residuals; then run a mixed two-factor ANOVA on the residuals
with method as the repeated factor and diagnostic group as the between
factor. ROIs are sorted into four buckets by which of the group and
method-by-group effects reach significance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats as sps

METHODS = ("reference", "meshnet")
COVARIATE_COLUMNS = ("intercept", "age", "age^2", "gender", "V_brain", "gender:age", "gender:V_brain")

BUCKETS = (
    "label_only",         # label significant, method:label not
    "both",               # label and method:label significant
    "neither",
    "interaction_only",   # method:label significant, label not
)


class RankDeficiencyError(ValueError):
    def __init__(self, columns):
        super().__init__(f"design matrix is rank deficient; dependent columns: {', '.join(columns)}")
        self.columns = list(columns)


@dataclass
class SubjectRecord:
    subject: str
    age: float
    gender: int  # 0 male, 1 female
    site: int
    group: str  # "control" or "patient"
    volumes: dict  # method -> {roi: voxel count}
    brain_volume: dict | None = None  # method -> V_brain; defaults to the ROI sum

    def v_brain(self, method):
        if self.brain_volume and method in self.brain_volume:
            return float(self.brain_volume[method])
        return float(sum(self.volumes[method].values()))


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    columns: list
    subjects: list


@dataclass
class OLSResult:
    coef: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    r2: float
    df_resid: int
    rank: int


@dataclass
class AnovaResult:
    F: dict
    p: dict
    df: dict

    def significant(self, effect, alpha=0.05):
        return self.p[effect] < alpha


def dependent_columns(X, columns, tol=None):
    """Columns that add nothing to the span of the ones before them."""
    bad, kept = [], []
    norms = np.linalg.norm(X, axis=0)
    tol = tol or max(X.shape) * np.finfo(float).eps * 1e3
    for j in range(X.shape[1]):
        if norms[j] == 0:
            bad.append(columns[j])
            continue
        cand = kept + [j]
        if len(cand) > X.shape[0]:
            bad.append(columns[j])
            continue
        s = np.linalg.svd(X[:, cand] / norms[cand], compute_uv=False)
        if s[-1] <= tol * s[0]:
            bad.append(columns[j])
        else:
            kept.append(j)
    return bad


def design_matrix(records, method, roi, sites=None):
    """Unchecked design matrix and response; see :func:`build_design`."""
    if not records:
        raise ValueError("no subjects")
    sites = sorted({r.site for r in records}) if sites is None else sorted(sites)
    site_cols = [f"site_{s}" for s in sites[1:]]
    rows, y = [], []
    for r in records:
        for v, name in ((r.age, "age"), (r.gender, "gender")):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                raise ValueError(f"subject {r.subject}: missing {name}")
        vb = r.v_brain(method)
        rows.append([1.0, r.age, r.age ** 2, r.gender, vb, r.gender * r.age, r.gender * vb]
                    + [1.0 if r.site == s else 0.0 for s in sites[1:]])
        y.append(float(r.volumes[method][roi]))
    X = np.array(rows, dtype=np.float64)
    columns = list(COVARIATE_COLUMNS) + site_cols
    return Design(X, np.array(y), columns, [r.subject for r in records])


def build_design(records, method, roi, sites=None):
    """Design matrix and response for one ROI under one segmentation method.

    Site dummies use the lowest site id as the reference level. Raises
    :class:`RankDeficiencyError` naming the columns that are not full rank.
    """
    d = design_matrix(records, method, roi, sites)
    bad = dependent_columns(d.X, d.columns)
    if bad:
        raise RankDeficiencyError(bad)
    return d


def ols_fit(X, y, columns=None):
    """Least squares through a pivot-free QR factorization."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    if n <= k:
        raise ValueError(f"need more rows than columns, got {n} x {k}")
    columns = columns or [f"x{j}" for j in range(k)]
    bad = dependent_columns(X, columns)
    if bad:
        raise RankDeficiencyError(bad)
    Q, R = np.linalg.qr(X)
    coef = linalg.solve_triangular(R, Q.T @ y)
    fitted = X @ coef
    resid = y - fitted
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return OLSResult(coef, resid, fitted, r2, n - k, k)


def residualize(records, roi, methods=METHODS):
    """Covariate-adjusted residuals, shape (subjects, methods)."""
    out = []
    for m in methods:
        d = build_design(records, m, roi)
        out.append(ols_fit(d.X, d.y, d.columns).residuals)
    return np.stack(out, axis=1)


def _groups(labels):
    labels = np.asarray(labels)
    levels = sorted(set(labels.tolist()))
    if len(levels) != 2:
        raise ValueError(f"need exactly two groups, got {levels}")
    return labels, levels


def rm_anova(residuals, labels):
    """Split-plot ANOVA on (subjects, 2) repeated measurements.

    Between-subject stratum tests ``label`` against subjects within groups;
    within-subject stratum tests ``method`` and ``method:label`` against the
    subject-by-method error. Sums of squares are sequential (method, label,
    method:label). All three F tests have (1, n - 2) degrees of freedom.
    """
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != 2:
        raise ValueError("residuals must have shape (subjects, 2)")
    if not np.isfinite(r).all():
        raise ValueError("missing measurements: every subject needs one finite value per method")
    labels, levels = _groups(labels)
    if len(labels) != len(r):
        raise ValueError("one label per subject required")
    masks = [labels == lv for lv in levels]
    sizes = [int(m.sum()) for m in masks]
    if min(sizes) < 2:
        raise ValueError(f"each group needs at least 2 subjects, got sizes {sizes}")
    n = len(r)

    # between: subject means (scaled so SS match the full two-level layout)
    s = r.sum(axis=1) / math.sqrt(2)
    ss_label = sum(k * (s[m].mean() - s.mean()) ** 2 for m, k in zip(masks, sizes))
    ss_subj = sum(((s[m] - s[m].mean()) ** 2).sum() for m in masks)
    # within: method differences
    d = (r[:, 1] - r[:, 0]) / math.sqrt(2)
    ss_method = n * d.mean() ** 2
    ss_inter = sum(k * (d[m].mean() - d.mean()) ** 2 for m, k in zip(masks, sizes))
    ss_err = sum(((d[m] - d[m].mean()) ** 2).sum() for m in masks)

    df_err = n - 2
    F, p = {}, {}
    for name, ss, err in (("label", ss_label, ss_subj), ("method", ss_method, ss_err),
                          ("method:label", ss_inter, ss_err)):
        if err <= 0:
            f = 0.0 if ss <= 0 else math.inf
        else:
            f = ss / (err / df_err)
        F[name] = f
        p[name] = float(sps.f.sf(f, 1, df_err)) if math.isfinite(f) else 0.0
    return AnovaResult(F, p, {k: (1, df_err) for k in F})


def cohens_d(a, b):
    """(mean_a - mean_b) / pooled SD with (n - 1) weights."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least 2 values")
    na, nb = len(a), len(b)
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if pooled <= 0:
        if a.mean() == b.mean():
            return 0.0
        raise ZeroDivisionError("pooled variance is zero")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


@dataclass
class RoiResult:
    roi: str
    anova: AnovaResult
    cohens_d: dict  # method -> d (patient minus control)
    bucket: str = ""


def bucket_of(anova, alpha=0.05):
    label = anova.significant("label", alpha)
    inter = anova.significant("method:label", alpha)
    if label and not inter:
        return "label_only"
    if label and inter:
        return "both"
    if inter:
        return "interaction_only"
    return "neither"


def classify_rois(results, alpha=0.05):
    """Assign each ROI result a bucket; returns bucket -> list of ROI names."""
    buckets = {b: [] for b in BUCKETS}
    for res in results:
        res.bucket = bucket_of(res.anova, alpha)
        buckets[res.bucket].append(res.roi)
    return buckets


def analyze_roi(records, roi, methods=METHODS, patient="patient", control="control"):
    resid = residualize(records, roi, methods)
    labels = np.array([r.group for r in records])
    anova = rm_anova(resid, labels)
    d = {m: cohens_d(resid[labels == patient, i], resid[labels == control, i]) for i, m in enumerate(methods)}
    return RoiResult(roi, anova, d)


def meta_analysis(records, rois, alpha=0.05, methods=METHODS):
    results = [analyze_roi(records, roi, methods) for roi in rois]
    buckets = classify_rois(results, alpha)
    return results, buckets


# -- tables ----------------------------------------------------------------------

BASE_FIELDS = ("subject", "method", "age", "gender", "site", "group")


def read_cohort(path, delimiter=None):
    """Rows of (subject, method, covariates, ROI volumes) -> records and ROI names.

    An optional ``brain_volume`` column overrides the ROI sum.
    """
    with open(path, newline="") as fh:
        text = fh.read()
    if delimiter is None:
        delimiter = "\t" if "\t" in text.splitlines()[0] else ","
    reader = csv.DictReader(text.splitlines(), delimiter=delimiter)
    missing = [f for f in BASE_FIELDS if f not in (reader.fieldnames or [])]
    if missing:
        raise ValueError(f"cohort table lacks columns {missing}")
    rois = [f for f in reader.fieldnames if f not in BASE_FIELDS and f != "brain_volume"]
    by_subject = {}
    for row in reader:
        sid = row["subject"]
        rec = by_subject.get(sid)
        if rec is None:
            rec = by_subject[sid] = SubjectRecord(
                sid, float(row["age"]), int(row["gender"]), int(row["site"]), row["group"], {}, {})
        m = row["method"]
        rec.volumes[m] = {roi: float(row[roi]) for roi in rois}
        if row.get("brain_volume"):
            rec.brain_volume[m] = float(row["brain_volume"])
    return list(by_subject.values()), rois


def write_cohort(path, records, rois, methods=METHODS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(list(BASE_FIELDS) + ["brain_volume"] + list(rois))
        for r in records:
            for m in methods:
                w.writerow([r.subject, m, r.age, r.gender, r.site, r.group, r.v_brain(m)]
                           + [r.volumes[m][roi] for roi in rois])


def write_stats_report(path, results, buckets, methods=METHODS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["roi", "F_method", "p_method", "F_label", "p_label", "F_method:label", "p_method:label"]
                   + [f"d_{m}" for m in methods] + ["bucket"])
        for res in results:
            a = res.anova
            w.writerow([res.roi]
                       + [f"{v:.6g}" for e in ("method", "label", "method:label") for v in (a.F[e], a.p[e])]
                       + [f"{res.cohens_d[m]:.6g}" for m in methods] + [res.bucket])
        w.writerow([])
        w.writerow(["bucket", "count", "rois"])
        for b in BUCKETS:
            w.writerow([b, len(buckets[b]), ",".join(buckets[b])])

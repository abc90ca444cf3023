"""Training, fine-tuning, voted full-volume inference and timing benchmarks."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from .meshnet import Model, build_meshnet
from .nn import Adam, cross_entropy, logsoftmax
from .rng import make_rng
from .sampling import SamplerConfig, extract, gaussian_sample, grid_nonoverlap, scatter_add
from .volume import Volume

log = logging.getLogger(__name__)

DEFAULT_COUNTS = (512, 768, 1024, 2048, 4096, 8192)


@dataclass
class TrainConfig:
    epochs: int = 1
    subvolumes_per_epoch: int = 30720
    val_subvolumes: int = 27648
    batch_size: int = 1
    accumulate: int = 1  # batches per optimizer step
    lr: float = 0.001
    finetune_lr: float = 1e-5
    finetune_subvolumes: int = 7168
    nonoverlap_fraction: float = 0.5  # share of batches drawn from the tiling grid
    eval_subvolumes: int | None = None  # held-out segmentation; None = grid only
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def validate(self):
        for name in ("epochs", "subvolumes_per_epoch", "val_subvolumes", "batch_size", "accumulate"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.finetune_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.lr > 0 and not self.finetune_lr < self.lr:
            raise ValueError("finetune_lr must be below lr")
        if not 0 <= self.nonoverlap_fraction <= 1:
            raise ValueError("nonoverlap_fraction must lie in [0, 1]")
        return self


# -- data ---------------------------------------------------------------------------

def _stack_inputs(inputs, dtype):
    arrs = [np.asarray(getattr(v, "data", v)) for v in inputs]
    dims = {a.shape for a in arrs}
    if len(dims) != 1:
        raise ValueError(f"input modalities are not aligned: {sorted(dims)}")
    return np.stack(arrs).astype(dtype, copy=False)


@dataclass
class Dataset:
    """Aligned modality volumes (M, x, y, z) plus an integer label grid."""

    image: np.ndarray
    labels: np.ndarray | None = None

    @classmethod
    def from_volumes(cls, inputs, labels=None, dtype=np.float32):
        lab = None if labels is None else np.asarray(getattr(labels, "data", labels))
        img = _stack_inputs(inputs, dtype)
        if lab is not None and lab.shape != img.shape[1:]:
            raise ValueError(f"labels {lab.shape} do not match inputs {img.shape[1:]}")
        return cls(img, lab)

    @property
    def dims(self):
        return self.image.shape[1:]


def _datasets(items, dtype):
    out = []
    for item in items:
        if isinstance(item, Dataset):
            out.append(Dataset(item.image.astype(dtype, copy=False), item.labels))
        else:
            inputs, labels = item
            out.append(Dataset.from_volumes(inputs, labels, dtype))
    return out


def default_sampler(dims, side, count=1024, seed=0, mean=None, std=None):
    """Sampler centered on the volume; std scales with size (60 voxels at 256)."""
    dims = tuple(dims)
    return SamplerConfig(
        volume_dims=dims,
        side=side,
        gaussian_mean=mean if mean is not None else tuple(d / 2 for d in dims),
        gaussian_std=std if std is not None else tuple(60.0 * d / 256 for d in dims),
        count=count,
        seed=seed,
    )


# -- inference ------------------------------------------------------------------------

@dataclass
class VoteGrid:
    counts: np.ndarray  # (classes, x, y, z) votes, or summed log-probabilities
    coverage: np.ndarray  # (x, y, z) number of subvolumes seen

    def totals(self):
        return self.coverage

    def labels(self):
        # argmax returns the first maximum, i.e. ties go to the smallest class
        return self.counts.argmax(axis=0)


@dataclass
class Segmentation:
    labels: Volume
    votes: VoteGrid
    corners: np.ndarray


def inference_corners(cfg, n_subvolumes):
    """Full tiling grid first, then Gaussian draws up to ``n_subvolumes``."""
    grid = grid_nonoverlap(cfg)
    extra = max(0, n_subvolumes - len(grid))
    if extra == 0:
        return grid
    return np.concatenate([grid, gaussian_sample(cfg, count=extra)])


def segment(inputs, model, cfg=None, n_subvolumes=1024, seed=0, batch_size=8,
            vote="majority", executor=None):
    """Voted whole-volume segmentation.

    Each subvolume is labeled by the per-voxel argmax of the model's
    log-softmax output; the final label of a voxel is the class with the
    most votes (smallest index on ties). ``vote="logprob"`` sums
    log-probabilities instead of counting votes.
    """
    if vote not in ("majority", "logprob"):
        raise ValueError(f"vote must be 'majority' or 'logprob', got {vote!r}")
    volumes = list(inputs) if not isinstance(inputs, Dataset) else None
    img = inputs.image.astype(model.dtype, copy=False) if volumes is None else _stack_inputs(volumes, model.dtype)
    if img.shape[0] != model.spec.modalities:
        raise ValueError(f"model expects {model.spec.modalities} modalities, got {img.shape[0]}")
    if n_subvolumes < 1:
        raise ValueError("n_subvolumes must be at least 1")
    dims = img.shape[1:]
    side = model.spec.subvolume_side
    cfg = cfg or default_sampler(dims, side, seed=seed)
    cfg = cfg.with_(volume_dims=dims, side=side, seed=seed)
    corners = inference_corners(cfg, n_subvolumes)

    C = model.spec.classes
    out_side = model.spec.output_side(side)
    crop = (side - out_side) // 2
    count_dtype = np.uint16 if len(corners) < 2 ** 16 else np.uint32
    counts = np.zeros((C,) + dims, dtype=count_dtype if vote == "majority" else np.float64)
    coverage = np.zeros(dims, dtype=np.int32)
    classes = np.arange(C).reshape(C, 1, 1, 1)
    ones = np.ones((out_side,) * 3, dtype=np.int32)

    was = model.training
    model.eval()

    def run(chunk):
        patches = extract(img, chunk, side).patches
        logits = model.forward(patches, grad=False).data
        if vote == "majority":
            return logits.argmax(axis=1)
        return logsoftmax_np(logits)

    chunks = [corners[i:i + batch_size] for i in range(0, len(corners), batch_size)]
    try:
        results = executor.map(run, chunks) if executor is not None else map(run, chunks)
        # merged in chunk order, so the tally is independent of worker timing
        for chunk, pred in zip(chunks, results):
            for corner, p in zip(chunk + crop, pred):
                if vote == "majority":
                    scatter_add(counts, [corner], (p[None] == classes).astype(count_dtype))
                else:
                    scatter_add(counts, [corner], p)
                scatter_add(coverage, [corner], ones)
    finally:
        model.train(was)

    if out_side == side:
        assert coverage.min() >= 1, "unvoted voxel"
    labels = counts.argmax(axis=0)
    labels[coverage == 0] = 0
    lab = Volume(labels.astype(np.uint8 if C <= 256 else np.int32), kind="labels",
                 meta={"n_subvolumes": len(corners), "seed": seed})
    return Segmentation(lab, VoteGrid(counts, coverage), corners)


def logsoftmax_np(x, axis=1):
    s = x - x.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


# -- training ----------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    macro_dice: float


@dataclass
class TrainResult:
    model: Model  # best validation checkpoint
    final: Model
    history: list

    def write_log(self, path):
        write_log(path, self.history)


def write_log(path, history):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(asdict(rec)) + "\n")


def read_log(path):
    with open(path) as fh:
        return [EpochRecord(**json.loads(line)) for line in fh if line.strip()]


class _PatchStream:
    """Training patches mixing tiling-grid and Gaussian corners batch by batch."""

    def __init__(self, datasets, cfg, rng):
        self.datasets = datasets
        self.cfg = cfg
        self.rng = rng
        self.grids = [None] * len(datasets)
        self.batch_index = 0

    def _sampler(self, ds):
        return self.cfg.sampler.with_(volume_dims=ds.dims)

    def _grid_corner(self, i):
        ds = self.datasets[i]
        if not self.grids[i]:
            g = grid_nonoverlap(self._sampler(ds))
            self.grids[i] = list(g[self.rng.permutation(len(g))])
        return self.grids[i].pop()

    def next_batch(self, size):
        f = self.cfg.nonoverlap_fraction
        b = self.batch_index
        use_grid = math.floor((b + 1) * f) > math.floor(b * f)
        self.batch_index += 1
        items = []
        for _ in range(size):
            i = int(self.rng.integers(len(self.datasets)))
            ds = self.datasets[i]
            if use_grid:
                corner = self._grid_corner(i)
            else:
                corner = gaussian_sample(self._sampler(ds), self.rng, count=1)[0]
            items.append((i, corner))
        return items


def _gather(datasets, items, side, out_side):
    crop = (side - out_side) // 2
    xs, ys = [], []
    for i, corner in items:
        ds = datasets[i]
        xs.append(extract(ds.image, [corner], side).patches[0])
        lab = extract(ds.labels, [corner], side).patches[0, 0]
        ys.append(lab[crop:crop + out_side, crop:crop + out_side, crop:crop + out_side])
    return np.stack(xs), np.stack(ys).astype(np.int64)


def _check_labels(datasets, classes):
    for ds in datasets:
        if ds.labels is None:
            raise ValueError("training datasets need label volumes")
        if ds.labels.min() < 0 or ds.labels.max() >= classes:
            raise ValueError(f"labels outside [0, {classes - 1}]")


def evaluate_loss(model, datasets, items, batch_size=8):
    side = model.spec.subvolume_side
    out_side = model.spec.output_side(side)
    was = model.training
    model.eval()
    total, n = 0.0, 0
    try:
        for j in range(0, len(items), batch_size):
            x, y = _gather(datasets, items[j:j + batch_size], side, out_side)
            lp = logsoftmax(model.forward(x, grad=False), axis=1)
            total += float(cross_entropy(lp, y).data) * len(y)
            n += len(y)
    finally:
        model.train(was)
    return total / n


def train(datasets, cfg, model=None, spec=None, val_datasets=None, init="xavier",
          dtype=np.float32, lr=None, on_epoch=None):
    """Minimize voxelwise cross-entropy with Adam over sampled subvolumes.

    Pass either a ``model`` to continue from or a ``spec`` to build one.
    Returns the best-validation checkpoint, the final model, and one
    :class:`EpochRecord` per epoch.
    """
    cfg.validate()
    if model is None:
        if spec is None:
            raise ValueError("train needs a model or a spec")
        model = build_meshnet(spec, init, make_rng(cfg.seed, stream=0), dtype)
    datasets = _datasets(datasets, model.dtype)
    if not datasets:
        raise ValueError("empty dataset")
    _check_labels(datasets, model.spec.classes)
    for ds in datasets:
        if ds.image.shape[0] != model.spec.modalities:
            raise ValueError(f"model expects {model.spec.modalities} modalities, dataset has {ds.image.shape[0]}")
    val = _datasets(val_datasets, model.dtype) if val_datasets else datasets
    _check_labels(val, model.spec.classes)

    side = model.spec.subvolume_side
    out_side = model.spec.output_side(side)
    if cfg.sampler.side != side:
        cfg = replace(cfg, sampler=cfg.sampler.with_(side=side))
    rng = make_rng(cfg.seed, stream=1)
    drop_rng = make_rng(cfg.seed, stream=2)
    stream = _PatchStream(datasets, cfg, rng)
    # validation subvolumes are drawn once and reused every epoch
    val_stream = _PatchStream(val, cfg, make_rng(cfg.seed, stream=3))
    val_items = val_stream.next_batch(cfg.val_subvolumes)
    held_out = val[0]

    opt = Adam(model.parameters(), lr=cfg.lr if lr is None else lr)
    best, best_val, history = model.copy(), math.inf, []
    steps = math.ceil(cfg.subvolumes_per_epoch / cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        opt.zero_grad()
        for step in range(steps):
            x, y = _gather(datasets, stream.next_batch(cfg.batch_size), side, out_side)
            lp = logsoftmax(model.forward(x, rng=drop_rng, grad=True), axis=1)
            loss = cross_entropy(lp, y)
            losses.append(float(loss.data))
            if cfg.accumulate > 1:
                loss = loss * (1.0 / cfg.accumulate)
            loss.backward()
            if (step + 1) % cfg.accumulate == 0 or step == steps - 1:
                opt.step()
                opt.zero_grad()
        model.eval()
        val_loss = evaluate_loss(model, val, val_items, batch_size=max(cfg.batch_size, 4))
        seg = segment([held_out.image[m] for m in range(held_out.image.shape[0])], model,
                      cfg.sampler.with_(volume_dims=held_out.dims, side=side),
                      n_subvolumes=cfg.eval_subvolumes or 1, seed=cfg.seed)
        dice = metrics.macro_dice(seg.labels.data, held_out.labels, model.spec.classes)
        rec = EpochRecord(epoch, float(np.mean(losses)), val_loss, dice)
        history.append(rec)
        log.info("epoch %d train %.5f val %.5f dice %.4f", epoch, rec.train_loss, val_loss, dice)
        if val_loss < best_val:
            best_val, best = val_loss, model.copy()
        if on_epoch is not None:
            on_epoch(rec, model)
    model.eval()
    return TrainResult(best.eval(), model, history)


def finetune(model, datasets, cfg, val_datasets=None):
    """Continue training every layer of a copy of ``model`` at ``cfg.finetune_lr``."""
    return train(datasets, cfg, model=model.copy(), val_datasets=val_datasets, lr=cfg.finetune_lr)


# -- benchmark ------------------------------------------------------------------------------

@dataclass
class BenchmarkRow:
    count: int
    mean_s: float
    min_s: float
    macro_dice: float
    times: list = field(default_factory=list)


@dataclass
class BenchmarkReport:
    rows: list
    slope: float
    intercept: float
    r2: float

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("count\tmean_s\tmin_s\tmacro_dice\n")
            for r in self.rows:
                fh.write(f"{r.count}\t{r.mean_s:.6f}\t{r.min_s:.6f}\t{r.macro_dice:.6f}\n")
            fh.write(f"# fit: time = {self.slope:.6g} * count + {self.intercept:.6g}, r2 = {self.r2:.6f}\n")


def linear_fit(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def benchmark(model, inputs, counts=DEFAULT_COUNTS, repeats=1, reference=None, cfg=None,
              seed=0, reference_count=8192, batch_size=8, segment_fn=segment, clock=time.perf_counter):
    """Time ``segment`` per subvolume count and score it against ``reference``.

    Without ground truth the ``reference_count`` segmentation stands in.
    The linear fit uses the fastest repeat per count.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    if reference is None:
        reference = segment_fn(inputs, model, cfg, reference_count, seed=seed, batch_size=batch_size).labels
    ref = np.asarray(getattr(reference, "data", reference))
    rows = []
    for n in counts:
        times, seg = [], None
        for _ in range(repeats):
            t0 = clock()
            seg = segment_fn(inputs, model, cfg, n, seed=seed, batch_size=batch_size)
            times.append(clock() - t0)
        d = metrics.macro_dice(seg.labels.data, ref, model.spec.classes)
        rows.append(BenchmarkRow(n, float(np.mean(times)), float(np.min(times)), d, times))
    if len(rows) >= 2:
        slope, intercept, r2 = linear_fit([r.count for r in rows], [r.min_s for r in rows])
    else:
        slope, intercept, r2 = math.nan, math.nan, math.nan
    return BenchmarkReport(rows, slope, intercept, r2)


# -- label remapping ------------------------------------------------------------------------------

def load_label_map(path):
    """``freesurfer_id class_index region_name`` lines -> ({fs_id: class}, {class: name})."""
    to_class, names = {}, {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(None, 2)
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'freesurfer_id class_index region_name'")
            fs, cls = int(parts[0]), int(parts[1])
            to_class[fs] = cls
            names[cls] = parts[2] if len(parts) > 2 else f"class_{cls}"
    return to_class, names


def remap_labels(labels, to_class, unmapped=0):
    """Map raw label values through ``to_class``; values not listed become ``unmapped``."""
    lab = np.asarray(getattr(labels, "data", labels))
    keys = np.array(sorted(to_class), dtype=np.int64)
    vals = np.array([to_class[k] for k in keys], dtype=np.int64)
    flat = lab.astype(np.int64).ravel()
    pos = np.clip(np.searchsorted(keys, flat), 0, max(len(keys) - 1, 0))
    hit = keys[pos] == flat if len(keys) else np.zeros(flat.shape, bool)
    out = np.where(hit, vals[pos] if len(vals) else 0, unmapped).reshape(lab.shape)
    top = int(out.max()) if out.size else 0
    out = out.astype(np.uint8 if top < 256 else np.int32)
    if isinstance(labels, Volume):
        return labels.replace(out, kind="labels")
    return out

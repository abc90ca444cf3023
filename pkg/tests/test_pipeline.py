import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from meshseg.meshnet import LayerSpec, ModelSpec, build_meshnet
from meshseg.metrics import macro_dice
from meshseg.pipeline import (
    Dataset,
    EpochRecord,
    TrainConfig,
    VoteGrid,
    benchmark,
    default_sampler,
    finetune,
    inference_corners,
    linear_fit,
    load_label_map,
    _datasets,
    _PatchStream,
    evaluate_loss,
    read_log,
    remap_labels,
    segment,
    train,
    write_log,
)
from meshseg.rng import make_rng
from meshseg.sampling import SamplerConfig, coverage_count, grid_nonoverlap
from meshseg.synthetic import phantom
from meshseg.volume import Volume

SIDE = 16


def toy_spec(channels=4, classes=3, side=SIDE, **kw):
    return ModelSpec.default(modalities=1, channels=channels, classes=classes, subvolume_side=side, **kw)


def constant_model(cls=0, classes=3):
    model = build_meshnet(toy_spec(classes=classes), "xavier", make_rng(0))
    last = model.layers[-1].conv
    last.weight.data[:] = 0
    last.bias.data[:] = 0
    last.bias.data[cls] = 1.0
    return model.eval()


def tiny_cfg(dims, **kw):
    base = dict(epochs=2, subvolumes_per_epoch=6, val_subvolumes=4, lr=1e-2, finetune_lr=3e-3,
                sampler=default_sampler(dims, SIDE, std=(4, 4, 4)), seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("n", [1, 30, 64])
def test_constant_predictor_all_zero(rng, n):
    vol = Volume(rng.random((24, 24, 24)).astype(np.float32))
    seg = segment([vol], constant_model(0), n_subvolumes=n)
    assert not seg.labels.data.any()
    assert len(seg.corners) == max(n, 8)


def test_constant_predictor_other_class(rng):
    vol = Volume(rng.random((20, 20, 20)).astype(np.float32))
    assert np.all(segment([vol], constant_model(2), n_subvolumes=5).labels.data == 2)


def test_vote_totals_grid_only_256():
    spec = ModelSpec(1, 1, 2, (LayerSpec(1, 1, 0, bn=False, relu=False),), subvolume_side=38)
    model = build_meshnet(spec, "xavier", make_rng(0))
    vol = np.zeros((256, 256, 256), dtype=np.float32)
    seg = segment([vol], model, n_subvolumes=1, batch_size=49)
    totals = seg.votes.totals()
    assert len(seg.corners) == 343
    assert totals[0, 0, 0] == 1 and totals[220, 220, 220] == 8
    assert totals.min() >= 1
    assert np.array_equal(seg.votes.counts.sum(axis=0), totals)
    assert np.array_equal(totals, coverage_count((256,) * 3, grid_nonoverlap(SamplerConfig()), 38))


def test_votes_sum_to_coverage(rng):
    model = build_meshnet(toy_spec(), "xavier", make_rng(1))
    seg = segment([rng.random((30, 30, 30))], model, n_subvolumes=40, seed=3)
    assert np.array_equal(seg.votes.counts.sum(axis=0), seg.votes.coverage)
    assert np.array_equal(seg.votes.coverage, coverage_count((30,) * 3, seg.corners, SIDE))


def test_single_window_is_plain_argmax(rng):
    model = build_meshnet(toy_spec(), "xavier", make_rng(2)).eval()
    x = rng.random((SIDE,) * 3).astype(np.float32)
    seg = segment([x], model, n_subvolumes=1)
    logits = model.forward(x[None, None]).data[0]
    assert np.array_equal(seg.labels.data, logits.argmax(axis=0))
    lp = segment([x], model, n_subvolumes=1, vote="logprob")
    assert np.array_equal(lp.labels.data, logits.argmax(axis=0))


def test_tie_breaks_to_smallest_class():
    counts = np.zeros((4, 1, 1, 3), dtype=np.uint16)
    counts[[1, 3], 0, 0, 0] = 2
    counts[[2, 3], 0, 0, 1] = 5
    counts[:, 0, 0, 2] = 1
    assert VoteGrid(counts, counts.sum(axis=0)).labels().ravel().tolist() == [1, 2, 0]


def test_logprob_mode_sums_logprobs(rng):
    model = build_meshnet(toy_spec(), "xavier", make_rng(4))
    x = rng.random((24, 24, 24)).astype(np.float32)
    seg = segment([x], model, n_subvolumes=12, vote="logprob")
    assert seg.votes.counts.dtype == np.float64
    assert np.all(seg.votes.counts <= 0)
    assert np.array_equal(seg.labels.data, seg.votes.counts.argmax(axis=0))


def test_inference_corners_grid_first():
    cfg = default_sampler((40, 40, 40), SIDE)
    grid = grid_nonoverlap(cfg)
    c = inference_corners(cfg, 50)
    assert len(c) == 50 and np.array_equal(c[:len(grid)], grid)
    assert np.array_equal(inference_corners(cfg, 3), grid)


def test_executor_matches_serial(rng):
    model = build_meshnet(toy_spec(), "xavier", make_rng(5))
    x = rng.random((28, 28, 28)).astype(np.float32)
    serial = segment([x], model, n_subvolumes=40, seed=9, batch_size=3)
    with ThreadPoolExecutor(3) as pool:
        par = segment([x], model, n_subvolumes=40, seed=9, batch_size=3, executor=pool)
    assert np.array_equal(serial.votes.counts, par.votes.counts)
    assert np.array_equal(serial.labels.data, par.labels.data)


def test_segment_errors(rng):
    model = build_meshnet(toy_spec(), "xavier", make_rng(0))
    x = rng.random((20, 20, 20))
    with pytest.raises(ValueError, match="modalities"):
        segment([x, x], model)
    with pytest.raises(ValueError, match="n_subvolumes"):
        segment([x], model, n_subvolumes=0)
    with pytest.raises(ValueError, match="vote"):
        segment([x], model, vote="mean")


def test_segment_deterministic(rng):
    model = build_meshnet(toy_spec(), "xavier", make_rng(6))
    x = rng.random((26, 26, 26)).astype(np.float32)
    a = segment([x], model, n_subvolumes=30, seed=1)
    b = segment([x], model, n_subvolumes=30, seed=1)
    assert np.array_equal(a.corners, b.corners) and a.labels.data.tobytes() == b.labels.data.tobytes()


# -- training ------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError, match="finetune_lr"):
        TrainConfig(lr=1e-3, finetune_lr=1e-2).validate()
    with pytest.raises(ValueError):
        TrainConfig(subvolumes_per_epoch=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(nonoverlap_fraction=1.5).validate()
    assert TrainConfig().subvolumes_per_epoch == 30720 and TrainConfig().val_subvolumes == 27648
    assert TrainConfig().finetune_subvolumes == 7168


def test_train_errors():
    vols, lab = phantom(SIDE)
    cfg = tiny_cfg((SIDE,) * 3)
    with pytest.raises(ValueError, match="empty"):
        train([], cfg, spec=toy_spec())
    bad = Volume(lab.data * 2, kind="labels")
    with pytest.raises(ValueError, match="labels outside"):
        train([(vols, bad)], cfg, spec=toy_spec())
    with pytest.raises(ValueError, match="model or a spec"):
        train([(vols, lab)], cfg)


def test_lr_zero_is_identity():
    # a single-window volume with grid-only batches feeds the same patch every step
    vols, lab = phantom(SIDE)
    cfg = tiny_cfg((SIDE,) * 3, lr=0.0, finetune_lr=0.0, epochs=3, nonoverlap_fraction=1.0)
    model = build_meshnet(toy_spec(), "xavier", make_rng(3))
    before = [a.copy() for _, a in model.state_arrays() if "running" not in _]
    res = train([(vols, lab)], cfg, model=model.copy())
    after = [a for n, a in res.final.state_arrays() if "running" not in n]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert len({r.train_loss for r in res.history}) == 1


def test_seeded_training_bit_identical(tmp_path):
    vols, lab = phantom(20, seed=2)
    cfg = tiny_cfg((20,) * 3, seed=5)
    runs = [train([(vols, lab)], cfg, spec=toy_spec(dropout=0.2), dtype=np.float64) for _ in range(2)]
    write_log(tmp_path / "a.jsonl", runs[0].history)
    write_log(tmp_path / "b.jsonl", runs[1].history)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for (_, a), (_, b) in zip(runs[0].final.state_arrays(), runs[1].final.state_arrays()):
        assert a.dtype == np.float64 and a.tobytes() == b.tobytes()


def test_history_and_log_roundtrip(tmp_path):
    vols, lab = phantom(20)
    snapshots = []
    res = train([(vols, lab)], tiny_cfg((20,) * 3, epochs=3), spec=toy_spec(),
                on_epoch=lambda rec, m: snapshots.append(m.copy()))
    assert [r.epoch for r in res.history] == [1, 2, 3]
    path = tmp_path / "log.jsonl"
    res.write_log(path)
    assert read_log(path) == res.history
    assert all(isinstance(r, EpochRecord) for r in read_log(path))
    # the returned checkpoint is the best-validation one
    best = int(np.argmin([r.val_loss for r in res.history]))
    for (_, a), (_, b) in zip(res.model.state_arrays(), snapshots[best].state_arrays()):
        assert np.array_equal(a, b)


def test_finetune_zero_epochs_unchanged():
    vols, lab = phantom(SIDE)
    model = build_meshnet(toy_spec(), "xavier", make_rng(7))
    res = finetune(model, [(vols, lab)], tiny_cfg((SIDE,) * 3, epochs=0))
    assert res.history == []
    for (_, a), (_, b) in zip(model.state_arrays(), res.final.state_arrays()):
        assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def trained_phantom():
    vols, lab = phantom(24, seed=0)
    cfg = TrainConfig(epochs=4, subvolumes_per_epoch=50, val_subvolumes=8, lr=1e-2, finetune_lr=3e-3,
                      sampler=default_sampler((24,) * 3, SIDE, std=(6, 6, 6)), seed=0)
    res = train([(vols, lab)], cfg, spec=toy_spec(channels=8))
    return res.model, vols, lab, cfg


def test_finetune_same_data_is_stable(trained_phantom):
    model, vols, lab, cfg = trained_phantom
    cfg = replace(cfg, epochs=10, subvolumes_per_epoch=5, finetune_lr=1e-5, seed=3)
    res = finetune(model, [(vols, lab)], cfg)
    # baseline on the exact validation items the finetune run draws
    ds = _datasets([(vols, lab)], model.dtype)
    items = _PatchStream(ds, cfg, make_rng(cfg.seed, stream=3)).next_batch(cfg.val_subvolumes)
    base = evaluate_loss(model, ds, items)
    assert len(res.history) == 10
    assert max(r.val_loss for r in res.history) <= 1.05 * base


def test_finetune_transfers_to_shifted_contrast(trained_phantom):
    model, vols, lab, cfg = trained_phantom
    svols, slab = phantom(24, seed=1, intensities=(0.9, 0.5, 0.1))
    before = macro_dice(segment(svols, model, n_subvolumes=1).labels.data, slab.data, 3)
    res = finetune(model, [(svols, slab)], replace(cfg, epochs=2, seed=1))
    after = macro_dice(segment(svols, res.model, n_subvolumes=1).labels.data, slab.data, 3)
    assert after > before + 0.2


def test_finetune_does_not_touch_source(trained_phantom):
    model, vols, lab, cfg = trained_phantom
    snapshot = [a.copy() for _, a in model.state_arrays()]
    finetune(model, [(vols, lab)], replace(cfg, epochs=1, subvolumes_per_epoch=3))
    assert all(np.array_equal(a, b) for a, (_, b) in zip(snapshot, model.state_arrays()))


# -- benchmark ------------------------------------------------------------------------

class SleepyModel:
    """Wraps a model so every subvolume costs a fixed wall-clock delay."""

    def __init__(self, model, cost):
        self.inner, self.cost = model, cost
        self.spec, self.dtype = model.spec, model.dtype

    @property
    def training(self):
        return self.inner.training

    def train(self, mode=True):
        self.inner.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x, rng=None, grad=None):
        time.sleep(self.cost * len(x))
        return self.inner.forward(x, rng, grad)


def test_benchmark_stub_timing_ratio(rng):
    spec = ModelSpec(1, 1, 2, (LayerSpec(1, 1, 0, bn=False, relu=False),), subvolume_side=8)
    model = SleepyModel(build_meshnet(spec, "identity"), 1e-3)
    x = rng.random((8, 8, 8)).astype(np.float32)
    rep = benchmark(model, [x], counts=(512, 1024), reference=np.zeros((8, 8, 8), int), batch_size=64)
    ratio = rep.rows[1].min_s / rep.rows[0].min_s
    assert 1.0 <= ratio <= 4.0
    assert rep.rows[0].macro_dice == 1.0


def test_benchmark_repeats_and_report(tmp_path, rng):
    ticks = iter(range(1000))

    def clock():
        return float(next(ticks))

    model = constant_model()
    x = rng.random((SIDE,) * 3).astype(np.float32)
    rep = benchmark(model, [x], counts=(8, 16, 32), repeats=3, reference_count=16, clock=clock)
    assert [len(r.times) for r in rep.rows] == [3, 3, 3]
    assert all(r.mean_s == 1.0 and r.min_s == 1.0 for r in rep.rows)
    path = tmp_path / "bench.tsv"
    rep.write(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "count\tmean_s\tmin_s\tmacro_dice"
    assert lines[1].startswith("8\t1.000000\t1.000000\t1.000000")
    with pytest.raises(ValueError):
        benchmark(model, [x], counts=(8,), repeats=0)


def test_linear_fit():
    s, i, r2 = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert (s, i, r2) == pytest.approx((2.0, 1.0, 1.0))


# -- labels ---------------------------------------------------------------------------------

def test_label_map_and_remap(tmp_path):
    path = tmp_path / "map.txt"
    path.write_text("# fs class name\n0 0 Unknown\n2 1 Left-Cerebral-White-Matter\n41 2 Right WM\n\n")
    to_class, names = load_label_map(path)
    assert to_class == {0: 0, 2: 1, 41: 2}
    assert names[2] == "Right WM"
    raw = np.array([0, 2, 41, 17, 2]).reshape(5, 1, 1)
    assert remap_labels(raw, to_class).ravel().tolist() == [0, 1, 2, 0, 1]
    vol = remap_labels(Volume(raw, kind="labels"), to_class)
    assert isinstance(vol, Volume) and vol.data.dtype == np.uint8
    bad = tmp_path / "bad.txt"
    bad.write_text("12\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        load_label_map(bad)


def test_dataset_alignment(rng):
    a = rng.random((4, 4, 4))
    with pytest.raises(ValueError, match="aligned"):
        Dataset.from_volumes([a, rng.random((4, 4, 5))])
    with pytest.raises(ValueError, match="labels"):
        Dataset.from_volumes([a], np.zeros((4, 4, 3), int))
    assert Dataset.from_volumes([a, a]).image.shape == (2, 4, 4, 4)

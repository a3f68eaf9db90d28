"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``; the summary lines are
also collected at the end of every pytest session.
"""
import csv
import hashlib
import math
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from dstt import autodiff as ad
from dstt.cli import FORECAST_HEADER, read_forecast_csv, run_command
from dstt.data import (
    chronological_split,
    clean_missing,
    fraction_split,
    kfold_splits,
    label_records,
    make_sequences,
    parse_omni_table,
    sample_path,
    synthesize_records,
)
from dstt.data.tables import COLUMNS
from dstt.evaluate import CV_SUMMARY_HEADER, REPORT_HEADER, TEST_PROFILE, persistence_forecast, r_squared, rmse
from dstt.gradcheck import check_gradients
from dstt.layers import (
    Conv1DLayer,
    CustomAttention,
    DenseLayer,
    DenseVariationalLayer,
    DropoutLayer,
    LSTMLayer,
    MultiHeadAttentionLayer,
)
from dstt.model import AblationVariant, DsttConfig, build_model, predict_point, train
from dstt.uncertainty import DEFAULT_K, McConfig, decompose_variance, mc_predict

from helpers import sine_labeled, table_from_arrays, tiny_config

SAMPLE = str(sample_path())
RESULTS = {}


@contextmanager
def criterion(n, title):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        RESULTS[n] = (title, False, time.perf_counter() - t0)
        print(f"\ncriterion {n:2d} FAIL  {title} ({time.perf_counter() - t0:.1f}s)")
        raise
    RESULTS[n] = (title, True, time.perf_counter() - t0)
    print(f"\ncriterion {n:2d} PASS  {title} ({time.perf_counter() - t0:.1f}s)")


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# ----------------------------------------------------------------------------- 1


def _layer_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}
    x3 = ad.Parameter("x", rng.normal(size=(2, 4, 3)))
    cases = []
    conv = Conv1DLayer(3, 4, rng=rng)
    cases.append(("conv", lambda: ad.tsum(ad.square(conv.forward(x3))), conv.parameters() + [x3]))
    lstm = LSTMLayer(3, 3, rng=rng)
    cases.append(("lstm", lambda: ad.tsum(ad.square(lstm.forward(x3))), lstm.parameters() + [x3]))
    mha = MultiHeadAttentionLayer(3, 4, 2, 2, residual=True, rng=rng)
    cases.append(("mha", lambda: ad.tsum(ad.square(mha.forward(x3))), mha.parameters() + [x3]))
    att = CustomAttention(3, rng=rng)
    cases.append(("attention", lambda: ad.tsum(ad.square(att.forward(x3))), att.parameters() + [x3]))
    dvl = DenseVariationalLayer(3, 2, rho_init=-1.0, rng=rng)

    def dvl_loss():
        out, kl = dvl.forward(x3, np.random.default_rng(seed + 1))
        return ad.tsum(ad.square(out)) + kl

    cases.append(("dvl", dvl_loss, dvl.parameters() + [x3]))
    dense = DenseLayer(3, 2, activation="relu", rng=rng)
    cases.append(("dense", lambda: ad.tsum(ad.square(dense.forward(x3))), dense.parameters() + [x3]))
    drop = DropoutLayer(0.3)
    cases.append(("dropout", lambda: ad.tsum(ad.square(drop.apply(x3, np.random.default_rng(seed), True))), [x3]))
    for name, fn, params in cases:
        errs[name] = max(check_gradients(fn, params).values())
    return errs


def _model_error(seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(seed=seed, sequence_length=4, conv_filters=3, lstm_units=3, attention_width=4,
                      attention_heads=2, head_size=2, dvl_units=3, dense_head_units=3, dvl_rho_init=-2.0)
    model = build_model(cfg)
    x = rng.normal(size=(1, 4, 7))
    y = rng.normal(size=(1, 4))

    def loss():
        # the training loss stops the NLL gradient into the mean; a difference quotient cannot see
        # a stop-gradient, so the check uses a smooth function of both heads and the KL term
        mu, logvar, kl = model.forward(x, "train", np.random.default_rng(100 + seed))
        return ad.mean(ad.square(mu - y)) + ad.mean(ad.square(logvar)) + ad.mul(kl, 0.1)

    return max(check_gradients(loss, model.parameters()).values())


def test_criterion_01_gradients():
    with criterion(1, "analytic vs finite-difference gradients, every layer and the full model, 20 seeds"):
        t0 = time.perf_counter()
        worst = {}
        for seed in range(20):
            for name, e in _layer_errors(seed).items():
                worst[name] = max(worst.get(name, 0.0), e)
            worst["model"] = max(worst.get("model", 0.0), _model_error(seed))
        elapsed = time.perf_counter() - t0
        print("\nworst relative error:", {k: f"{v:.2e}" for k, v in worst.items()}, f"{elapsed:.1f}s")
        assert max(worst.values()) <= 1e-4, worst
        assert elapsed < 30, elapsed


# ----------------------------------------------------------------------------- 2


def test_criterion_02_overfit():
    with criterion(2, "FULL variant overfits a 200-record sine series"):
        data = sine_labeled(200, seed=7)
        assert len(data) == 200
        cfg = DsttConfig(**{**TEST_PROFILE, "epochs": 500, "dropout_rate": 0.0, "seed": 7})
        t0 = time.perf_counter()
        model = train(build_model(cfg), data)
        elapsed = time.perf_counter() - t0
        ratio = rmse(data.label, predict_point(model, data)) / float(np.std(data.label))
        print(f"\ntrain rmse / std = {ratio:.4f} after {len(model.history)} epochs, {elapsed:.1f}s")
        assert len(model.history) <= 500
        assert ratio < 0.05
        assert elapsed < 60


# ----------------------------------------------------------------------------- 3


def _rmse_sum(y, yhat):
    return math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(y, yhat)) / len(y))


def _r2_sum(y, yhat):
    ybar = math.fsum(y) / len(y)
    return 1 - math.fsum((a - b) ** 2 for a, b in zip(y, yhat)) / math.fsum((a - ybar) ** 2 for a in y)


def test_criterion_03_metric_oracles():
    with criterion(3, "rmse and r_squared agree with direct summation"):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            m = int(rng.integers(2, 5000))
            y = rng.normal(-25, 35, m)
            yhat = y + rng.normal(0, rng.uniform(0.5, 40), m)
            ref = _rmse_sum(y, yhat)
            assert abs(rmse(y, yhat) - ref) <= 1e-12 * max(1.0, ref)
            assert abs(r_squared(y, yhat) - _r2_sum(y, yhat)) <= 1e-12
        assert rmse([0.0, 0.0], [3.0, 4.0]) == math.sqrt(12.5)
        assert r_squared([1.0, 2.0, 3.0], [1.0, 2.0, 2.0]) == 0.5


# ----------------------------------------------------------------------------- 4


def test_criterion_04_labeling():
    with criterion(4, "labels equal Dst w hours later inside a segment, 10^4 cases"):
        rng = np.random.default_rng(99)
        t0 = time.perf_counter()
        for case in range(10_000):
            w = case % 6 + 1
            lengths = rng.integers(1, 25, size=int(rng.integers(1, 5)))
            m = int(lengths.sum())
            seg = np.repeat(np.arange(len(lengths)), lengths)
            dst = rng.normal(-20, 30, m)
            table = table_from_arrays(rng.normal(size=(m, 7)), dst)
            table.segment = seg
            lab = label_records(table, w)
            pos = ((lab.time - table.time[0]) // np.timedelta64(1, "h")).astype(int)
            assert np.array_equal(lab.label, dst[pos + w])
            assert np.all(seg[pos + w] == seg[pos])
            kept = np.bincount(lab.segment, minlength=len(lengths))
            assert np.array_equal(lengths - kept, np.minimum(lengths, w))
        elapsed = time.perf_counter() - t0
        print(f"\n10^4 cases in {elapsed:.2f}s")
        assert elapsed < 5


# ----------------------------------------------------------------------------- 5 / 6


@pytest.fixture(scope="module")
def mc_model():
    data = sine_labeled(150, seed=1)
    return train(build_model(tiny_config(epochs=3, sequence_length=64)), data), data


def test_criterion_05_decomposition(mc_model):
    with criterion(5, "total = aleatoric + epistemic; no stochasticity gives zero epistemic"):
        model, data = mc_model
        for seed in range(5):
            s = mc_predict(model, data, McConfig(K=20, seed=seed))
            d = decompose_variance(s.means, s.variances)
            assert np.max(np.abs(d.total - (d.aleatoric + d.epistemic))) <= 1e-12 * max(1.0, np.max(d.total))
            assert np.all(d.epistemic > 0)
        quiet = build_model(tiny_config(epochs=1, dropout_rate=0.0, dvl_rho_init=-40.0, learning_rate=0.0))
        train(quiet, data)
        s = mc_predict(quiet, data, McConfig(K=10, seed=0))
        d = decompose_variance(s.means, s.variances)
        print(f"\ndegenerate max epistemic {np.max(d.epistemic):.3e}")
        assert np.max(d.epistemic) < 1e-12
        assert np.max(np.abs(d.total - (d.aleatoric + d.epistemic))) <= 1e-12 * max(1.0, np.max(d.total))


def test_criterion_06_mc_protocol(mc_model):
    with criterion(6, "K defaults to 100 and the K x m grid is bit-reproducible"):
        model, data = mc_model
        assert DEFAULT_K == 100 and McConfig().K == 100
        a = mc_predict(model, data)
        b = mc_predict(model, data)
        assert a.means.shape == (100, len(data))
        assert a.means.tobytes() == b.means.tobytes() and a.variances.tobytes() == b.variances.tobytes()


# ----------------------------------------------------------------------------- 7


def test_criterion_07_ablation(tmp_path):
    with criterion(7, "ablate: 7 variants x 6 horizons x 3 seeds, FULL beats persistence"):
        data, out = tmp_path / "s5k.csv", tmp_path / "grid.csv"
        assert run_command(["synth", "--count", "5000", "--seed", "0", "--out", str(data),
                            "--log-level", "WARNING"]) == 0
        t0 = time.perf_counter()
        assert run_command(["ablate", "--data", str(data), "--profile", "test", "--horizons", "1", "2", "3", "4",
                            "5", "6", "--seeds", "0", "1", "2", "--out", str(out), "--log-level", "WARNING"]) == 0
        elapsed = time.perf_counter() - t0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        with open(f"{out}.baselines.csv") as fh:
            base = {(r["method"], int(r["w"])): float(r["rmse"]) for r in csv.DictReader(fh)}
        assert len(rows) == 126
        assert {(r["method"], r["w"], r["seed"]) for r in rows} == {
            (v.label, str(w), str(s)) for v in AblationVariant for w in range(1, 7) for s in range(3)}
        lines = []
        for w in range(1, 7):
            full = float(np.median([float(r["rmse"]) for r in rows if r["method"] == "DSTT" and r["w"] == str(w)]))
            pers = base[("persistence", w)]
            lines.append(f"w={w} FULL {full:.3f} persistence {pers:.3f}")
            assert full < pers, lines
        print("\n" + "\n".join(lines) + f"\n{elapsed:.0f}s")
        assert elapsed < 15 * 60


# ----------------------------------------------------------------------------- 8


def test_criterion_08_kl_weight():
    with criterion(8, "logged total equals mse + kl / N"):
        assert 1.0 / 102_976 == pytest.approx(9.711000621505e-06, rel=1e-12)
        data = sine_labeled(137, seed=2)
        model = train(build_model(tiny_config(epochs=4, heteroscedastic=False, sequence_length=32)), data)
        assert model.meta["kl_weight"] == 1.0 / 137 == 1.0 / len(data)
        for e in model.history:
            assert e.kl_weight == 1.0 / 137 and e.kl > 0 and e.nll == 0.0
            assert abs(e.total - (e.mse + e.kl / 137)) <= 1e-12 * max(1.0, abs(e.total))


# ----------------------------------------------------------------------------- 9


def test_criterion_09_data_pipeline():
    with criterion(9, "bundled OMNI sample parses, cleans, labels, splits and windows"):
        raw = parse_omni_table(SAMPLE)
        assert 1900 <= len(raw) <= 2100 and raw.values.shape[1] == len(COLUMNS)
        assert np.isnan(raw.values).any()
        clean, report = clean_missing(raw)
        assert not np.isnan(clean.values).any()
        assert np.all(np.diff(clean.time) > np.timedelta64(0, "h"))
        same = clean.segment[1:] == clean.segment[:-1]
        assert np.all(np.diff(clean.time)[same] == np.timedelta64(1, "h"))
        assert report.segments == len(np.unique(clean.segment))
        for w in range(1, 7):
            lab = label_records(clean, w)
            pos = np.searchsorted(clean.time, lab.time)
            assert np.array_equal(lab.label, clean.dst[np.searchsorted(clean.time, lab.time + np.timedelta64(w, "h"))])
            assert np.array_equal(lab.dst, clean.dst[pos])
            assert len(clean) - len(lab) == w * report.segments
            split = fraction_split(lab, 0.8)
            assert len(split.train) + len(split.test) == len(lab)
            assert split.train.time[-1] < split.test.time[0]
            chrono = chronological_split(lab, split.test.time[0])
            assert np.array_equal(chrono.test.time, split.test.time)
            chunks = make_sequences(lab, 256)
            assert sum(len(c.labels) for c in chunks) == len(lab)
            assert all(len(c.labels) <= 256 for c in chunks)
        dst = np.arange(1104 + 1, dtype=float)
        lab = label_records(table_from_arrays(np.zeros((1105, 7)), dst), 1)
        assert [len(c.labels) for c in make_sequences(lab, 1024)] == [1024, 80]


# ----------------------------------------------------------------------------- 10


_PEAK = """
import resource, sys
from dstt.cli import run_command
code = run_command(sys.argv[1:])
print(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)
sys.exit(code)
"""


def test_criterion_10_streaming_synth(tmp_path):
    with criterion(10, "synth --count 1200000 under 2 GB, deterministic per seed"):
        digests, peaks = [], []
        for name, seed in (("a", 5), ("b", 5), ("c", 6)):
            out = tmp_path / f"{name}.csv"
            proc = subprocess.run([sys.executable, "-c", _PEAK, "synth", "--count", "1200000", "--seed", str(seed),
                                   "--out", str(out), "--log-level", "WARNING"], capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            peaks.append(int(proc.stdout.split()[-1]) / 1024)
            with open(out) as fh:
                assert sum(1 for _ in fh) == 1_200_001
            digests.append(_sha(out))
            if name != "a":
                out.unlink()
        print(f"\npeak RSS {max(peaks):.0f} MiB")
        assert max(peaks) < 2048
        assert digests[0] == digests[1] and digests[0] != digests[2]


# ----------------------------------------------------------------------------- 11


def test_criterion_11_cross_validation(tmp_path):
    with criterion(11, "10-fold cv: contiguous partitioning folds and a mean/std summary"):
        table = clean_missing(synthesize_records(3000, seed=11))[0]
        lab = label_records(table, 1)
        folds = kfold_splits(lab, 10)
        assert len(folds) == 10
        tests = [f.test for f in folds]
        assert np.array_equal(np.concatenate([t.time for t in tests]), lab.time)
        for f in folds:
            pos = np.searchsorted(lab.time, f.test.time)
            assert np.all(np.diff(pos) == 1)
            assert np.all(np.diff(f.train.time) > np.timedelta64(0, "h"))
            assert len(f.train) + len(f.test) == len(lab)
            assert not set(f.train.time.tolist()) & set(f.test.time.tolist())
        data, out = tmp_path / "s3k.csv", tmp_path / "cv.csv"
        assert run_command(["synth", "--count", "3000", "--seed", "11", "--out", str(data), "--log-level", "WARNING"]) == 0
        assert run_command(["cv", "--data", str(data), "--profile", "test", "--k", "10", "--out", str(out),
                            "--log-level", "WARNING"]) == 0
        with open(out) as fh:
            reader = csv.DictReader(fh)
            assert tuple(reader.fieldnames) == CV_SUMMARY_HEADER
            summary = {r["method"]: r for r in reader}
        assert set(summary) == {"DSTT", "LR", "persistence"}
        with open(f"{out}.folds.csv") as fh:
            detail = list(csv.DictReader(fh))
        for method, row in summary.items():
            vals = np.array([float(r["rmse"]) for r in detail if r["method"] == method])
            assert int(row["runs"]) == 10 == len(vals)
            assert float(row["rmse_mean"]) == pytest.approx(vals.mean(), rel=1e-12)
            assert float(row["rmse_std"]) == pytest.approx(vals.std(), rel=1e-12)
            assert math.isfinite(float(row["r2_mean"])) and float(row["r2_std"]) >= 0


# ----------------------------------------------------------------------------- 12


def test_criterion_12_end_to_end_determinism(tmp_path):
    with criterion(12, "train -> predict -> evaluate twice gives byte-identical CSVs"):
        digests = []
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            ckpt, fc, rep = str(d / "m.ckpt"), str(d / "f.csv"), str(d / "r.csv")
            common = ["--data", SAMPLE, "--seed", "7", "--log-level", "WARNING"]
            assert run_command(["train", *common, "--profile", "test", "--w", "4", "--epochs", "5", "--out", ckpt]) == 0
            assert run_command(["predict", *common, "--model", ckpt, "--K", "100", "--subset", "test", "--out", fc]) == 0
            assert run_command(["evaluate", "--pred", fc, "--w", "4", "--out", rep, "--log-level", "WARNING"]) == 0
            digests.append((_sha(fc), _sha(rep), _sha(f"{ckpt}.loss.csv")))
        assert digests[0] == digests[1]
        cols = read_forecast_csv(str(tmp_path / "a" / "f.csv"))
        assert len(cols["mean"]) > 0
        with open(tmp_path / "a" / "r.csv") as fh:
            assert next(csv.reader(fh)) == list(REPORT_HEADER)
        with open(tmp_path / "a" / "f.csv") as fh:
            assert next(csv.reader(fh)) == list(FORECAST_HEADER)

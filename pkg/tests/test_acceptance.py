"""Acceptance gate: one test per criterion, at the stated tolerances.

Run with `pytest tests/test_acceptance.py -v -s` for one line per criterion.
The training-based criteria share a module fixture that executes the
desk-scale recipe twice (once for capability, once for determinism), so the
whole module stays within its runtime budgets.
"""

import io
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from _gradutils import linear_probe_check

from bpwave import datapipe, evalstats, models, pipeline, sigproc, tensorops, trainer
from bpwave.cli import main as cli_main
from test_sigproc import interior_detail_masks, sure_risk_scan_oracle


def report_line(n, text):
    print(f"\n[criterion {n:02d}] PASS: {text}")


# ------------------------------------------------------------- criterion 1

def test_criterion_01_wavelet_roundtrip_and_energy():
    rng = np.random.default_rng(20240101)
    start = time.time()
    worst_roundtrip = 0.0
    worst_energy = 0.0
    for _ in range(1000):
        x = rng.normal(size=1024)
        decomp = sigproc.dwt_decompose(x, 10)
        back = sigproc.dwt_reconstruct(decomp)
        worst_roundtrip = max(worst_roundtrip, np.max(np.abs(back - x)) / np.max(np.abs(x)))
        energy = float(x @ x)
        worst_energy = max(worst_energy, abs(decomp.energy() - energy) / energy)
    elapsed = time.time() - start
    assert worst_roundtrip < 1e-9
    assert worst_energy < 1e-9
    assert elapsed < 10.0
    report_line(1, f"1000 roundtrips, rel err {worst_roundtrip:.2e}, "
                   f"energy {worst_energy:.2e}, {elapsed:.2f}s")


# ------------------------------------------------------------- criterion 2

def test_criterion_02_filter_bank_and_polynomials():
    h = sigproc.DB8.dec_lowpass
    assert abs(float(h @ h) - 1.0) < 1e-12
    assert abs(float(h.sum()) - math.sqrt(2.0)) < 1e-12
    signs = (-1.0) ** np.arange(h.size)
    assert np.max(np.abs(sigproc.DB8.dec_highpass - signs * h[::-1])) < 1e-12

    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(10):
        degree = trial % 8
        coefs = rng.uniform(-1.0, 1.0, size=degree + 1)
        x = np.polyval(coefs, np.linspace(-1.0, 1.0, 1024))
        decomp = sigproc.dwt_decompose(x, 10)
        for band, mask in zip(decomp.details, interior_detail_masks(1024, 10, 16)):
            if mask.size:
                worst = max(worst, float(np.max(np.abs(band[mask]))))
    assert worst < 1e-6
    report_line(2, f"db8 invariants at 1e-12; interior detail residue {worst:.2e}")


# ------------------------------------------------------------- criterion 3

def test_criterion_03_sure_threshold_exhaustive():
    rng = np.random.default_rng(3)
    for _ in range(500):
        n = int(rng.integers(1, 65))
        coeffs = rng.normal(size=n) * float(rng.uniform(0.05, 10.0))
        assert sigproc.sure_threshold(coeffs) == sure_risk_scan_oracle(coeffs)
    report_line(3, "500 random vectors (lengths 1..64) match the risk-scan oracle exactly")


# ------------------------------------------------------------- criterion 4

def test_criterion_04_gradient_checks():
    start = time.time()
    rng = np.random.default_rng(4)

    conv = tensorops.Conv1d("conv", 2, 3, 3, rng)
    assert linear_probe_check(conv, rng.normal(size=(2, 2, 16))).passed(1e-4)

    up = tensorops.TransposedConv1d("up", 2, 3, 2, rng)
    assert linear_probe_check(up, rng.normal(size=(2, 2, 8))).passed(1e-4)

    pool_in = rng.permutation(np.arange(32.0) * 0.5).reshape(1, 2, 16)
    assert linear_probe_check(tensorops.MaxPool1d(), pool_in).passed(1e-4)

    bn = tensorops.BatchNorm1d("bn", 2)
    assert linear_probe_check(bn, rng.normal(size=(3, 2, 8))).passed(1e-3)

    relu_in = rng.normal(size=(1, 2, 16))
    relu_in = np.where(np.abs(relu_in) < 0.2, relu_in + 0.5, relu_in)
    assert linear_probe_check(tensorops.ReLU(), relu_in).passed(1e-4)

    pred = rng.normal(size=(2, 1, 8))
    target = pred + np.where(rng.normal(size=pred.shape) > 0, 0.5, -0.5)
    for loss in (tensorops.mae_loss, tensorops.mse_loss):
        _, grad = loss(pred, target)
        rep = tensorops.gradcheck(lambda: loss(pred, target)[0], [("pred", pred, grad)])
        assert rep.passed(1e-4)

    reports = trainer.network_gradient_report(
        width=1 / 16, input_length=64, seed=0, per_block=32, tolerance=1e-3
    )
    for name, report in reports.items():
        assert report.passed(1e-3), f"{name}:\n{report.format()}"
    elapsed = time.time() - start
    assert elapsed < 300.0
    report_line(4, f"all layer types and both 1/16-width networks pass ({elapsed:.0f}s)")


# ------------------------------------------------------------- criterion 5

def test_criterion_05_adjoint_consistency():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        c_in = int(rng.integers(1, 5))
        c_out = int(rng.integers(1, 5))
        length = int(rng.integers(2, 24))
        seed = int(rng.integers(1 << 31))

        conv = tensorops.Conv1d("c", c_in, c_out, int(rng.choice([1, 3, 5])), np.random.default_rng(seed))
        conv.bias[:] = 0.0
        x = rng.normal(size=(1, c_in, length))
        y = rng.normal(size=(1, c_out, length))
        lhs = float(np.sum(conv.forward(x) * y))
        rhs = float(np.sum(x * conv.backward(y)))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))

        up = tensorops.TransposedConv1d("u", c_in, c_out, 2, np.random.default_rng(seed + 1))
        up.bias[:] = 0.0
        y2 = rng.normal(size=(1, c_out, 2 * length))
        lhs = float(np.sum(up.forward(x) * y2))
        rhs = float(np.sum(x * up.backward(y2)))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    assert worst < 1e-9
    report_line(5, f"200 draws, worst adjoint mismatch {worst:.2e}")


# ----------------------------------------------------- criteria 6 and 7

STORE_SEED = 42
RECIPE_SEED = 5


def run_desk_scale_recipe():
    """The pinned desk-scale recipe: 16 synthetic episodes, 1/16-width
    cascade, MAE+deep supervision then MSE, Adam at 1e-3."""
    store = datapipe.synth_generate(16, seed=STORE_SEED)
    prep = pipeline.preprocess_store(store)
    x, y = trainer.episodes_to_arrays(prep)

    approx_config = trainer.TrainConfig(epochs=200, batch_size=16, seed=RECIPE_SEED)
    approx = models.build_unet1d(
        models.UNet1DConfig.scaled(1 / 16, input_length=1024), seed=RECIPE_SEED
    )
    approx_result = trainer.train_network(approx, prep, None, approx_config, which="approx")

    approx_pred = trainer.predict_batched(approx, x)
    mse_in = tensorops.mse_loss(approx_pred, y)[0]

    refine_config = replace(approx_config, epochs=600)
    refine = models.build_multiresunet1d(
        models.MultiResUNet1DConfig.scaled(1 / 16, input_length=1024), seed=RECIPE_SEED
    )
    refine_result = trainer.train_network(
        refine, prep, None, refine_config, which="refine", approx_network=approx
    )
    refined = trainer.predict_batched(refine, approx_pred)
    mse_out = tensorops.mse_loss(refined, y)[0]

    def checkpoint_bytes(network):
        buf = io.BytesIO()
        import tempfile, os

        with tempfile.NamedTemporaryFile(delete=False) as fh:
            path = fh.name
        try:
            tensorops.write_checkpoint(path, network.checkpoint_entries())
            with open(path, "rb") as fh:
                buf.write(fh.read())
        finally:
            os.unlink(path)
        return buf.getvalue()

    return {
        "approx_history": [(h.epoch, h.train_loss) for h in approx_result.history],
        "refine_history": [(h.epoch, h.train_loss) for h in refine_result.history],
        "mse_in": mse_in,
        "mse_out": mse_out,
        "approx_ckpt": checkpoint_bytes(approx),
        "refine_ckpt": checkpoint_bytes(refine),
    }


@pytest.fixture(scope="module")
def desk_scale_runs():
    first_start = time.time()
    first = run_desk_scale_recipe()
    first["seconds"] = time.time() - first_start
    second = run_desk_scale_recipe()
    return first, second


def test_criterion_06_overfit_capability(desk_scale_runs):
    run, _ = desk_scale_runs
    epoch1 = run["approx_history"][0][1]
    final = run["approx_history"][-1][1]
    ratio = final / epoch1
    assert ratio <= 0.15, f"approx train MAE ratio {ratio:.3f}"
    reduction = run["mse_out"] / run["mse_in"]
    assert reduction <= 0.8, f"refinement MSE ratio {reduction:.3f}"
    assert run["seconds"] < 15 * 60.0
    report_line(
        6,
        f"approx MAE {epoch1:.1f} -> {final:.1f} (ratio {ratio:.3f}); refinement MSE "
        f"{run['mse_in']:.1f} -> {run['mse_out']:.1f} (x{reduction:.3f}); {run['seconds']:.0f}s",
    )


def test_criterion_07_determinism(desk_scale_runs):
    first, second = desk_scale_runs
    assert first["approx_history"] == second["approx_history"]
    assert first["refine_history"] == second["refine_history"]
    assert first["approx_ckpt"] == second["approx_ckpt"]
    assert first["refine_ckpt"] == second["refine_ckpt"]
    report_line(7, "repeated recipe: bitwise-identical histories and checkpoints")


# ------------------------------------------------------------- criterion 8

def test_criterion_08_metric_oracles():
    table2 = {
        "dbp": ((82.836, 92.157, 95.734), "A"),
        "map": ((87.381, 95.169, 97.733), "A"),
        "sbp": ((70.814, 85.301, 90.921), "B"),
    }
    for percentages, grade in table2.values():
        assert evalstats.bhs_grade_from_percentages(percentages) == grade

    def series_with(mean, std):
        return np.array([mean - std, mean + std])

    assert evalstats.aami_check_quantity(series_with(1.619, 6.859), 942).passed
    assert evalstats.aami_check_quantity(series_with(0.631, 4.962), 942).passed
    sbp = evalstats.aami_check_quantity(series_with(-1.582, 10.688), 942)
    assert not sbp.passed and sbp.std > 8.0

    agreement = evalstats.bland_altman(series_with(0.631, 4.962), np.zeros(2))
    assert abs(agreement.limits[0] - (-9.095)) < 0.01
    assert abs(agreement.limits[1] - 10.357) < 0.01
    report_line(8, "published BHS grades, AAMI verdicts and agreement limits reproduced")


# ------------------------------------------------------------- criterion 9

def test_criterion_09_hypertension_boundary_grid():
    dbp_expect = {80.0: "Normotension", 85.0: "Prehypertension", 95.0: "Hypertension"}
    sbp_expect = {120.0: "Normotension", 130.0: "Prehypertension", 150.0: "Hypertension"}
    checked = 0
    for dbp, want_dbp in dbp_expect.items():
        for sbp, want_sbp in sbp_expect.items():
            got_dbp, got_sbp = evalstats.classify_hypertension(sbp, dbp)
            assert (got_dbp, got_sbp) == (want_dbp, want_sbp)
            checked += 1
    assert checked == 9
    report_line(9, "all 9 boundary combinations map to the published ranges")


# ------------------------------------------------------------ criterion 10

def shared_window_record(index):
    # share the sample arrays across records: only identity and count matter
    if not hasattr(shared_window_record, "_arrays"):
        shared_window_record._arrays = (np.zeros(1024), np.full(1024, 100.0))
    ppg, abp = shared_window_record._arrays
    return datapipe.EpisodeRecord(ppg, abp, f"e{index:06d}")


def test_criterion_10_data_plumbing(tmp_path):
    small = datapipe.EpisodeStore([shared_window_record(i) for i in range(100)])
    assert len(datapipe.bin_and_subsample(small, seed=1)) == 25
    big = datapipe.EpisodeStore([shared_window_record(i) for i in range(20000)])
    assert len(datapipe.bin_and_subsample(big, seed=1)) == 2500

    full = datapipe.EpisodeStore([shared_window_record(i) for i in range(127260)])
    train, test = datapipe.split_train_test(full, 100000, seed=7)
    assert len(train) == 100000 and len(test) == 27260
    train_ids = {r.subject_id for r in train}
    test_ids = {r.subject_id for r in test}
    assert len(train_ids) == 100000 and train_ids.isdisjoint(test_ids)
    assert len(train_ids | test_ids) == 127260

    store = datapipe.synth_generate(50, seed=3)
    p1, p2 = tmp_path / "one.p2a", tmp_path / "two.p2a"
    datapipe.write_store(p1, store)
    datapipe.write_store(p2, datapipe.read_store(p1))
    assert p1.read_bytes() == p2.read_bytes()
    report_line(10, "25%/2500 bin rule, 100000/27260 split, bitwise store roundtrip")


# ------------------------------------------------------------ criterion 11

def test_criterion_11_end_to_end_cli_smoke(tmp_path):
    start = time.time()
    raw = tmp_path / "raw.p2a"
    prep = tmp_path / "prep.p2a"
    bundle = tmp_path / "bundle"
    preds = tmp_path / "preds.csv"
    report = tmp_path / "report.json"

    assert cli_main(["synth", "--n", "24", "--seed", "7", "--out", str(raw)]) == 0
    assert cli_main(["preprocess", "--in", str(raw), "--out", str(prep)]) == 0
    assert (
        cli_main(
            [
                "train", "--data", str(prep), "--out", str(bundle),
                "--width", "0.0625", "--epochs", "5", "--batch-size", "8",
                "--seed", "3", "--val-fraction", "0.25",
            ]
        )
        == 0
    )
    assert cli_main(["infer", "--bundle", str(bundle), "--data", str(raw), "--out", str(preds)]) == 0
    assert cli_main(["evaluate", "--pred", str(preds), "--out", str(report)]) == 0

    import json

    parsed = json.loads(report.read_text())
    assert parsed["episodes"] == 24
    for quantity in ("dbp", "map", "sbp"):
        assert parsed[quantity]["bhs"]["grade"] in "ABCD"
        assert isinstance(parsed[quantity]["aami"]["passed"], bool)
        assert len(parsed[quantity]["agreement"]["limits"]) == 2
    elapsed = time.time() - start
    assert elapsed < 20 * 60.0
    report_line(11, f"synth -> preprocess -> train -> infer -> evaluate in {elapsed:.0f}s")

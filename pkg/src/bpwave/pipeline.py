"""End-to-end inference: preprocess PPG, approximate, refine, extract BP."""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import datapipe, models, sigproc, tensorops, trainer

BUNDLE_VERSION = 1
BUNDLE_META = "meta.json"
BUNDLE_APPROX = "approx.ckpt"
BUNDLE_REFINE = "refine.ckpt"


@dataclass(frozen=True)
class BPValues:
    sbp: float
    dbp: float
    map: float


def extract_bp(abp):
    """SBP/DBP/MAP as the max/min/mean of the pressure window."""
    abp = np.asarray(abp, dtype=np.float64)
    if abp.size == 0:
        raise ValueError("cannot extract blood pressure from an empty signal")
    sbp = float(abp.max())
    dbp = float(abp.min())
    # rounding in the mean can stray one ulp outside [min, max]; the
    # ordering dbp <= map <= sbp is a declared invariant, so pin it
    mean = min(max(float(abp.mean()), dbp), sbp)
    return BPValues(sbp=sbp, dbp=dbp, map=mean)


def waveform_mae(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"waveform shapes differ: {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def preprocess_ppg(ppg):
    """The training-time input conditioning: wavelet denoise, then center."""
    return sigproc.mean_normalize(sigproc.denoise(ppg))


def preprocess_store(store):
    """Apply the PPG conditioning across a store; ABP passes through."""
    records = [
        datapipe.EpisodeRecord(preprocess_ppg(rec.ppg), rec.abp.copy(), rec.subject_id)
        for rec in store
    ]
    return datapipe.EpisodeStore(records, fs=store.fs, version=store.version)


@dataclass
class PipelineBundle:
    approx_network: object
    refine_network: object
    fs: float = 125.0
    version: int = BUNDLE_VERSION
    preprocess: bool = True

    def input_length(self):
        return self.approx_network.config.input_length


def save_bundle(bundle, directory):
    os.makedirs(directory, exist_ok=True)
    meta = {
        "format_version": bundle.version,
        "fs": bundle.fs,
        "preprocess": bundle.preprocess,
        "approx": {
            "filters_per_level": list(bundle.approx_network.config.filters_per_level),
            "input_length": bundle.approx_network.config.input_length,
        },
        "refine": {
            "base_widths": list(bundle.refine_network.config.base_widths),
            "input_length": bundle.refine_network.config.input_length,
        },
    }
    with open(os.path.join(directory, BUNDLE_META), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    trainer.save_checkpoint(bundle.approx_network, os.path.join(directory, BUNDLE_APPROX))
    trainer.save_checkpoint(bundle.refine_network, os.path.join(directory, BUNDLE_REFINE))


def load_bundle(directory):
    with open(os.path.join(directory, BUNDLE_META)) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {meta.get('format_version')}")
    approx = models.build_unet1d(
        models.UNet1DConfig(
            filters_per_level=tuple(meta["approx"]["filters_per_level"]),
            input_length=meta["approx"]["input_length"],
        )
    )
    refine = models.build_multiresunet1d(
        models.MultiResUNet1DConfig(
            base_widths=tuple(meta["refine"]["base_widths"]),
            input_length=meta["refine"]["input_length"],
        )
    )
    trainer.load_checkpoint(approx, os.path.join(directory, BUNDLE_APPROX))
    trainer.load_checkpoint(refine, os.path.join(directory, BUNDLE_REFINE))
    return PipelineBundle(
        approx_network=approx,
        refine_network=refine,
        fs=meta["fs"],
        version=meta["format_version"],
        preprocess=meta.get("preprocess", True),
    )


def predict_waveform(bundle, ppg):
    """Predict the pressure waveform for one PPG window (mmHg)."""
    ppg = np.asarray(ppg, dtype=np.float64)
    length = bundle.input_length()
    if ppg.shape != (length,):
        raise ValueError(f"expected a 1-D window of {length} samples, got shape {ppg.shape}")
    if not np.all(np.isfinite(ppg)):
        raise ValueError("input contains non-finite samples")
    x = preprocess_ppg(ppg) if bundle.preprocess else ppg
    rough = bundle.approx_network.forward(x[None, None, :], mode="infer").final
    refined = bundle.refine_network.forward(rough, mode="infer").final
    return refined[0, 0]


@dataclass
class PredictionRow:
    index: int
    subject_id: str
    true_bp: BPValues
    pred_bp: BPValues
    waveform_mae: float
    sqi: float
    pred_abp: np.ndarray


def batch_predict(bundle, store):
    """Run the pipeline over a store; failing episodes are skipped, not fatal.

    Returns (rows, failures) where failures is a list of (index, message).
    """
    rows = []
    failures = []
    for i, rec in enumerate(store):
        try:
            pred = predict_waveform(bundle, rec.ppg)
            rows.append(
                PredictionRow(
                    index=i,
                    subject_id=rec.subject_id,
                    true_bp=extract_bp(rec.abp),
                    pred_bp=extract_bp(pred),
                    waveform_mae=waveform_mae(pred, rec.abp),
                    sqi=sigproc.skewness_sqi(rec.ppg),
                    pred_abp=pred,
                )
            )
        except (ValueError, tensorops.ShapeError, tensorops.NumericalError) as exc:
            failures.append((i, str(exc)))
    return rows, failures


PREDICTION_COLUMNS = [
    "episode_index",
    "subject_id",
    "sbp_true",
    "dbp_true",
    "map_true",
    "sbp_pred",
    "dbp_pred",
    "map_pred",
    "waveform_mae",
    "sqi",
]


def write_predictions_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.index,
                    row.subject_id,
                    repr(row.true_bp.sbp),
                    repr(row.true_bp.dbp),
                    repr(row.true_bp.map),
                    repr(row.pred_bp.sbp),
                    repr(row.pred_bp.dbp),
                    repr(row.pred_bp.map),
                    repr(row.waveform_mae),
                    repr(row.sqi),
                ]
            )


def write_waveform_csv(path, truth, pred):
    """Paired-column dump of one episode's true and predicted waveforms."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["abp_true", "abp_pred"])
        for t, p in zip(truth, pred):
            writer.writerow([repr(float(t)), repr(float(p))])

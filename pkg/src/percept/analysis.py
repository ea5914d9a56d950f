"""Correlation study and denoiser evaluation over scene manifests.

analyze() scores a directory of already-enhanced WAVs against the
anechoic targets with negated losses plus the signal metrics, reduces
left/right to the better ear, and emits the full Pearson matrix with
per-pair scatter data.  Losses enter negated so every column is
higher-is-better and positive correlations are the expected sign.

evaluate() runs a left-ear and right-ear denoiser over a manifest split,
writes the enhanced WAVs (``<scene_id>_l.wav`` / ``<scene_id>_r.wav``),
and reports absolute and delta metrics versus the unprocessed reference
channels.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from percept.audio import AudioBuffer, read_wav, write_wav
from percept.losses import SnrLossParams, feature_loss, snr_loss
from percept.metrics import (MetricError, MetricReport, better_ear, fw_seg_snr,
                             pearson, si_snr, stoi)
from percept.scenes import load_manifest, mix_scene


class AnalysisError(Exception):
    pass


SCORE_NAMES = ("neg_feature_loss", "neg_snr_loss", "si_snr", "stoi", "fw_seg_snr")
METRIC_FUNCS = {"si_snr": lambda s, s_hat, sample_rate_hz: si_snr(s, s_hat),
                "stoi": stoi, "fw_seg_snr": fw_seg_snr}


@dataclass
class AnalysisRecord:
    sample_id: str
    ear_l: dict
    ear_r: dict
    better: dict = field(default_factory=dict)
    label: Optional[float] = None

    def __post_init__(self):
        if self.label is not None and not 0.0 <= self.label <= 1.0:
            raise AnalysisError(f"{self.sample_id}: label {self.label} outside [0, 1]")
        if not self.better:
            # every column is oriented higher-is-better (losses are negated)
            self.better = {k: better_ear(self.ear_l[k], self.ear_r[k], "higher_better")
                           for k in self.ear_l}


@dataclass
class CorrelationReport:
    score_names: list
    r: np.ndarray
    n_samples: int
    records: list
    undefined_pairs: list

    def matrix_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["score"] + self.score_names)
        for i, name in enumerate(self.score_names):
            w.writerow([name] + [repr(float(v)) for v in self.r[i]])
        return buf.getvalue()

    def to_json(self) -> str:
        r_rows = [[None if math.isnan(v) else float(v) for v in row] for row in self.r]
        samples = []
        for rec in self.records:
            row = {"sample_id": rec.sample_id, **rec.better}
            if rec.label is not None:
                row["label"] = rec.label
            samples.append(row)
        doc = {"n_samples": self.n_samples, "score_names": self.score_names,
               "r": r_rows, "undefined_pairs": [list(p) for p in self.undefined_pairs],
               "samples": samples}
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "correlation_matrix.csv"), "w") as fh:
            fh.write(self.matrix_csv())
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(self.to_json())
        cols = _columns(self.records, self.score_names)
        for i, a in enumerate(self.score_names):
            for j in range(i + 1, len(self.score_names)):
                b = self.score_names[j]
                with open(os.path.join(out_dir, f"scatter_{a}_{b}.csv"), "w") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow([a, b])
                    for x, y in zip(cols[a], cols[b]):
                        w.writerow([repr(float(x)), repr(float(y))])


def _read_enhanced(enhanced_dir, scene_id, ear, rate, n) -> np.ndarray:
    path = os.path.join(enhanced_dir, f"{scene_id}_{ear}.wav")
    if not os.path.exists(path):
        raise AnalysisError(f"missing enhanced file {path}")
    buf = read_wav(path)
    if buf.sample_rate_hz != rate:
        raise AnalysisError(f"{path}: rate {buf.sample_rate_hz}, scene uses {rate}")
    if buf.n_frames != n:
        raise AnalysisError(f"{path}: {buf.n_frames} samples, scene has {n}")
    return buf.samples[0].astype(np.float64)


def _ear_scores(target: np.ndarray, est: np.ndarray, rate: int, encoder,
                loss_params) -> dict:
    return {
        "neg_feature_loss": -feature_loss(target, est, encoder,
                                          sample_rate_hz=rate, want_grad=False).value,
        "neg_snr_loss": -snr_loss(target, est, loss_params, want_grad=False).value,
        "si_snr": si_snr(target, est),
        "stoi": stoi(target, est, rate),
        "fw_seg_snr": fw_seg_snr(target, est, rate),
    }


def _columns(records, names) -> dict:
    cols = {}
    for name in names:
        if name == "label":
            cols[name] = np.array([r.label for r in records], dtype=np.float64)
        else:
            cols[name] = np.array([r.better[name] for r in records], dtype=np.float64)
    return cols


def _pearson_matrix(cols, names):
    k = len(names)
    r = np.eye(k)
    undefined = []
    for i in range(k):
        for j in range(i + 1, k):
            try:
                v = pearson(cols[names[i]], cols[names[j]])
            except MetricError:
                v = float("nan")
                undefined.append((names[i], names[j]))
            r[i, j] = r[j, i] = v
    return r, undefined


def analyze(manifest_path, enhanced_dir, encoder, loss_params=None,
            out_dir=None, workers: int = 1) -> CorrelationReport:
    """Score enhanced outputs against each scene's anechoic ear targets and
    correlate every score pair (plus the label column when every scene has
    one).  Rows are processed in sample_id order, so the matrix does not
    depend on manifest ordering."""
    scenes, base = load_manifest(manifest_path)
    if len(scenes) < 2:
        raise AnalysisError(f"need at least 2 scenes to correlate, got {len(scenes)}")
    loss_params = loss_params or SnrLossParams()

    def score(scene) -> AnalysisRecord:
        sa = mix_scene(scene, base)
        rate = scene.sample_rate_hz
        tl = sa.target_l.samples[0].astype(np.float64)
        tr = sa.target_r.samples[0].astype(np.float64)
        el = _read_enhanced(enhanced_dir, scene.scene_id, "l", rate, len(tl))
        er = _read_enhanced(enhanced_dir, scene.scene_id, "r", rate, len(tr))
        return AnalysisRecord(sample_id=scene.scene_id,
                              ear_l=_ear_scores(tl, el, rate, encoder, loss_params),
                              ear_r=_ear_scores(tr, er, rate, encoder, loss_params),
                              label=scene.label)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(score, scenes))
    else:
        records = [score(s) for s in scenes]
    records.sort(key=lambda r: r.sample_id)

    names = list(SCORE_NAMES)
    if all(r.label is not None for r in records):
        names = ["label"] + names
    cols = _columns(records, names)
    r, undefined = _pearson_matrix(cols, names)
    report = CorrelationReport(score_names=names, r=r, n_samples=len(records),
                               records=records, undefined_pairs=undefined)
    if out_dir is not None:
        report.save(out_dir)
    return report


def evaluate(manifest_path, model_l, model_r, metric_names=("si_snr", "stoi", "fw_seg_snr"),
             out_dir=None, split: Optional[str] = "test",
             workers: int = 1) -> MetricReport:
    """Run both ear models over a manifest split.  Per metric m the report
    carries m_l / m_r / better-ear m, and delta_m* improvements over the
    matching unprocessed reference channel.  Enhanced WAVs land in
    ``<out_dir>/enhanced/<scene_id>_<l|r>.wav``."""
    for name in metric_names:
        if name not in METRIC_FUNCS:
            raise AnalysisError(f"unknown metric {name!r}; choose from {sorted(METRIC_FUNCS)}")
    scenes, base = load_manifest(manifest_path)
    if split is not None:
        scenes = [s for s in scenes if s.split == split]
    if not scenes:
        raise AnalysisError(f"no scenes in split {split!r}")
    for model, ear in ((model_l, "l"), (model_r, "r")):
        mics = model.config.n_mics
        if any(s.mic_count != mics for s in scenes):
            bad = next(s for s in scenes if s.mic_count != mics)
            raise AnalysisError(
                f"model for ear {ear} expects {mics} mics, scene {bad.scene_id} "
                f"has {bad.mic_count}")

    enh_dir = None
    if out_dir is not None:
        enh_dir = os.path.join(out_dir, "enhanced")
        os.makedirs(enh_dir, exist_ok=True)

    def score(scene):
        sa = mix_scene(scene, base)
        rate = scene.sample_rate_hz
        est_l = model_l.forward(sa.mixture).samples[0].astype(np.float64)
        est_r = model_r.forward(sa.mixture).samples[0].astype(np.float64)
        if enh_dir is not None:
            for ear, est in (("l", est_l), ("r", est_r)):
                write_wav(AudioBuffer(est[None].astype(np.float32), rate),
                          os.path.join(enh_dir, f"{scene.scene_id}_{ear}.wav"),
                          encoding="float32")
        tl = sa.target_l.samples[0].astype(np.float64)
        tr = sa.target_r.samples[0].astype(np.float64)
        mix_l = sa.mixture.samples[0].astype(np.float64)
        mix_r = sa.mixture.samples[1 if sa.mixture.n_channels > 1 else 0].astype(np.float64)
        row = {}
        for name in metric_names:
            fn = METRIC_FUNCS[name]
            vl = fn(tl, est_l, sample_rate_hz=rate)
            vr = fn(tr, est_r, sample_rate_hz=rate)
            dl = vl - fn(tl, mix_l, sample_rate_hz=rate)
            dr = vr - fn(tr, mix_r, sample_rate_hz=rate)
            row[f"{name}_l"], row[f"{name}_r"] = vl, vr
            row[name] = better_ear(vl, vr, "higher_better")
            row[f"delta_{name}_l"], row[f"delta_{name}_r"] = dl, dr
            row[f"delta_{name}"] = better_ear(dl, dr, "higher_better")
        return scene.scene_id, row

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score, scenes))
    else:
        results = [score(s) for s in scenes]

    report = MetricReport()
    for sid, row in results:
        report.add(sid, row)
    report.finalize()
    if out_dir is not None:
        report.save(json_path=os.path.join(out_dir, "report.json"),
                    csv_path=os.path.join(out_dir, "metrics.csv"))
    return report

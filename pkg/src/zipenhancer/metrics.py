"""Objective quality metrics: SI-SDR and segmental SNR."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import dsp

SISDR_CAP_DB = 100.0


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB, reported within +-100 dB.

    No mean removal is applied, so a DC offset changes the value.
    """
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape[0]} vs {ref.shape[0]}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("si_sdr: reference is all zeros")
    target = (np.dot(est, ref) / ref_energy) * ref
    residual = est - target
    num, den = np.dot(target, target), np.dot(residual, residual)
    if den == 0:
        return SISDR_CAP_DB
    if num == 0:
        return -SISDR_CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -SISDR_CAP_DB, SISDR_CAP_DB))


def ssnr(est, ref, frame: int = 256, hop: int = 128, floor: float = -10.0, ceil: float = 35.0,
         silence_db: float = -40.0) -> float:
    """Mean per-frame SNR, each clipped to [floor, ceil].

    Frames whose reference energy is more than ``silence_db`` below the most
    energetic frame are skipped.
    """
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape[0]} vs {ref.shape[0]}")
    if ref.shape[0] < frame:
        raise ValueError(f"signals shorter than one frame ({frame} samples)")
    ref_f = np.lib.stride_tricks.sliding_window_view(ref, frame)[::hop]
    err_f = np.lib.stride_tricks.sliding_window_view(ref - est, frame)[::hop]
    sig_e = np.sum(ref_f ** 2, axis=1)
    err_e = np.sum(err_f ** 2, axis=1)
    peak = sig_e.max()
    active = sig_e > peak * 10.0 ** (silence_db / 10.0) if peak > 0 else np.zeros_like(sig_e, bool)
    if not active.any():
        raise ValueError("ssnr: no active frames in reference")
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(sig_e[active] / err_e[active])
    return float(np.mean(np.clip(snr, floor, ceil)))


def evaluate_dirs(ref_dir, est_dir, out_csv=None) -> list[dict]:
    """Per-file and mean SI-SDR / SSNR for WAV files matched by name."""
    ref_dir, est_dir = Path(ref_dir), Path(est_dir)
    refs = sorted(p.name for p in ref_dir.glob("*.wav"))
    ests = {p.name for p in est_dir.glob("*.wav")}
    if not refs:
        raise FileNotFoundError(f"no WAV files in {ref_dir}")
    missing = [n for n in refs if n not in ests]
    if missing:
        raise FileNotFoundError(f"missing estimates for: {', '.join(missing)}")
    rows = []
    for name in refs:
        ref = dsp.read_wav(ref_dir / name).samples
        est = dsp.read_wav(est_dir / name).samples
        n = min(len(ref), len(est))
        rows.append({"file": name, "si_sdr_db": si_sdr(est[:n], ref[:n]), "ssnr_db": ssnr(est[:n], ref[:n])})
    rows.append({"file": "MEAN",
                 "si_sdr_db": float(np.mean([r["si_sdr_db"] for r in rows])),
                 "ssnr_db": float(np.mean([r["ssnr_db"] for r in rows]))})
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["file", "si_sdr_db", "ssnr_db"])
            w.writeheader()
            for r in rows:
                w.writerow({"file": r["file"], "si_sdr_db": f"{r['si_sdr_db']:.4f}",
                            "ssnr_db": f"{r['ssnr_db']:.4f}"})
    return rows

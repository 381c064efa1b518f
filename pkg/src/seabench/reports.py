"""CSV report emitters (UTF-8, header row, '.' decimal separator)."""

from __future__ import annotations

import csv
from pathlib import Path


def _write(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])


def _fmt(x, nd=4):
    return None if x is None else f"{x:.{nd}f}"


def write_accuracy_by_category(path, rows) -> None:
    """rows: (model, acc_all, acc_uncertain, acc_certain)."""
    _write(path, ["model", "all", "uncertain", "certain"],
           [(m, _fmt(a, 2), _fmt(u, 2), _fmt(c, 2)) for m, a, u, c in rows])


def write_prediction_types(path, rows) -> None:
    """rows: (model, certain_pct, uncertain_pct)."""
    _write(path, ["model", "certain_pct", "uncertain_pct"],
           [(m, _fmt(c, 2), _fmt(u, 2)) for m, c, u in rows])


def write_substitute_performance(path, rows) -> None:
    """rows: (model, msb_recovered_pct, accuracy, fidelity, aua)."""
    _write(path, ["model", "msb_recovered_pct", "accuracy", "fidelity", "aua"],
           [(m, _fmt(p, 2), _fmt(a, 2), _fmt(f, 2), _fmt(x, 2)) for m, p, a, f, x in rows])


def write_layer_recovery(path, report) -> None:
    """Per-layer recovery table from a RecoveryReport."""
    header = ["layer", "kind", "params", "msb_known_pct"] + [
        f"bit{i}_known_pct" for i in range(8)
    ] + ["lsbl_slots", "lsbl_error_pct"]
    rows = []
    for lr in report.layers:
        rows.append([lr.layer_index, lr.kind, lr.n_params, _fmt(lr.msb_known_pct, 2)]
                    + [_fmt(p, 2) for p in lr.bit_known_pct]
                    + [lr.lsbl_slots, _fmt(lr.lsbl_error_pct, 3)])
    rows.append(["total", "", sum(lr.n_params for lr in report.layers),
                 _fmt(report.msb_known_pct, 2)]
                + [_fmt(p, 2) for p in report.bit_known_pct]
                + [report.lsbl_slots, _fmt(report.lsbl_error_pct, 3)])
    _write(path, header, rows)


def write_expectation_impact(path, rows) -> None:
    """rows: (n_inferences, delta_mean, delta_std)."""
    _write(path, ["n_inferences", "delta_y", "delta_y_std"],
           [(n, _fmt(d, 3), _fmt(s, 3)) for n, d, s in rows])


def write_recovery_curve(path, points) -> None:
    """points: (inputs_consumed, sea_bits_cum, msb_known_pct, bits_known_pct)."""
    _write(path, ["inputs", "sea_bits", "msb_known_pct", "bits_known_pct"],
           [(i, b, _fmt(m, 3), _fmt(t, 3)) for i, b, m, t in points])


def write_training_curve(path, history) -> None:
    _write(path, ["epoch", "loss", "seconds"],
           [(h.epoch, _fmt(h.loss, 6), _fmt(h.seconds, 2)) for h in history])


def write_defense_probe_report(path, rows) -> None:
    """rows: (label, probe_n, tau, probes, marks, wrong, fp_rate)."""
    _write(path, ["mode", "probe_n", "tau", "probes", "marks", "wrong_marks", "fp_rate"],
           [(m, n, _fmt(t, 2), p, k, w, _fmt(r, 4)) for m, n, t, p, k, w, r in rows])

"""Report tables, sweep series, and figure files."""

from __future__ import annotations

import csv
import json
import math

import pytest

import adaptkt.adapt as ad
import adaptkt.report as rp
from adaptkt.errors import UsageError


def sample_results():
    return [
        rp.ResultRow("dkt", 0, "synth-a", 0.71, 0.80),
        rp.ResultRow("akt-tx-tr", 100, "synth-a", 0.74, 0.82),
        rp.ResultRow("dkt", 0, "synth-b", 0.68, 0.77),
        rp.ResultRow("akt-tx-tr", 100, "synth-b", 0.73, 0.81),
    ]


def test_results_csv_layout(tmp_path):
    path = tmp_path / "results.csv"
    rp.write_results_csv(path, sample_results())
    rows = rp.read_rows(path)
    assert list(rows[0]) == list(rp.RESULT_COLUMNS)
    assert rows[0]["model"] == "dkt"
    assert rows[1]["s_dim"] == "100"
    assert float(rows[1]["auc"]) == pytest.approx(0.74)
    assert len(rows) == 4


def test_transfer_csv_layout(tmp_path):
    path = tmp_path / "transfer_auc.csv"
    rp.write_transfer_csv(path, [
        rp.TransferRow("akt", 256, "synth-a->synth-b", 0.70),
        rp.TransferRow("akt-tr", 256, "synth-a->synth-b", 0.62),
    ])
    rows = rp.read_rows(path)
    assert list(rows[0]) == list(rp.TRANSFER_COLUMNS)
    assert rows[0]["task"] == "synth-a->synth-b"
    assert float(rows[1]["metric"]) == pytest.approx(0.62)


def test_sweep_csv_has_one_row_per_value(tmp_path):
    path = tmp_path / "sweep_lam.csv"
    points = [rp.SweepPoint(x, 0.6 + 0.01 * i)
              for i, x in enumerate((0.0, 0.25, 0.5, 0.75, 1.0))]
    rp.write_sweep_csv(path, "lam", points)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["lam", "auc"]
    assert len(rows) == 6
    assert [float(r[0]) for r in rows[1:]] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_json_mirror_carries_fingerprint(tmp_path):
    path = tmp_path / "results.json"
    rp.write_json(path, "abc123", sample_results())
    doc = json.loads(path.read_text())
    assert doc["fingerprint"] == "abc123"
    assert len(doc["rows"]) == 4
    assert doc["rows"][0]["model"] == "dkt"
    assert doc["rows"][0]["auc"] == pytest.approx(0.71)


def test_nan_cells_are_empty_strings(tmp_path):
    path = tmp_path / "t.csv"
    rp.write_transfer_csv(path, [rp.TransferRow("akt", 256, "t", math.nan)])
    rows = rp.read_rows(path)
    assert rows[0]["metric"] == ""


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def png_bytes(path) -> bytes:
    data = path.read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    return data


def test_plot_sweep_writes_png(tmp_path):
    path = tmp_path / "sweep.png"
    rp.plot_sweep(path, "lam", [rp.SweepPoint(0.0, 0.5), rp.SweepPoint(0.5, 0.7),
                                rp.SweepPoint(1.0, 0.65)])
    assert len(png_bytes(path)) > 1000


def test_plot_history_writes_png(tmp_path):
    history = [
        ad.AdaptEpoch(0, 0.69, 0.20, 8, 1e-3, 0.5),
        ad.AdaptEpoch(1, 0.60, 0.15, 8, 1e-3, 0.5),
        ad.AdaptEpoch(2, 0.55, math.nan, 8, 1e-3, 0.5),
    ]
    path = tmp_path / "history.png"
    rp.plot_history(path, history)
    assert len(png_bytes(path)) > 1000


def test_plot_comparison_writes_png(tmp_path):
    path = tmp_path / "cmp.png"
    rp.plot_comparison(path, sample_results())
    assert len(png_bytes(path)) > 1000


def test_empty_figure_inputs_are_usage_errors(tmp_path):
    with pytest.raises(UsageError):
        rp.plot_sweep(tmp_path / "x.png", "lam", [])
    with pytest.raises(UsageError):
        rp.plot_history(tmp_path / "x.png", [])
    with pytest.raises(UsageError):
        rp.plot_comparison(tmp_path / "x.png", [])


# ---------------------------------------------------------------------------
# history round trip
# ---------------------------------------------------------------------------

def test_history_csv_round_trip(tmp_path):
    history = [
        ad.AdaptEpoch(0, 1.25, 0.125, 7, 1e-3, 0.5),
        ad.AdaptEpoch(1, 1.10, math.nan, None, 1e-3, 0.4),
    ]
    path = tmp_path / "history.csv"
    ad.write_history(history, path)
    back = rp.read_history_csv(path)
    assert back[0] == history[0]
    assert back[1].epoch == 1
    assert math.isnan(back[1].mmd2)
    assert back[1].selected_count is None


def test_history_reader_rejects_other_csvs(tmp_path):
    path = tmp_path / "other.csv"
    rp.write_results_csv(path, sample_results())
    with pytest.raises(UsageError):
        rp.read_history_csv(path)

import os
import subprocess
import sys

import numpy as np
import pytest

from roughplot import PlotJob, SchemaError, render, read_csv, fit_slope
from roughplot.plot import CONVERGENCE, CONDITION, HOMOG_RATES


HEADER = ("case,eps,h,htilde,hfine,err_l2,err_h1,err_l2_homog,err_h1_homog,"
          "cond2,cells,t_ref_s,t_cells_s,t_solve_s")


def _write(path, rows, header=HEADER):
    lines = ['# config: {"case": "EX1"}', header]
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _conv_rows(hs, l2_pow=2.0, h1_pow=1.0):
    return [["EX1", 0.015625, h, 7.8e-4, 1.5e-3, h ** l2_pow, h ** h1_pow,
             "", "", "", int(1 / h), 1.0, 1.0, 1.0] for h in hs]


def test_fit_slope_exact_line():
    x = np.array([1.0, 2.0, 4.0])
    assert fit_slope(x, x) == pytest.approx(1.0, abs=1e-12)
    assert fit_slope(x, x ** 2) == pytest.approx(2.0, abs=1e-12)


def test_render_convergence_annotations(tmp_path):
    csv = tmp_path / "ex1.csv"
    _write(csv, _conv_rows([0.2, 0.1, 0.05, 0.025]))
    out = tmp_path / "fig.png"
    ann = render(PlotJob(str(csv), CONVERGENCE, str(out), title="EX1"))
    assert ann == {"err_l2": "2.00", "err_h1": "1.00"}
    assert out.exists() and out.stat().st_size > 0


def test_render_single_column_slope_one(tmp_path):
    csv = tmp_path / "one.csv"
    _write(csv, _conv_rows([0.2, 0.1, 0.05], l2_pow=1.0))
    ann = render(PlotJob(str(csv), CONVERGENCE, str(tmp_path / "f.png"),
                         columns=["err_l2"]))
    assert ann == {"err_l2": "1.00"}


def test_render_condition_negative_slope(tmp_path):
    csv = tmp_path / "cond.csv"
    rows = [["COND", 0.015625, h, 7.8e-4, 1.5e-3, "", "", "", "",
             h ** -2, int(1 / h), 1.0, 1.0, 1.0] for h in (0.2, 0.1, 0.05)]
    _write(csv, rows)
    ann = render(PlotJob(str(csv), CONDITION, str(tmp_path / "f.png")))
    assert ann == {"cond2": "-2.00"}


def test_render_homog_rates(tmp_path):
    csv = tmp_path / "hr.csv"
    rows = [["HOMOG_RATES", e, 1e-3, 4e-3, e / 20, e, e, np.sqrt(e),
             np.sqrt(e), "", 0, 1.0, 1.0, 1.0]
            for e in (1 / 8, 1 / 16, 1 / 32)]
    _write(csv, rows)
    ann = render(PlotJob(str(csv), HOMOG_RATES, str(tmp_path / "f.png")))
    assert ann == {"err_h1": "1.00", "err_h1_homog": "0.50"}


def test_schema_error_lists_missing_columns(tmp_path):
    csv = tmp_path / "bad.csv"
    csv.write_text("case,eps,h\nEX1,0.01,0.2\nEX1,0.01,0.1\n")
    with pytest.raises(SchemaError) as err:
        render(PlotJob(str(csv), CONVERGENCE, str(tmp_path / "f.png")))
    assert "err_l2" in str(err.value)
    assert "err_h1" in str(err.value)


def test_too_few_rows_rejected(tmp_path):
    csv = tmp_path / "short.csv"
    _write(csv, _conv_rows([0.2]))
    with pytest.raises(SchemaError):
        render(PlotJob(str(csv), CONVERGENCE, str(tmp_path / "f.png")))


def test_unknown_kind_rejected(tmp_path):
    with pytest.raises(SchemaError):
        PlotJob("x.csv", "PIE_CHART", "f.png")


def test_rendering_is_deterministic_in_annotations(tmp_path):
    csv = tmp_path / "ex1.csv"
    _write(csv, _conv_rows([0.2, 0.1, 0.05, 0.025], l2_pow=1.93, h1_pow=0.97))
    a = render(PlotJob(str(csv), CONVERGENCE, str(tmp_path / "a.png")))
    b = render(PlotJob(str(csv), CONVERGENCE, str(tmp_path / "b.png")))
    assert a == b


def test_read_csv_parses_blanks(tmp_path):
    csv = tmp_path / "ex1.csv"
    _write(csv, _conv_rows([0.2, 0.1]))
    header, rows = read_csv(str(csv))
    assert header[0] == "case"
    assert rows[0]["err_l2_homog"] is None
    assert rows[0]["case"] == "EX1"


def test_cli_roundtrip(tmp_path):
    csv = tmp_path / "ex1.csv"
    _write(csv, _conv_rows([0.2, 0.1, 0.05, 0.025]))
    out = tmp_path / "fig.png"
    res = subprocess.run([sys.executable, "-m", "roughplot.plot",
                          "--kind", "convergence", "--in", str(csv),
                          "--out", str(out)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "err_l2: slope 2.00" in res.stdout
    assert out.exists()


def test_cli_schema_error_exit_code(tmp_path):
    csv = tmp_path / "bad.csv"
    csv.write_text("case,h\nEX1,0.2\nEX1,0.1\n")
    res = subprocess.run([sys.executable, "-m", "roughplot.plot",
                          "--kind", "convergence", "--in", str(csv),
                          "--out", str(tmp_path / "f.png")],
                         capture_output=True, text=True)
    assert res.returncode == 2
    assert "missing required columns" in res.stderr

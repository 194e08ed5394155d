import json
import re
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from srocmeta.cli import build_parser, format_pvalue, main, resolve_seed
from srocmeta.data import StudyRecord, write_records_csv
from srocmeta.simulation import SimConfig, generate_dataset


@pytest.fixture
def data_csv(tmp_path):
    recs = generate_dataset(SimConfig(n_studies=12), np.random.default_rng(2))
    p = tmp_path / "data.csv"
    with p.open("w") as fh:
        write_records_csv(recs, fh)
    return p


def test_fit_writes_json(tmp_path, data_csv, capsys):
    out = tmp_path / "fit.json"
    rc = main(["fit", str(data_csv), "--method", "pseudo", "--criterion", "reml", "-o", str(out)])
    assert rc == 0
    d = json.loads(out.read_text())
    assert len(d["theta"]) == 7
    text = capsys.readouterr().out
    assert "gamma0" in text and "AUSC" in text and "< 0.001" in text


def test_fit_json_stdout(data_csv, capsys):
    assert main(["fit", str(data_csv), "--format", "json", "--method", "riley"]) == 0
    assert json.loads(capsys.readouterr().out)["method"] == "riley"


def test_fit_one_study_exit_1(tmp_path, capsys):
    p = tmp_path / "one.csv"
    with p.open("w") as fh:
        write_records_csv([StudyRecord("a", [0.1, 0.2], [8, 5], [3, 6], 10, 10)], fh)
    assert main(["fit", str(p)]) == 1
    assert "at least 2 studies" in capsys.readouterr().err


def test_fit_bad_csv_exit_1(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("study_id,threshold,tp,tn,n_diseased,n_nondiseased\na,0.1,20,5,10,10\n")
    assert main(["fit", str(p)]) == 1
    assert main(["fit", str(tmp_path / "nope.csv")]) == 1


def test_fit_boundary_exit_2(tmp_path):
    p = tmp_path / "flat.csv"
    recs = [StudyRecord(f"s{k}", [0.0, 0.5, 1.0], [80, 60, 30], [40, 60, 85], 100, 100)
            for k in range(6)]
    with p.open("w") as fh:
        write_records_csv(recs, fh)
    out = tmp_path / "fit.json"
    assert main(["fit", str(p), "-o", str(out)]) == 2
    assert json.loads(out.read_text())["boundary_flags"]["tau1_sq"]


def test_sroc_from_fit_json(tmp_path, data_csv, capsys):
    fit_json = tmp_path / "fit.json"
    main(["fit", str(data_csv), "-o", str(fit_json)])
    capsys.readouterr()
    curve, svg = tmp_path / "c.csv", tmp_path / "c.svg"
    rc = main(["sroc", str(fit_json), "--grid", "51", "-o", str(curve), "--youden",
               "--svg", str(svg), "--data", str(data_csv)])
    assert rc == 0
    out = capsys.readouterr().out
    assert re.search(r"AUSC 0\.\d{3}  SE 0\.\d{3}  95% CI \(0\.\d{3}, 0\.\d{3}\)", out)
    assert re.search(r"Youden-optimal threshold \S+: SSe \d+\.\d%  SSp \d+\.\d%", out)
    assert len(curve.read_text().splitlines()) == 52
    ET.parse(svg)


def test_sroc_from_csv(tmp_path, data_csv, capsys):
    out = tmp_path / "c.svg"
    assert main(["sroc", str(data_csv), "-o", str(out), "--format", "svg"]) == 0
    ET.parse(out)


def test_simulate_smoke_and_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_studies": 8, "m_max": 3, "replicates": 10,
                               "estimators": ["pseudo-reml", "riley-reml"]}))
    outs = []
    for jobs in (1, 3):
        o, j = tmp_path / f"s{jobs}.csv", tmp_path / f"s{jobs}.json"
        assert main(["simulate", "--config", str(cfg), "--seed", "4", "--jobs", str(jobs),
                     "-o", str(o), "--json", str(j)]) == 0
        outs.append((o.read_bytes(), j.read_bytes()))
    assert outs[0] == outs[1]
    lines = outs[0][0].decode().splitlines()
    assert {l.split(",")[0] for l in lines[1:]} == {"pseudo-reml", "riley-reml"}


def test_simulate_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"rho": 1.5}))
    assert main(["simulate", "--config", str(cfg)]) == 1
    assert "rho" in capsys.readouterr().err


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("SROCMETA_SEED", raising=False)
    assert resolve_seed(None, 7) == 7
    monkeypatch.setenv("SROCMETA_SEED", "99")
    assert resolve_seed(None, 7) == 99
    assert resolve_seed(3, 7) == 3


def test_validate(tmp_path, data_csv, capsys):
    assert main(["validate", str(data_csv)]) == 0
    p = tmp_path / "bad.csv"
    p.write_text("study_id,threshold,tp,tn,n_diseased,n_nondiseased\n"
                 "a,0.1,5,5,10,10\na,0.2,6,4,10,10\n")
    assert main(["validate", str(p)]) == 1
    assert "tp_monotone" in capsys.readouterr().out


def test_pvalue_format():
    assert format_pvalue(0.0004) == "< 0.001"
    assert format_pvalue(0.538) == "0.538"


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["fit", "x.csv", "--bogus"])
    assert exc.value.code == 2


def _actions(parser):
    return [a for a in parser._actions if a.option_strings and a.dest != "help"]


def test_every_flag_documented():
    parser = build_parser()
    sub = next(a for a in parser._actions if hasattr(a, "choices") and isinstance(a.choices, dict))
    assert set(sub.choices) == {"fit", "sroc", "simulate", "validate"}
    for name, p in sub.choices.items():
        text = p.format_help()
        for a in _actions(p):
            assert a.help, f"{name} {a.option_strings} lacks help"
            assert a.option_strings[-1] in text


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "srocmeta", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout

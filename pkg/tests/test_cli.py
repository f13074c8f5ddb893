import json
import re

import pytest

from factorlab.cli import build_parser, main
from factorlab.harness import read_csv

SMALL = {"data": {"input_factors": [2] * 6, "output_factors": [4] * 3},
         "model": {"d": 8, "h": 16}, "optim": {"epochs": 5}, "batch_size": 32}


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_verify_theory_passes(capsys):
    assert main(["verify-theory", "--configs", "10"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5


def test_verify_theory_fault_injection(capsys):
    assert main(["verify-theory", "--configs", "5", "--inject-fault", "table"]) == 1
    assert "logit-factorization-exact" in capsys.readouterr().err


def test_verify_theory_refuses_big(capsys):
    assert main(["verify-theory", "--max-n", "4096"]) == 2
    assert "--allow-big" in capsys.readouterr().err


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, sp in sub.choices.items():
        with pytest.raises(SystemExit) as exc:
            main([name, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for action in sp._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_train_and_report(tmp_path, small_config, capsys):
    out = tmp_path / "m.csv"
    assert main(["train", "--config", str(small_config), "--seeds", "0", "1", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert {r["seed"] for r in rows} == {0, 1}
    capsys.readouterr()
    assert main(["report", "--csv", str(out), "--group-by", "seed", "--final"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "seed,count,mean,median,q10,q90"
    assert len(lines) == 3


def test_report_missing_column(tmp_path, small_config, capsys):
    out = tmp_path / "m.csv"
    main(["train", "--config", str(small_config), "--out", str(out)])
    assert main(["report", "--csv", str(out), "--value", "accuracy"]) == 2
    assert "accuracy" in capsys.readouterr().err


def test_seed_environment_override(tmp_path, small_config, monkeypatch):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["train", "--config", str(small_config), "--out", str(a)])
    monkeypatch.setenv("FACTORLAB_SEED", "5")
    main(["train", "--config", str(small_config), "--out", str(b)])
    assert a.read_bytes() != b.read_bytes()
    assert json.loads((tmp_path / "b.csv.meta.json").read_text())["master_seed"] == 5


def test_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"data": {"degree": 2, "beta": 0.5}}))
    assert main(["complexity", "--config", str(p)]) == 2
    assert "mutually exclusive" in capsys.readouterr().err


def test_complexity_default(capsys):
    assert main(["complexity"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ac"] == 16


def test_gen_data_and_estimate(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({"data": {"input_factors": [2, 2, 2], "output_factors": [2, 2],
                                        "degree": 1}}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "gt.json"),
                 "--lambda-csv", str(tmp_path / "lam.csv")]) == 0
    assert len((tmp_path / "lam.csv").read_text().splitlines()) == 4
    capsys.readouterr()
    assert main(["estimate", "--config", str(cfg), "--n", "500", "--omega", "auto",
                 "--out", str(tmp_path / "cands.csv")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["tv_selected"] <= 1.0
    assert main(["estimate", "--config", str(cfg), "--omega", "-1"]) == 2


def test_estimate_refuses_large_full_enumeration(tmp_path):
    cfg = tmp_path / "big.json"
    cfg.write_text(json.dumps({"data": {"input_factors": [2] * 4, "output_factors": [2, 2],
                                        "degree": 1}}))
    assert main(["estimate", "--config", str(cfg)]) == 2


def _two_point_csv(path):
    path.write_text("epoch,loss_population\n1,0.5\n10,0.05\n")


def test_plot_two_points(tmp_path):
    csv_path, svg = tmp_path / "two.csv", tmp_path / "two.svg"
    _two_point_csv(csv_path)
    assert main(["plot", "--csv", str(csv_path), "--out", str(svg), "--loglog"]) == 0
    text = svg.read_text()
    lines = re.findall(r'<polyline[^>]*points="([^"]*)"', text)
    assert len(lines) == 1
    assert len(lines[0].split()) == 2
    assert 'viewBox="0 0 800 600"' in text


def test_plot_three_groups(tmp_path):
    csv_path, svg = tmp_path / "g.csv", tmp_path / "g.svg"
    rows = ["epoch,loss_population,seed"] + [f"{e},{1 / (e + 1 + s)},{s}" for s in range(3) for e in range(4)]
    csv_path.write_text("\n".join(rows) + "\n")
    assert main(["plot", "--csv", str(csv_path), "--group", "seed", "--out", str(svg)]) == 0
    text = svg.read_text()
    assert text.count("<polyline") == 3
    assert re.findall(r'class="legend"[^>]*>([^<]*)<', text) == ["0", "1", "2"]


def test_plot_missing_column(tmp_path, capsys):
    csv_path = tmp_path / "two.csv"
    _two_point_csv(csv_path)
    assert main(["plot", "--csv", str(csv_path), "--x", "flops", "--out", str(tmp_path / "x.svg")]) == 2
    assert "missing column 'flops'" in capsys.readouterr().err


def test_plot_deterministic(tmp_path):
    csv_path = tmp_path / "two.csv"
    _two_point_csv(csv_path)
    main(["plot", "--csv", str(csv_path), "--out", str(tmp_path / "a.svg")])
    main(["plot", "--csv", str(csv_path), "--out", str(tmp_path / "b.svg")])
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_isoflop_sweep_command(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"regime": "generalization", "data": SMALL["data"], "model": SMALL["model"]}))
    out = tmp_path / "iso.csv"
    assert main(["sweep", "--isoflop", "--config", str(cfg), "--budgets", "1e7",
                 "--gammas", "0.5", "0.9", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert [r["gamma"] for r in rows] == [0.5, 0.9]
    assert all(r["flops"] <= 1e7 for r in rows)

import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mifiae.cli import main
from mifiae.config import load_run_config, render_run_config
from mifiae.data import load_cohort
from mifiae.model import init_params, save_params
from mifiae.report import read_csv
from mifiae.survival import concordance_index


def write_config(path, root, n=60, epochs=3, folds=2, censoring=0.3, null=False):
    weights = "w_img = 0.0\nw_tab = 0.0\n" if null else ""
    path.write_text(f"""[paths]
cohort_dir = {root}/cohort
checkpoint_dir = {root}/ckpt
report_dir = {root}/reports

[run]
folds = {folds}

[synthetic]
n_patients = {n}
censoring_rate = {censoring}
{weights}
[training]
epochs = {epochs}
batch_size = 16
""")
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """n=60 cohort, two folds, five epochs: generate, train, evaluate, stratify."""
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root / "run.ini", root, epochs=5)
    for cmd in ("generate", "train", "evaluate", "stratify"):
        assert run(cmd, "--config", cfg) == 0
    return root, cfg


class TestGenerate:
    def test_counts(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "r.ini", tmp_path, n=200)
        assert run("generate", "--config", cfg) == 0
        assert len(list((tmp_path / "cohort" / "volumes").glob("*.vol"))) == 200
        assert len((tmp_path / "cohort" / "clinical.csv").read_text().splitlines()) == 201
        assert "wrote 200 patients" in capsys.readouterr().out

    def test_deterministic(self, tmp_path):
        cfg = write_config(tmp_path / "r.ini", tmp_path, n=20)
        run("generate", "--config", cfg, "--out", tmp_path / "a")
        run("generate", "--config", cfg, "--out", tmp_path / "b")
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_reported_censoring(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "r.ini", tmp_path, n=200, censoring=0.4)
        run("generate", "--config", cfg)
        out = capsys.readouterr().out
        rate = float(out.split("censoring rate ")[1].rstrip(")\n"))
        assert 0.35 <= rate <= 0.45
        assert abs(load_cohort(tmp_path / "cohort").censoring_fraction - rate) < 1e-3


class TestTrain:
    def test_loss_decreases(self, tmp_path):
        cfg = write_config(tmp_path / "r.ini", tmp_path, n=60, epochs=30)
        run("generate", "--config", cfg)
        assert run("train", "--config", cfg) == 0
        rows = read_csv(tmp_path / "reports" / "losses_fold0.csv")
        assert len(rows) == 30
        assert float(rows[-1]["L_final"]) < float(rows[0]["L_final"])
        assert list(rows[0]) == ["epoch", "L_Rec", "L_Align", "L_Surv", "L_final"]

    def test_no_align_column_zero(self, trained, tmp_path):
        root, _ = trained
        cfg = write_config(tmp_path / "r.ini", root, epochs=2)
        assert run("train", "--config", cfg, "--ablation", "no_align", "--out", tmp_path / "o") == 0
        rows = read_csv(tmp_path / "o" / "losses_fold0.csv")
        assert all(float(r["L_Align"]) == 0.0 for r in rows)
        full = read_csv(root / "reports" / "losses_fold0.csv")
        assert any(float(r["L_Align"]) > 0.0 for r in full)

    def test_resume_matches_uninterrupted(self, trained, tmp_path):
        root, _ = trained
        short = write_config(tmp_path / "short.ini", root, epochs=2)
        long = write_config(tmp_path / "long.ini", root, epochs=4)
        assert run("train", "--config", long, "--out", tmp_path / "straight") == 0
        assert run("train", "--config", short, "--out", tmp_path / "resumed") == 0
        assert run("train", "--config", long, "--out", tmp_path / "resumed", "--resume") == 0
        for f in ("losses_fold0.csv", "losses_fold1.csv", "checkpoints/full/fold1.mifi"):
            assert (tmp_path / "straight" / f).read_bytes() == (tmp_path / "resumed" / f).read_bytes()

    def test_config_mismatch(self, trained, tmp_path, capsys):
        root, _ = trained
        cfg = write_config(tmp_path / "r.ini", root)
        cfg.write_text(cfg.read_text() + "\n[model]\ntabular_dim = 3\n")
        assert run("train", "--config", cfg, "--out", tmp_path / "o") == 1
        assert "tabular_dim" in capsys.readouterr().err


class TestEvaluate:
    def test_report_mean_matches_folds(self, trained):
        root, _ = trained
        rows = read_csv(root / "reports" / "eval_report.csv")
        folds = [float(r["c_index"]) for r in rows if r["fold"].isdigit()]
        mean = float(next(r["c_index"] for r in rows if r["fold"] == "mean"))
        std = float(next(r["c_index"] for r in rows if r["fold"] == "std"))
        assert abs(mean - np.mean(folds)) < 1e-12
        assert abs(std - np.std(folds, ddof=1)) < 1e-12

    def test_risk_files_match_c_index(self, trained):
        root, _ = trained
        rows = read_csv(root / "reports" / "eval_report.csv")
        for fold in (0, 1):
            r = read_csv(root / "reports" / f"risks_fold{fold}.csv")
            c = concordance_index([float(x["risk"]) for x in r], [float(x["time"]) for x in r],
                                  [int(x["event"]) for x in r])
            assert c == float(rows[fold]["c_index"])

    def test_untrained_on_null_cohort_is_chance(self, tmp_path):
        cfg_path = write_config(tmp_path / "r.ini", tmp_path, n=200, folds=5, null=True)
        run("generate", "--config", cfg_path)
        cfg = load_run_config(cfg_path)
        ckpt = tmp_path / "ckpt" / "full"
        ckpt.mkdir(parents=True)
        for fold in range(5):
            params = init_params(cfg.model, seed=100 + fold)
            params["risk.w"].data = np.random.default_rng(fold).normal(size=params["risk.w"].shape)
            save_params(ckpt / f"fold{fold}.mifi", params)
        assert run("evaluate", "--config", cfg_path) == 0
        rows = read_csv(tmp_path / "reports" / "eval_report.csv")
        mean = float(next(r["c_index"] for r in rows if r["fold"] == "mean"))
        assert 0.40 <= mean <= 0.60

    def test_missing_checkpoint(self, trained, tmp_path, capsys):
        root, _ = trained
        cfg = write_config(tmp_path / "r.ini", root)
        assert run("evaluate", "--config", cfg, "--out", tmp_path / "empty") == 1
        assert "missing checkpoint" in capsys.readouterr().err


class TestStratify:
    def test_svg_is_xml_with_three_curves(self, trained):
        root, _ = trained
        svg = ET.parse(root / "reports" / "km.svg").getroot()
        ns = "{http://www.w3.org/2000/svg}"
        assert svg.tag == ns + "svg"
        assert len(svg.findall(f"{ns}path")) == 3
        assert any("log-rank p =" in (t.text or "") for t in svg.iter(ns + "text"))

    def test_km_csv_rows(self, trained):
        root, _ = trained
        groups = {r["id"]: r["group"] for r in read_csv(root / "reports" / "risk_groups.csv")}
        clinical = {r["id"]: r for r in read_csv(root / "cohort" / "clinical.csv")}
        assert len(groups) == 60
        expected = total = 0
        for g, name in enumerate(("low", "mid", "high")):
            lines = (root / "reports" / f"km_group{g}.csv").read_text().splitlines()
            assert lines[0] == "time,survival,at_risk,events"
            member = [clinical[i] for i, grp in groups.items() if grp == name]
            distinct = {float(r["time"]) for r in member if r["event"] == "1"}
            assert len(lines) - 1 == len(distinct)
            expected += len(distinct) + 1
            total += len(lines)
        assert total == expected

    def test_stratification_summary(self, trained):
        root, _ = trained
        kv = {r["key"]: r["value"] for r in read_csv(root / "reports" / "stratification.csv")}
        assert float(kv["cutoff_low"]) < float(kv["cutoff_high"])
        assert int(kv["n_low"]) + int(kv["n_mid"]) + int(kv["n_high"]) == 60
        assert 0.0 <= float(kv["p_value"]) <= 1.0

    def test_needs_evaluate_first(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "r.ini", tmp_path)
        assert run("stratify", "--config", cfg) == 1
        assert "run `evaluate` first" in capsys.readouterr().err


class TestAblate:
    def test_table_and_determinism(self, trained, tmp_path):
        root, _ = trained
        cfg = write_config(tmp_path / "r.ini", root, epochs=1)
        assert run("ablate", "--config", cfg, "--out", tmp_path / "a") == 0
        assert run("ablate", "--config", cfg, "--out", tmp_path / "b") == 0
        rows = read_csv(tmp_path / "a" / "ablation_table.csv")
        assert [r["variant"] for r in rows] == ["full", "no_cmifm", "no_mffsm", "no_both", "no_align"]
        assert len({r["folds_hash"] for r in rows}) == 1
        for f in ("ablation_table.csv", "ablation/no_both/eval_report.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class TestEntryPoint:
    def test_show_config_round_trip(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "r.ini", tmp_path, n=33)
        assert run("show-config", "--config", cfg, "--seed", "7") == 0
        text = capsys.readouterr().out
        (tmp_path / "resolved.ini").write_text(text)
        resolved = load_run_config(tmp_path / "resolved.ini")
        assert resolved.synthetic.n_patients == 33 and resolved.training.seed == 7
        assert render_run_config(resolved) == text

    @pytest.mark.parametrize("body,needle", [
        ("[training]\nepochs = 0\n", "epochs"),
        ("[training]\nmomentum = 0.9\n", "unknown key"),
        ("[bogus]\nx = 1\n", "unknown section"),
        ("[run]\nablation = no_everything\n", "unknown variant"),
    ])
    def test_bad_config_exit_code(self, tmp_path, capsys, body, needle):
        (tmp_path / "bad.ini").write_text(body)
        assert run("show-config", "--config", tmp_path / "bad.ini") == 1
        assert needle in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run("train", "--config", tmp_path / "nope.ini") == 1
        assert "not found" in capsys.readouterr().err

    def test_module_invocation(self):
        out = subprocess.run([sys.executable, "-m", "mifiae", "--help"], capture_output=True, text=True)
        assert out.returncode == 0 and "generate" in out.stdout

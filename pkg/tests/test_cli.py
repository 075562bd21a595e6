import json
import shutil

import numpy as np
import pandas as pd
import pytest

from trecor.cli import build_parser, main
from trecor.draws import PosteriorDraws


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "sim"
    assert main(["simulate", "--n", "50", "--q", "10", "--d", "2", "--rank-true", "1", "--seed", "3",
                 "--out", str(out)]) == 0
    return out


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    for cmd in ("simulate", "fit", "select-rank", "network", "eval", "diagnose"):
        assert cmd in text


def test_end_to_end(dataset, tmp_path):
    man = json.loads((dataset / "manifest.json").read_text())
    assert man["q"] == 10 and man["n"] == 50
    fit_args = ["fit", "--data", str(dataset), "--rank", "1", "--iterations", "500", "--burn-in", "250",
                "--chains", "2", "--seed", "5"]
    assert main(fit_args + ["--out", str(tmp_path / "fit")]) == 0
    diag = json.loads((tmp_path / "fit" / "diagnostics.json").read_text())
    assert diag["chains"] == 2 and diag["draws_per_chain"] == [50, 50]

    assert main(["network", "--draws", str(tmp_path / "fit"), "--tree", str(dataset / "tree.nwk"),
                 "--covariate", "1", "--out", str(tmp_path / "net")]) == 0
    corr = pd.read_csv(tmp_path / "net" / "population_corr.csv", index_col=0).to_numpy()
    assert np.allclose(np.diag(corr), 1.0) and np.allclose(corr, corr.T)
    delta = pd.read_csv(tmp_path / "net" / "delta.csv", index_col=0).to_numpy()
    assert np.all(np.abs(delta) <= 1) and np.allclose(delta, delta.T)
    edges = json.loads((tmp_path / "net" / "edges.json").read_text())
    assert edges["achieved_fdr"] <= edges["fdr"]

    assert main(["diagnose", "--draws", str(tmp_path / "fit"), "--out", str(tmp_path / "diag")]) == 0
    assert (tmp_path / "diag" / "trace_chain1.csv").exists()
    assert (tmp_path / "diag" / "effect_sizes.csv").exists()

    # same seed, same output
    assert main(fit_args + ["--out", str(tmp_path / "fit2")]) == 0
    for c in ("chain_0", "chain_1"):
        a = PosteriorDraws.load(str(tmp_path / "fit" / c))
        b = PosteriorDraws.load(str(tmp_path / "fit2" / c))
        assert np.array_equal(a.stack("Sigma"), b.stack("Sigma"))
        assert a.manifest["data_hash"] == b.manifest["data_hash"]
        assert a.manifest["config_hash"] == b.manifest["config_hash"]


def test_oracle_requires_truth(dataset, tmp_path, capsys):
    copy = tmp_path / "copy"
    shutil.copytree(dataset, copy)
    shutil.rmtree(copy / "truth")
    rc = main(["fit", "--data", str(copy), "--mode", "oracle", "--iterations", "10", "--burn-in", "5",
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "oracle" in capsys.readouterr().err
    assert main(["fit", "--data", str(dataset), "--mode", "oracle", "--iterations", "10", "--burn-in", "5",
                 "--out", str(tmp_path / "o2")]) == 0


def test_toml_config_and_flag_override(dataset, tmp_path):
    cfgfile = tmp_path / "c.toml"
    cfgfile.write_text('[fit]\niterations = 30\nburn_in = 10\nthin = 2\nrank = 2\n\n[hyper]\na_nu = 10.0\n')
    assert main(["--config", str(cfgfile), "fit", "--data", str(dataset), "--rank", "1",
                 "--out", str(tmp_path / "f")]) == 0
    d = PosteriorDraws.load(str(tmp_path / "f" / "chain_0"))
    assert d.dims["R"] == 1 and d.n_draws == 10
    assert d.hyper.a_nu == 10.0


def test_config_errors(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[fit]\nbogus = 1\n")
    assert main(["--config", str(bad), "fit", "--data", str(dataset), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "bogus" in err and "[input " in err
    assert main(["--config", str(tmp_path / "missing.toml"), "fit", "--data", str(dataset),
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["fit", "--data", str(dataset), "--iterations", "5", "--burn-in", "9",
                 "--out", str(tmp_path / "x")]) == 2


def test_select_rank_and_presets(dataset, tmp_path):
    assert main(["select-rank", "--data", str(dataset), "--ranks", "1,2", "--iterations", "40", "--burn-in", "20",
                 "--out", str(tmp_path / "s")]) == 0
    sel = json.loads((tmp_path / "s" / "selection.json").read_text())
    assert sel["chosen"] in (1, 2)
    assert len(pd.read_csv(tmp_path / "s" / "waic.csv")) == 2
    assert main(["fit", "--data", str(dataset), "--preset", "hyper-grid", "--iterations", "20", "--burn-in", "10",
                 "--out", str(tmp_path / "h")]) == 0
    assert len(list((tmp_path / "h").glob("hyper_*/diagnostics.json"))) == 4
    assert main(["fit", "--data", str(dataset), "--preset", "rank-grid", "--iterations", "20", "--burn-in", "10",
                 "--out", str(tmp_path / "r")]) == 0
    assert sorted(p.name for p in (tmp_path / "r").iterdir()) == ["rank_3", "rank_4", "rank_5"]


def test_eval_small(tmp_path):
    assert main(["eval", "--q", "5", "--n", "30", "--iterations", "40", "--burn-in", "20", "--replicates", "1",
                 "--ranks", "1,2", "--out", str(tmp_path / "e")]) == 0
    table = pd.read_csv(tmp_path / "e" / "table.csv")
    assert list(table["method"]) == ["gLASSO", "TRECOR", "TRECOR-oracle", "CovReg"]
    man = json.loads((tmp_path / "e" / "manifest.json").read_text())
    assert man["sim"]["q"] == 5

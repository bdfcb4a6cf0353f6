import json
from pathlib import Path

import pytest

from msfilter.cli import main, run
from msfilter.config import parse_config
from msfilter.errors import ConfigError
from msfilter.averaged_model import load_averaged_model
from msfilter.filters import read_ensemble_dump

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
[experiment]
model = {model}
eps = 0.5
eps_list = 0.5, 0.35
T = {T}
N = 100
R = 2
seed = 3
output_dir = {out}
averaging = {averaging}

[grid]
lower = -4
upper = 4
points = 9

[solver]
n_samples = 500
poisson_dt = 0.05
inner_paths = 1

[filter]
dump_ensembles = true
"""


def write_config(tmp_path, model="ou-linear", T=0.5, averaging="analytic", name="c.ini"):
    text = SMALL.format(model=model, T=T, out=tmp_path / "out", averaging=averaging)
    path = tmp_path / name
    path.write_text(text)
    return path


def test_check_reports_hypotheses(tmp_path, capsys):
    code = main(["check", "--config", str(CONFIGS / "ou-linear.ini"), "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert "H_f margin" in out and "-> ok" in out
    assert "lambda=2 Lambda=2" in out
    assert "within 3 SE" in out and "NOT centered" not in out


def test_zero_horizon_is_config_error(tmp_path, capsys):
    path = write_config(tmp_path, T=0.0)
    assert main(["simulate", "--config", str(path)]) == 2
    assert "T must be positive" in capsys.readouterr().err


@pytest.mark.parametrize("text", [
    "[experiment]\nmodel = nope\n",
    "[experiment]\nmodel = ou-linear\nbogus = 1\n",
    "[experiment]\nmodel = ou-linear\neps_list = 0.2, 0.3\n",
    "[experiment]\nmodel = ou-linear\nN = 0\n",
    "[weird]\nx = 1\n",
    "[experiment]\nmodel = ou-decay\naveraging = analytic\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    assert run("simulate", tmp_path / "absent.ini") == 2


def test_simulate_reproducible_with_provenance(tmp_path):
    path = write_config(tmp_path)
    assert main(["simulate", "--config", str(path)]) == 0
    first = (tmp_path / "out" / "path.csv").read_bytes()
    assert main(["simulate", "--config", str(path)]) == 0
    assert (tmp_path / "out" / "path.csv").read_bytes() == first
    lines = first.decode().splitlines()
    assert lines[0].startswith("# config_sha256=") and lines[1] == "# seed=3"
    assert lines[3] == "t,X1,Z1,Y1"
    assert main(["simulate", "--config", str(path), "--seed", "4"]) == 0
    assert (tmp_path / "out" / "path.csv").read_bytes() != first


def test_filter_and_average_outputs(tmp_path):
    path = write_config(tmp_path, model="ou-decay", averaging="monte-carlo")
    out = tmp_path / "out"
    assert main(["average", "--config", str(path)]) == 0
    avg = load_averaged_model(out / "averaged.json")
    assert avg.grid.shape == (9,)
    assert main(["filter", "--config", str(path)]) == 0
    for name in ("filter_full.csv", "filter_averaged.csv"):
        lines = (out / name).read_text().splitlines()
        assert "t,mass,mean_1,var_1,ess" in lines
    dump = read_ensemble_dump(out / "ensembles_averaged.pf")
    assert dump.states.shape[1:] == (100, 1)


def test_numerical_failure_exit_code(tmp_path, capsys):
    text = SMALL.format(model="ou-linear", T=0.5, out=tmp_path / "out", averaging="analytic")
    text = text.replace("lower = -4\nupper = 4\npoints = 9",
                        "lower = -0.1\nupper = 0.1\npoints = 3\nescape_margin = 0")
    path = tmp_path / "bad.ini"
    path.write_text(text)
    assert main(["filter", "--config", str(path)]) == 3
    assert "GridEscape" in capsys.readouterr().err


def test_converge_small_run(tmp_path):
    path = write_config(tmp_path)
    assert main(["converge", "--config", str(path)]) == 0
    lines = (tmp_path / "out" / "report.csv").read_text().splitlines()
    assert lines[4] == "eps,mean_dnorm,se_dnorm,mean_dunnorm,se_dunnorm,R,failures"
    assert len(lines) == 7
    doc = json.loads((tmp_path / "out" / "report.json").read_text())
    assert doc["R"] == 2 and doc["config"]["model"] == "ou-linear"


@pytest.mark.slow
def test_converge_default_linear_config(tmp_path):
    code = main(["converge", "--config", str(CONFIGS / "ou-linear.ini"), "--out", str(tmp_path)])
    assert code == 0
    rows = [ln.split(",") for ln in (tmp_path / "report.csv").read_text().splitlines()
            if not ln.startswith("#")][1:]
    assert [float(r[0]) for r in rows] == [0.5, 0.35, 0.25, 0.18, 0.125]
    assert all(int(r[5]) == 50 for r in rows)
    assert all(int(r[6]) == 0 for r in rows)
    # mean normalized distance never rises by more than one pooled standard error
    means = [float(r[1]) for r in rows]
    ses = [float(r[2]) for r in rows]
    for i in range(len(rows) - 1):
        assert means[i + 1] <= means[i] + (ses[i] ** 2 + ses[i + 1] ** 2) ** 0.5

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.stats import chi2

from app.helpers.files import write_mxt
from app.main import (
    EXIT_INPUT,
    EXIT_OK,
    EXIT_PRECONDITION,
    load_scenario,
    main,
)
from app.matvar import sample
from app.mmcd import resolve_h
from app.models.matvar import DistributionSpec, MatrixStack, ParamSet

SMOKE_SCENARIO = """
[scenario]
name = smoke
experiment = contamination
p = 2
q = 3
n = 40
reps = 1
seed = 3
estimators = mle, mmcd, truth

[cov_row]
dim = 2
kind = fix
rho = 0.3

[cov_col]
dim = 3
kind = mix
rho = 0.5

[contamination]
epsilon = 0

[mmcd]
n_initial_subsets = 20
"""


def read_table(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


@pytest.fixture
def observations(tmp_path: Path) -> Path:
    rng = np.random.default_rng(1)
    params = ParamSet(
        mean=rng.standard_normal((2, 3)),
        sigma_row=np.array([[2.0, 0.5], [0.5, 1.0]]),
        sigma_col=np.eye(3),
    )
    data = sample(DistributionSpec(params=params), 40, rng_seed=1).data.copy()
    data[:4] += 25.0
    path = tmp_path / "obs.mxt"
    write_mxt(path, MatrixStack(data=data))
    return path


@pytest.fixture
def fitted(tmp_path: Path, observations: Path) -> Path:
    path = tmp_path / "fit.json"
    code = main(["fit", str(observations), "--m", "50", "--seed", "7", "--threads", "1", "-o", str(path)])
    assert code == EXIT_OK
    return path


# Fit


def test_fit_defaults(fitted: Path):
    fit = json.loads(fitted.read_text(encoding="utf-8"))
    assert len(fit["h_subset"]) == resolve_h(40, 2, 3)
    assert fit["config"]["rng_seed"] == 7
    assert (fit["n"], fit["p"], fit["q"]) == (40, 2, 3)
    # Outliers never make it into the subset
    assert set(fit["h_subset"]).isdisjoint(range(4))


def test_fit_deterministic(tmp_path: Path, observations: Path, fitted: Path):
    again = tmp_path / "again.json"
    code = main(["fit", str(observations), "--m", "50", "--seed", "7", "--threads", "1", "-o", str(again)])
    assert code == EXIT_OK
    assert again.read_bytes() == fitted.read_bytes()


def test_fit_csv_input(tmp_path: Path):
    rng = np.random.default_rng(2)
    path = tmp_path / "obs.csv"
    np.savetxt(path, rng.standard_normal((30, 6)), delimiter=",", fmt="%.17g")
    out = tmp_path / "fit.json"
    code = main(["fit", str(path), "--rows", "2", "--cols", "3", "--m", "20", "-o", str(out)])
    assert code == EXIT_OK
    assert json.loads(out.read_text(encoding="utf-8"))["p"] == 2


def test_fit_csv_requires_shape(tmp_path: Path):
    path = tmp_path / "obs.csv"
    path.write_text("1,2,3,4\n", encoding="utf-8")
    assert main(["fit", str(path), "-o", str(tmp_path / "fit.json")]) == EXIT_INPUT


def test_fit_too_few_observations(tmp_path: Path):
    path = tmp_path / "small.mxt"
    write_mxt(path, MatrixStack(data=np.random.default_rng(3).standard_normal((5, 5, 20))))
    code = main(["fit", str(path), "-o", str(tmp_path / "fit.json")])
    assert code == EXIT_PRECONDITION
    assert not (tmp_path / "fit.json").exists()


def test_fit_infeasible_h(tmp_path: Path, observations: Path):
    code = main(["fit", str(observations), "--h", "41", "-o", str(tmp_path / "fit.json")])
    assert code == EXIT_PRECONDITION


def test_fit_parse_error(tmp_path: Path):
    path = tmp_path / "bad.mxt"
    path.write_text("#mxt v1 n=1 p=1 q=1\nabc\n", encoding="utf-8")
    assert main(["fit", str(path), "-o", str(tmp_path / "fit.json")]) == EXIT_INPUT


def test_fit_invalid_utf8(tmp_path: Path):
    mxt = tmp_path / "bad.mxt"
    mxt.write_bytes(b"#mxt v1 n=1 p=1 q=1\n\xff\n")
    assert main(["fit", str(mxt), "-o", str(tmp_path / "fit.json")]) == EXIT_INPUT

    csv = tmp_path / "bad.csv"
    csv.write_bytes(b"1,2,3,4\n5,\xff,7,8\n")
    code = main(["fit", str(csv), "--rows", "2", "--cols", "2", "-o", str(tmp_path / "fit.json")])
    assert code == EXIT_INPUT
    assert not (tmp_path / "fit.json").exists()


# Detect


def test_detect(tmp_path: Path, observations: Path, fitted: Path):
    out = tmp_path / "detect.csv"
    assert main(["detect", str(observations), "--fit", str(fitted), "-o", str(out)]) == EXIT_OK

    table = read_table(out)
    assert list(table.columns) == ["index", "mmd2", "cutoff", "flag"]
    assert len(table) == 40
    assert np.allclose(table["cutoff"], chi2.ppf(0.975, 6))
    assert table["flag"][:4].all()
    assert b"\r\n" not in out.read_bytes()


def test_detect_mean_not_flagged(tmp_path: Path, fitted: Path):
    fit = json.loads(fitted.read_text(encoding="utf-8"))
    mean = np.array(fit["reweighted"]["mean"])
    path = tmp_path / "mean.mxt"
    write_mxt(path, MatrixStack(data=mean[np.newaxis]))
    out = tmp_path / "detect.csv"
    assert main(["detect", str(path), "--fit", str(fitted), "-o", str(out)]) == EXIT_OK
    assert not read_table(out)["flag"].any()


def test_detect_malformed_fit(tmp_path: Path, observations: Path):
    broken = tmp_path / "broken.json"
    broken.write_text('{"n": 3}', encoding="utf-8")
    code = main(["detect", str(observations), "--fit", str(broken), "-o", str(tmp_path / "d.csv")])
    assert code == EXIT_INPUT


def test_detect_shape_mismatch(tmp_path: Path, fitted: Path):
    path = tmp_path / "other.mxt"
    write_mxt(path, MatrixStack(data=np.zeros((3, 3, 2))))
    code = main(["detect", str(path), "--fit", str(fitted), "-o", str(tmp_path / "d.csv")])
    assert code == EXIT_PRECONDITION


def test_detect_invalid_quantile(tmp_path: Path, observations: Path, fitted: Path):
    code = main(
        ["detect", str(observations), "--fit", str(fitted), "--quantile", "1.5", "-o", str(tmp_path / "d.csv")]
    )
    assert code == EXIT_INPUT


# Explain


def _explain(tmp_path: Path, observations: Path, fitted: Path, level: str, index: int = 0) -> Path:
    out = tmp_path / f"explain-{level}.csv"
    code = main(
        ["explain", str(observations), "--fit", str(fitted), "--level", level, "--index", str(index), "-o", str(out)]
    )
    assert code == EXIT_OK
    return out


def _total(path: Path) -> float:
    last = path.read_text(encoding="utf-8").splitlines()[-1]
    assert last.startswith("# total=")
    fields = dict(item.split("=") for item in last[2:].split())
    assert float(fields["efficiency_residual"]) <= 1e-8 * (1 + float(fields["total"]))
    return float(fields["total"])


def test_explain_levels(tmp_path: Path, observations: Path, fitted: Path):
    cell_path = _explain(tmp_path, observations, fitted, "cell")
    row_path = _explain(tmp_path, observations, fitted, "row")
    col_path = _explain(tmp_path, observations, fitted, "col")

    cell = read_table(cell_path).set_index("row")
    row = read_table(row_path)
    col = read_table(col_path)

    assert cell.shape == (2, 3)
    assert len(row) == 2
    assert len(col) == 3

    total = _total(row_path)
    assert row["value"].sum() == pytest.approx(total, rel=1e-8)
    assert np.allclose(col["value"], cell.sum(axis=0).to_numpy(), rtol=1e-10)
    assert np.allclose(row["value"], cell.sum(axis=1).to_numpy(), rtol=1e-10)
    assert _total(cell_path) == total


def test_explain_index_out_of_range(tmp_path: Path, observations: Path, fitted: Path):
    code = main(
        ["explain", str(observations), "--fit", str(fitted), "--index", "40", "-o", str(tmp_path / "e.csv")]
    )
    assert code == EXIT_PRECONDITION


# Simulate


def test_simulate_smoke(tmp_path: Path):
    scenario = tmp_path / "smoke.ini"
    scenario.write_text(SMOKE_SCENARIO, encoding="utf-8")
    out = tmp_path / "sim.csv"
    assert main(["simulate", str(scenario), "--threads", "2", "-o", str(out)]) == EXIT_OK

    table = read_table(out)
    assert len(table) == 3
    assert list(table["estimator"]) == ["mle", "mmcd", "truth"]
    assert np.all(np.isfinite(table[["kl", "frobenius", "angle", "precision", "recall", "f_score"]]))
    assert any(line.startswith("# summary n=40 estimator=mmcd metric=kl") for line in out.read_text().splitlines())


def test_simulate_replication_rows(tmp_path: Path):
    scenario = tmp_path / "shift.ini"
    scenario.write_text(
        """
[scenario]
p = 5
q = 20
n = 100
reps = 10
seed = 1

[cov_row]
dim = 5

[cov_col]
dim = 20

[contamination]
scheme = shift
gamma = 1
epsilon = 0.1

[mmcd]
n_initial_subsets = 30
""",
        encoding="utf-8",
    )
    out = tmp_path / "shift.csv"
    assert main(["simulate", str(scenario), "-o", str(out)]) == EXIT_OK
    assert len(read_table(out)) == 10 * 4


def test_simulate_unknown_estimator(tmp_path: Path):
    scenario = tmp_path / "bad.ini"
    scenario.write_text(SMOKE_SCENARIO.replace("mle, mmcd, truth", "mle, oracle"), encoding="utf-8")
    assert main(["simulate", str(scenario), "-o", str(tmp_path / "sim.csv")]) == EXIT_INPUT


def test_simulate_unknown_key(tmp_path: Path):
    scenario = tmp_path / "bad.ini"
    scenario.write_text(SMOKE_SCENARIO.replace("reps = 1", "reps = 1\nreplications = 3"), encoding="utf-8")
    assert main(["simulate", str(scenario), "-o", str(tmp_path / "sim.csv")]) == EXIT_INPUT


def test_load_scenario_lists(tmp_path: Path):
    scenario = tmp_path / "eff.ini"
    scenario.write_text(
        SMOKE_SCENARIO.replace("experiment = contamination", "experiment = efficiency\nn_grid = 30, 60"),
        encoding="utf-8",
    )
    loaded = load_scenario(scenario)
    assert loaded.n_grid == [30, 60]
    assert [e.value for e in loaded.estimators] == ["mle", "mmcd", "truth"]
    assert loaded.cov_col.rho == 0.5
    assert loaded.mmcd.n_initial_subsets == 20

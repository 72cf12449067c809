import json
import math

import pytest

import medgrpo

SMALL = {
    "cohort": {"n_patients": 6, "horizon": 5},
    "grpo": {"iterations": 2},
    "ga": {"population": 12, "generations": 3},
    "mcts": {"budget": 20},
}


def test_discounted_returns():
    assert medgrpo.discounted_returns([1.0, 1.0, 1.0], 0.5) == [1.75, 1.5, 1.0]
    assert medgrpo.discounted_returns([], 0.9) == []


def test_group_relative_advantage():
    assert medgrpo.group_relative_advantage(2.0, 1.0, 0.5, 0.5, 1.0, 2.0) == 0.5
    assert medgrpo.group_relative_advantage(3.0, -1.0, 1.0, 0.0, 0.0, 2.0) == 3.0
    with pytest.raises(ValueError):
        medgrpo.group_relative_advantage(1.0, 1.0, beta=0.0)


def test_kmeans_separates_two_blobs():
    pts = [[0.0, 0.1], [0.1, 0.0], [10.0, 10.1], [10.1, 10.0]]
    labels, inertia = medgrpo.kmeans(pts, 2, seed=3)
    assert labels[0] == labels[1] != labels[2] == labels[3]
    assert inertia == pytest.approx(4 * 0.005, rel=1e-12)


def test_config_errors_surface_as_value_error():
    assert medgrpo.normalize_config({})["cluster"]["k"] == 3
    with pytest.raises(medgrpo.ConfigError, match="grpo.clipp"):
        medgrpo.normalize_config({"grpo": {"clipp": 0.2}})


def test_generate_cohort():
    doc = medgrpo.generate_cohort({"cohort": {"n_patients": 6}})
    assert json.dumps(doc)  # plain data


def test_gradcheck_passes():
    rows = medgrpo.gradcheck({})
    assert {m for m, _, _ in rows} == {"fusion_encoder", "policy_objective", "value_regression"}
    assert all(ok and err < 1e-4 for _, err, ok in rows)


def test_train_then_search(tmp_path):
    code, out, err = medgrpo.train(SMALL, out_dir=tmp_path / "train")
    assert code == 0, err
    assert math.isfinite(float(out.split("final mean return:")[1].split()[0]))
    lines = (tmp_path / "train" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 3
    code, _, err = medgrpo.search(SMALL, tmp_path / "train" / "checkpoint.json", 2,
                                  out_dir=tmp_path / "search")
    assert code == 0, err
    report = json.loads((tmp_path / "search" / "search_report.json").read_text())
    assert report["candidates"]


def test_bad_mode_exit_code(tmp_path):
    code, _, err = medgrpo.ablate(SMALL, "bogus", out_dir=tmp_path)
    assert code == 2
    assert "fairness_sweep" in err

import numpy as np
import pytest

from flowdispatch import dataset
from flowdispatch.dataset import (
    EVALUATION_SCENARIOS,
    TRAINING,
    DatasetFormatError,
    ScenarioSpec,
    derive_seed,
    generate,
)
from flowdispatch.grid import build_case30
from flowdispatch.oracle import verify_kkt


@pytest.fixture(scope="module")
def case30():
    return build_case30()


def test_training_spec_size(case30):
    assert TRAINING.n_samples == 20000
    data = generate(case30, TRAINING, derive_seed(0, "train"))
    assert len(data) == 20000
    totals = data.loads.sum(-1)
    base = case30.base_load.sum()
    assert totals.min() >= 0.70 * base * (1 - 1e-15)
    assert totals.max() <= 1.00 * base * (1 + 1e-15)


def test_evaluation_scenarios():
    names = [s.name for s in EVALUATION_SCENARIOS]
    assert names == ["very_low", "low", "nominal", "high", "very_high"]
    assert all(s.n_samples == 100 for s in EVALUATION_SCENARIOS)
    assert [(s.scale_lo, s.scale_hi) for s in EVALUATION_SCENARIOS] == [
        (0.70, 0.75), (0.83, 0.88), (0.95, 1.00), (1.10, 1.15), (1.25, 1.30)
    ]


def test_degenerate_interval(case30):
    data = generate(case30, ScenarioSpec("base", 1.0, 1.0, 1), seed=3)
    assert len(data) == 1
    np.testing.assert_array_equal(data.loads[0], case30.base_load)


def test_scalar_scaling(case30):
    data = generate(case30, ScenarioSpec("s", 0.8, 0.9, 20), seed=1)
    pos = case30.base_load > 0
    ratios = data.loads[:, pos] / case30.base_load[pos]
    np.testing.assert_allclose(ratios, ratios[:, :1].repeat(ratios.shape[1], 1), rtol=1e-14)


def test_labels_are_optimal(case30):
    data = generate(case30, ScenarioSpec("s", 0.7, 1.3, 50), seed=5)
    for s in data:
        assert verify_kkt(case30, s.optimal_dispatch, s.loads).max_residual() < 1e-6


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec("x", 1.1, 1.0, 5)
    with pytest.raises(ValueError):
        ScenarioSpec("x", 0.0, 1.0, 5)
    with pytest.raises(ValueError):
        ScenarioSpec("x", 0.5, 1.0, -1)


def test_seed_namespaces_differ():
    a = np.random.default_rng(derive_seed(0, "train")).random(4)
    b = np.random.default_rng(derive_seed(0, "eval")).random(4)
    assert not np.array_equal(a, b)


def test_same_seed_byte_identical(tmp_path, case30):
    spec = ScenarioSpec("s", 0.7, 1.0, 40)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    dataset.save(generate(case30, spec, derive_seed(7, "train")), a)
    dataset.save(generate(case30, spec, derive_seed(7, "train")), b)
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.csv"
    dataset.save(generate(case30, spec, derive_seed(8, "train")), c)
    assert a.read_bytes() != c.read_bytes()


def test_save_load_roundtrip(tmp_path, case30):
    data = generate(case30, ScenarioSpec("s", 0.7, 1.3, 30), seed=2)
    path = tmp_path / "d.csv"
    dataset.save(data, path)
    again = dataset.load(path, case30, verify_fraction=1.0)
    np.testing.assert_array_equal(again.loads, data.loads)
    np.testing.assert_array_equal(again.dispatch, data.dispatch)
    np.testing.assert_array_equal(again.cost, data.cost)


def test_header_mismatch_names_column(tmp_path, case30):
    data = generate(case30, ScenarioSpec("s", 0.7, 1.0, 3), seed=2)
    path = tmp_path / "d.csv"
    dataset.save(data, path)
    text = path.read_text().replace("pg_3", "pg_x", 1)
    path.write_text(text)
    with pytest.raises(DatasetFormatError, match="pg_x") as exc:
        dataset.load(path)
    assert exc.value.line == 1


def test_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(DatasetFormatError) as exc:
        dataset.load(path)
    assert exc.value.line == 1


def test_bad_row_reports_line(tmp_path, case30):
    data = generate(case30, ScenarioSpec("s", 0.7, 1.0, 3), seed=2)
    path = tmp_path / "d.csv"
    dataset.save(data, path)
    lines = path.read_text().splitlines()
    lines[2] = lines[2].replace(",", ",abc,", 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError) as exc:
        dataset.load(path)
    assert exc.value.line == 3
    lines[2] = ",".join(["1.0", "zz"] + ["1.0"] * 35)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="zz"):
        dataset.load(path)


def test_tampered_row_fails_verification(tmp_path, case30):
    data = generate(case30, ScenarioSpec("s", 0.7, 1.0, 1), seed=2)
    data.dispatch[0, [1, 2]] += [1.0, -1.0]
    path = tmp_path / "d.csv"
    dataset.save(data, path)
    with pytest.raises(DatasetFormatError, match="KKT"):
        dataset.load(path, case30, verify_fraction=1.0)


def test_wrong_system_shape(tmp_path, case30):
    sub = case30.subsystem([0, 1])
    data = generate(sub, ScenarioSpec("s", 0.7, 1.0, 2), seed=1)
    path = tmp_path / "d.csv"
    dataset.save(data, path)
    with pytest.raises(DatasetFormatError, match="dispatch columns"):
        dataset.load(path, case30)

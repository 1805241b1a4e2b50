import numpy as np
import pytest

from inlacore.errors import ValidationError
from inlacore.io import build_model, evaluate_expression, load_spec, read_csv

from conftest import SALM_CSV, SALM_SPEC


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_read_csv_missing_values_and_strings(tmp_path):
    cols = read_csv(write(tmp_path, "d.csv", "y,g,x\n1,a,0.5\nNA,b,\n3,a,2\n"))
    assert np.isnan(cols["y"][1]) and np.isnan(cols["x"][1])
    assert cols["g"].dtype == object and cols["g"].tolist() == ["a", "b", "a"]


@pytest.mark.parametrize("text,msg", [
    ("", "empty"),
    ("y,x\n", "no rows"),
    ("y,y\n1,2\n", "unique"),
    ("y,x\n1,2\n3\n", "line 3"),
])
def test_read_csv_errors(tmp_path, text, msg):
    with pytest.raises(ValidationError, match=msg):
        read_csv(write(tmp_path, "d.csv", text))


def test_expressions():
    cols = {"x": np.array([0.0, 10.0]), "g": np.array(["a", "b"], dtype=object)}
    np.testing.assert_allclose(evaluate_expression("log(x + 10)", cols), np.log([10.0, 20.0]))
    np.testing.assert_allclose(evaluate_expression("-x**2 / 4", cols), [0.0, -25.0])
    np.testing.assert_allclose(evaluate_expression("3", cols), [3.0, 3.0])
    for bad, msg in (("y", "unknown column"), ("g + 1", "not numeric"), ("open(x)", "unsupported"),
                     ("x +", "cannot parse")):
        with pytest.raises(ValidationError, match=msg):
            evaluate_expression(bad, cols)


def test_salm_spec_builds_the_expected_model():
    spec = load_spec(SALM_SPEC)
    model = build_model(spec, read_csv(spec.data_path()))
    assert model.n_obs == 18
    assert [c.name for c in model.components] == ["(Intercept)", "log(x + 10)", "x", "u"]
    assert model.components[0].prior_precision == 0.0
    assert model.hyper[0].prior.kind == "pc.prec"
    assert model.latent_labels[:2] == ["Predictor.01", "Predictor.02"]


def test_spec_errors(tmp_path):
    cols = read_csv(SALM_CSV)
    cases = {
        "- 1\n": "mapping",
        "response: z\nlikelihood: {family: poisson}\ncomponents: [{kind: intercept}]\n": "not in data",
        "response: y\ncomponents: [{kind: intercept}]\n": "family",
        "response: y\nlikelihood: {family: poisson}\ncomponents: []\n": "nonempty",
        "response: y\nlikelihood: {family: poisson}\ncomponents: [{kind: spline}]\n": "unknown kind",
        "response: y\nlikelihood: {family: poisson}\ncomponents: [{kind: iid, group: u, prior: nope}]\n": "unknown prior",
        "response: y\nlikelihood: {family: poisson}\ncomponents: [{kind: fixed}]\n": "covariate",
        "response: y\nlikelihood: {family: poisson}\ncomponents: [{kind: iid, group: w}]\n": "group column",
        "response: [1\n": "invalid YAML",
    }
    for k, (text, msg) in enumerate(cases.items()):
        path = write(tmp_path, f"s{k}.yaml", text)
        with pytest.raises(ValidationError, match=msg):
            build_model(load_spec(path), cols)


def test_rw2_group_and_offset(tmp_path):
    cols = {"y": np.array([1.0, 2.0, 3.0, 4.0]), "t": np.array([3.0, 4.0, 6.0, 5.0]), "e": np.ones(4)}
    path = write(tmp_path, "s.yaml", "response: y\nlikelihood: {family: gaussian, precision: 2}\n"
                 "offset: log(e * 2)\ncomponents:\n  - {kind: rw2, group: t, name: f}\n")
    model = build_model(load_spec(path), cols)
    f = model.components[0]
    assert f.size == 4 and f.index.tolist() == [0, 1, 3, 2]
    np.testing.assert_allclose(model.offset, np.log(2.0))

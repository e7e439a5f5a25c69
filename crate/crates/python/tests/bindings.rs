use std::sync::Once;

use pyo3::prelude::*;
use pyo3::types::PyDict;

use pydeepctr::pydeepctr;

fn run(code: &str) {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        pyo3::append_to_inittab!(pydeepctr);
        Python::initialize();
    });
    Python::attach(|py| {
        let globals = PyDict::new(py);
        let code = std::ffi::CString::new(code).unwrap();
        py.run(&code, Some(&globals), None).unwrap();
    });
}

#[test]
fn bindings_train_predict_and_round_trip() {
    run(r#"
import json, os, tempfile
import pydeepctr as d

data = d.Dataset.synth(fields=3, cardinality=4, instances=600, seed=2)
train, valid, test = data.split((0.8, 0.1, 0.1), 5)
assert len(train) + len(valid) + len(test) == 600
assert data.dim == 15 and data.fields == ["f0", "f1", "f2"]

cfg = json.dumps({"hidden": [6, 4], "latent_dim": 3, "max_epochs": 2, "learning_rate": 0.05})
for kind in ["lr", "fm", "fnn", "snn-rbm", "snn-dae"]:
    model = d.Model.train(kind, train, valid, cfg)
    assert model.kind == kind
    scores = model.predict(test)
    assert len(scores) == len(test) and all(0.0 < s < 1.0 for s in scores)
    path = os.path.join(tempfile.mkdtemp(), "m.json")
    model.save(path)
    assert d.Model.load(path).predict(test) == scores
    assert model.best_epoch >= 1 and len(model.report()) >= 1

assert d.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
assert d.format_percent(0.75) == "75.00%"
assert all(passed for _, passed, _ in d.selfcheck())
"#);
}

#[test]
fn bindings_raise_python_errors() {
    run(r#"
import pydeepctr as d
try:
    d.auc([0.5, 0.6], [1, 1])
    raise AssertionError("single-class auc accepted")
except ValueError:
    pass
try:
    d.Dataset.load_csv("/nonexistent/data.csv")
    raise AssertionError("missing file accepted")
except OSError:
    pass
"#);
}

use pyo3::ffi::c_str;
use pyo3::prelude::*;
use pyo3::types::PyModule;

#[test]
fn module_exposes_the_pipeline() {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "openmix").unwrap();
        openmix_py::openmix_module(&m).unwrap();
        let globals = pyo3::types::PyDict::new(py);
        globals.set_item("openmix", &m).unwrap();
        py.run(
            c_str!(
                r#"
w = openmix.World.desk()
d = w.sample_dataset(n_known_train=10, n_test_per_role=5, seed=1)
b = openmix.generate_pairs(w, d, n_steps=5, seed=1)
assert len(b) == 50, len(b)
model, log = openmix.train_classifier(w, d, b, epochs=2, rounds=0)
assert len(log.splitlines()) == 2
assert abs(sum(model.open_set([0.0, 0.0])) - 1.0) < 1e-12
r = openmix.verify_inversion(w, [1.0, 2.0], 2, depth=5)
assert r["reverse_residual"] < 1e-6
try:
    openmix.train_classifier(w, d, b, head="bogus")
    raise AssertionError("bad head accepted")
except ValueError as e:
    assert "head" in str(e)
"#
            ),
            Some(&globals),
            None,
        )
        .unwrap();
    });
}

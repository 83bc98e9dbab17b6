use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &str) {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(mmuda::mmuda)(py);
        let globals = PyDict::new(py);
        globals.set_item("mmuda", module).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn metric_and_schedule_functions() {
    with_module(
        r#"
per_class, m = mmuda.miou([0, 1, 1, 1], [0, 0, 1, 1], 2)
assert per_class == [0.5, 2.0 / 3.0], per_class
assert abs(m - 7.0 / 12.0) < 1e-15
assert mmuda.poly_lr(0.01, 10, 10, 0.9) == 0.0
g = {d: mmuda.count_flops(d, 1024, 2048)[1] for d in ("vanilla-mlp", "lawin-aspp", "hybrid-aspp")}
assert g["hybrid-aspp"] < g["lawin-aspp"] < g["vanilla-mlp"]
"#,
    );
}

#[test]
fn model_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    with_module(&format!(
        r#"
sid, image, label = mmuda.synth_domain(1, 3, 2)[0]
model = mmuda.Model(5, seed=2, encoder_channels=[4, 4, 4, 4], embed_dim=4, low_level_dim=4)
pred = model.predict(image, 64, 64)
assert len(pred) == 64 * 64
model.save({dir:?})
back = mmuda.Model.load({dir:?})
assert back.checksum() != 0 and back.parameter_names() == model.parameter_names()
try:
    mmuda.Model(5, embed_dim=5, heads=2)
    raise AssertionError("invalid config accepted")
except ValueError:
    pass
try:
    model.predict(image[:-1], 64, 64)
    raise AssertionError("short buffer accepted")
except (ValueError, RuntimeError):
    pass
"#,
        dir = dir.path().to_str().unwrap()
    ));
}

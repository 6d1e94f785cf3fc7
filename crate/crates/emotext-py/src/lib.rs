use pyo3::prelude::*;

#[pymodule]
fn emotext_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}

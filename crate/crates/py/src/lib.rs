use pyo3::prelude::*;

#[pymodule]
fn mta_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}

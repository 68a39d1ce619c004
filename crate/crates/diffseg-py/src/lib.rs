use pyo3::prelude::*;

#[pymodule]
fn diffseg(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}

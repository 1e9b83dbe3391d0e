use super::check_dt;
use crate::error::{invalid, Error, Result};
use crate::grid::Field;
use crate::linalg::FluxOperator;

/// Implicit step of `∂_t z = Δ(μ z) + G`:
/// `(I − dt Δ_d(μ ·)) z_new = z + dt G`.
pub fn step_kolmogorov(z: &Field, mu: &Field, dt: f64, source: &Field) -> Result<Field> {
    check_dt(dt)?;
    if z.grid() != mu.grid() || z.grid() != source.grid() {
        return Err(Error::GridMismatch);
    }
    if let Some(k) = mu.values().iter().position(|m| !(*m > 0.0) || !m.is_finite()) {
        return Err(invalid(format!("mu must be positive and finite, got {} at {k}", mu.values()[k])));
    }
    let rhs: Vec<f64> = z
        .values()
        .iter()
        .zip(source.values())
        .map(|(a, g)| a + dt * g)
        .collect();
    let x = FluxOperator::laplace_form(mu).solve_implicit(dt, None, &rhs)?;
    Field::new(*z.grid(), x)
}

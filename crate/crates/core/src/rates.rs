//! Diffusion rate families `a_ij(v)` for systems of the form
//! `∂_t u_i = div(Σ_j a_ij(u) ∇u_j)`.
//!
//! Families that can also be written in Laplace form `∂_t u_i = Δ(μ_i(u) u_i)`
//! expose `μ_i` through [`DiffusionRates::laplace_rate`]; the nonlocal torus
//! stepper needs that form. The general-domain scheme needs the
//! antiderivatives `ã_ij` (`∂_j ã_ij = a_ij`, `ã_ij = 0` at `v_j = 0`).

use nalgebra::DMatrix;

use crate::entropy::SktCoefficients;

pub trait DiffusionRates: Send + Sync {
    fn species(&self) -> usize;

    /// `a_ij(v)` for a strictly positive state `v`.
    fn entry(&self, i: usize, j: usize, v: &[f64]) -> f64;

    fn matrix(&self, v: &[f64]) -> DMatrix<f64> {
        let n = self.species();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j, v))
    }

    /// `μ_i(v)` when the system has the Laplace structure.
    fn laplace_rate(&self, _i: usize, _v: &[f64]) -> Option<f64> {
        None
    }

    /// `ã_ij(v)` for `i != j`.
    fn antiderivative(&self, _i: usize, _j: usize, _v: &[f64]) -> Option<f64> {
        None
    }

    /// `∂_{v_i} ã_ij(v)` for `i != j`.
    fn antiderivative_self_partial(&self, _i: usize, _j: usize, _v: &[f64]) -> Option<f64> {
        None
    }
}

impl DiffusionRates for SktCoefficients {
    fn species(&self) -> usize {
        self.d.len()
    }

    fn entry(&self, i: usize, j: usize, v: &[f64]) -> f64 {
        if i == j {
            let cross: f64 = (0..self.species())
                .filter(|&k| k != i)
                .map(|k| self.d_cross[i][k] * v[k])
                .sum();
            self.d[i] + 2.0 * self.d_cross[i][i] * v[i] + cross
        } else {
            self.d_cross[i][j] * v[i]
        }
    }

    fn laplace_rate(&self, i: usize, v: &[f64]) -> Option<f64> {
        let cross: f64 = (0..self.species()).map(|k| self.d_cross[i][k] * v[k]).sum();
        Some(self.d[i] + cross)
    }

    fn antiderivative(&self, i: usize, j: usize, v: &[f64]) -> Option<f64> {
        Some(self.d_cross[i][j] * v[i] * v[j])
    }

    fn antiderivative_self_partial(&self, i: usize, j: usize, v: &[f64]) -> Option<f64> {
        Some(self.d_cross[i][j] * v[j])
    }
}

/// Two-species power-law rates
/// `μ_1 = d_1 + d_12 v_2^α + d_11 v_1^β`, `μ_2 = d_2 + d_21 v_1^β + d_22 v_2^α`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerLawRates {
    pub d: [f64; 2],
    /// `[[d_11, d_12], [d_21, d_22]]`
    pub d_matrix: [[f64; 2]; 2],
    pub alpha: f64,
    pub beta: f64,
}

impl PowerLawRates {
    fn own_exponent(&self, i: usize) -> f64 {
        if i == 0 {
            self.beta
        } else {
            self.alpha
        }
    }

    fn other_exponent(&self, i: usize) -> f64 {
        if i == 0 {
            self.alpha
        } else {
            self.beta
        }
    }
}

impl DiffusionRates for PowerLawRates {
    fn species(&self) -> usize {
        2
    }

    fn entry(&self, i: usize, j: usize, v: &[f64]) -> f64 {
        let o = 1 - i;
        let p_own = self.own_exponent(i);
        let p_other = self.other_exponent(i);
        let self_coeff = self.d_matrix[i][i];
        let cross_coeff = self.d_matrix[i][o];
        if i == j {
            self.d[i] + cross_coeff * v[o].powf(p_other) + self_coeff * (1.0 + p_own) * v[i].powf(p_own)
        } else {
            v[i] * cross_coeff * p_other * v[o].powf(p_other - 1.0)
        }
    }

    fn laplace_rate(&self, i: usize, v: &[f64]) -> Option<f64> {
        let o = 1 - i;
        Some(
            self.d[i]
                + self.d_matrix[i][o] * v[o].powf(self.other_exponent(i))
                + self.d_matrix[i][i] * v[i].powf(self.own_exponent(i)),
        )
    }

    fn antiderivative(&self, i: usize, j: usize, v: &[f64]) -> Option<f64> {
        debug_assert_ne!(i, j);
        Some(v[i] * self.d_matrix[i][j] * v[j].powf(self.other_exponent(i)))
    }

    fn antiderivative_self_partial(&self, i: usize, j: usize, v: &[f64]) -> Option<f64> {
        debug_assert_ne!(i, j);
        Some(self.d_matrix[i][j] * v[j].powf(self.other_exponent(i)))
    }
}

/// State-independent diffusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantRates(pub DMatrix<f64>);

impl DiffusionRates for ConstantRates {
    fn species(&self) -> usize {
        self.0.nrows()
    }

    fn entry(&self, i: usize, j: usize, _v: &[f64]) -> f64 {
        self.0[(i, j)]
    }

    fn antiderivative(&self, i: usize, j: usize, v: &[f64]) -> Option<f64> {
        Some(self.0[(i, j)] * v[j])
    }

    fn antiderivative_self_partial(&self, _i: usize, _j: usize, _v: &[f64]) -> Option<f64> {
        Some(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn skt2() -> SktCoefficients {
        SktCoefficients {
            d: vec![0.5, 0.25],
            d_cross: vec![vec![0.3, 2.0], vec![1.5, 0.7]],
            pi: vec![1.0, 4.0 / 3.0],
        }
    }

    #[test]
    fn skt_matrix_matches_closed_form() {
        let c = skt2();
        let v = [1.3, 0.4];
        let a = c.matrix(&v);
        assert!((a[(0, 0)] - (0.5 + 2.0 * 0.3 * 1.3 + 2.0 * 0.4)).abs() < 1e-15);
        assert!((a[(0, 1)] - 2.0 * 1.3).abs() < 1e-15);
        assert!((a[(1, 0)] - 1.5 * 0.4).abs() < 1e-15);
        assert!((a[(1, 1)] - (0.25 + 2.0 * 0.7 * 0.4 + 1.5 * 1.3)).abs() < 1e-15);
    }

    #[test]
    fn skt_antiderivative_recovers_off_diagonal_rate() {
        // ∂_j (d_ij v_i v_j) = d_ij v_i by central difference in v_j.
        let c = skt2();
        let v = [0.8, 1.7];
        let step = 1e-6;
        let plus = c.antiderivative(0, 1, &[v[0], v[1] + step]).unwrap();
        let minus = c.antiderivative(0, 1, &[v[0], v[1] - step]).unwrap();
        let fd = (plus - minus) / (2.0 * step);
        assert!((fd - c.entry(0, 1, &v)).abs() < 1e-8);
        assert_eq!(c.antiderivative(0, 1, &[0.8, 0.0]), Some(0.0));
        assert!((c.antiderivative_self_partial(0, 1, &v).unwrap() - 2.0 * 1.7).abs() < 1e-15);
    }

    #[test]
    fn laplace_form_is_consistent_with_divergence_form() {
        // a_ij = δ_ij μ_i + v_i ∂_j μ_i, checked by finite differences of μ_i.
        let rates: Vec<Box<dyn DiffusionRates>> = vec![
            Box::new(skt2()),
            Box::new(PowerLawRates {
                d: [0.1, 0.2],
                d_matrix: [[0.3, 1.0], [0.7, 0.4]],
                alpha: 0.6,
                beta: 1.4,
            }),
        ];
        let v = [0.9, 1.6];
        for r in &rates {
            for i in 0..2 {
                for j in 0..2 {
                    let step = 1e-6;
                    let mut vp = v;
                    let mut vm = v;
                    vp[j] += step;
                    vm[j] -= step;
                    let dmu = (r.laplace_rate(i, &vp).unwrap() - r.laplace_rate(i, &vm).unwrap())
                        / (2.0 * step);
                    let expected =
                        if i == j { r.laplace_rate(i, &v).unwrap() } else { 0.0 } + v[i] * dmu;
                    assert!((expected - r.entry(i, j, &v)).abs() < 1e-7, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn power_law_antiderivative_matches_entry() {
        let r = PowerLawRates {
            d: [0.1, 0.2],
            d_matrix: [[0.3, 1.0], [0.7, 0.4]],
            alpha: 0.6,
            beta: 1.4,
        };
        let v = [0.9, 1.6];
        for (i, j) in [(0, 1), (1, 0)] {
            let step = 1e-6;
            let mut vp = v;
            let mut vm = v;
            vp[j] += step;
            vm[j] -= step;
            let fd = (r.antiderivative(i, j, &vp).unwrap() - r.antiderivative(i, j, &vm).unwrap())
                / (2.0 * step);
            assert!((fd - r.entry(i, j, &v)).abs() < 1e-7);
            let mut vi = v;
            vi[i] += step;
            let mut vim = v;
            vim[i] -= step;
            let fdi = (r.antiderivative(i, j, &vi).unwrap() - r.antiderivative(i, j, &vim).unwrap())
                / (2.0 * step);
            assert!((fdi - r.antiderivative_self_partial(i, j, &v).unwrap()).abs() < 1e-7);
        }
    }
}

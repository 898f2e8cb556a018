//! Per-component conditioning of a joint `[z, a]` mixture on the input block.
//!
//! Both predictors need, for every component, the marginal density of `z`
//! and the Gaussian conditional `a | z`:
//!
//! ```text
//! m_i(z) = μ_i^a + Σ_i^{az} (Σ_i^{zz})⁻¹ (z − μ_i^z)
//! s_i²   = Σ_i^{aa} − Σ_i^{az} (Σ_i^{zz})⁻¹ Σ_i^{za}
//! ```
//!
//! The output is always the last coordinate of the joint vector.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::model::GmmParams;

#[derive(Debug, Clone)]
pub struct ConditionalComponent {
    pub log_weight: f64,
    pub input: Gaussian,
    pub mean_z: Vec<f64>,
    pub mean_a: f64,
    /// Row vector `Σ^{az} (Σ^{zz})⁻¹`.
    pub gain: Vec<f64>,
    pub cond_var: f64,
}

impl ConditionalComponent {
    /// Conditional mean of the output given `z`.
    #[inline]
    pub fn regress(&self, z: &[f64]) -> f64 {
        let mut a = self.mean_a;
        for ((g, zi), mi) in self.gain.iter().zip(z).zip(&self.mean_z) {
            a += g * (zi - mi);
        }
        a
    }
}

/// A joint mixture prepared for conditioning on its input block.
#[derive(Debug, Clone)]
pub struct ConditionalGmm {
    components: Vec<ConditionalComponent>,
    input_dim: usize,
}

impl ConditionalGmm {
    pub fn new(params: &GmmParams) -> Result<Self> {
        let d = params.dim();
        if d < 2 {
            return Err(Error::invalid("conditioning needs at least one input and one output dimension"));
        }
        let q = d - 1;
        let mut components = Vec::with_capacity(params.n_components());
        for (i, ((w, mean), cov)) in params
            .weights()
            .iter()
            .zip(params.means())
            .zip(params.covariances())
            .enumerate()
        {
            let mean_z = DVector::from_iterator(q, mean.iter().take(q).copied());
            let s_zz = cov.view((0, 0), (q, q)).into_owned();
            let s_za = cov.view((0, q), (q, 1)).into_owned();
            let s_aa = cov[(q, q)];
            let chol = s_zz
                .clone()
                .cholesky()
                .ok_or_else(|| Error::fit(format!("component {i}: input covariance block is singular")))?;
            let solved: DMatrix<f64> = chol.solve(&s_za);
            let gain: Vec<f64> = solved.iter().copied().collect();
            let explained: f64 = gain.iter().zip(s_za.iter()).map(|(g, c)| g * c).sum();
            let cond_var = s_aa - explained;
            if !(cond_var > 0.0) {
                return Err(Error::fit(format!(
                    "component {i}: conditional output variance {cond_var} is not positive"
                )));
            }
            components.push(ConditionalComponent {
                log_weight: w.ln(),
                input: Gaussian::new(&mean_z, &s_zz)?,
                mean_z: mean_z.iter().copied().collect(),
                mean_a: mean[q],
                gain,
                cond_var,
            });
        }
        Ok(ConditionalGmm { components, input_dim: q })
    }

    pub fn components(&self) -> &[ConditionalComponent] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "input has dimension {}, model expects {}",
                z.len(),
                self.input_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input has non-finite components"));
        }
        Ok(())
    }

    /// `ln N(z; μ_i^z, Σ_i^{zz})` for every component.
    pub fn input_log_densities(&self, z: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.input.ln_pdf(z)).collect()
    }
}

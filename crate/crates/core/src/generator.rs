//! The parameter generator `θ = f(W z + b)`: an affine map from latent
//! codes to base-model parameters followed by per-dimension range
//! constraints.

use nalgebra::{DMatrix, DVector};

use crate::error::{MtdsError, Result};
use crate::numeric::{logit, sigmoid, softplus, softplus_inv};
use crate::types::LatentCode;

/// Elementwise range constraint applied to one parameter dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    Identity,
    /// ℝ → (0, 1)
    Logistic,
    /// ℝ → (0, ∞)
    Softplus,
}

impl Constraint {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Constraint::Identity => x,
            Constraint::Logistic => sigmoid(x),
            Constraint::Softplus => softplus(x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Constraint::Identity => 1.0,
            Constraint::Logistic => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Constraint::Softplus => sigmoid(x),
        }
    }

    /// Maps a value inside the constraint's range back to ℝ.
    pub fn inverse(self, y: f64) -> Result<f64> {
        match self {
            Constraint::Identity => Ok(y),
            Constraint::Logistic if y > 0.0 && y < 1.0 => Ok(logit(y)),
            Constraint::Softplus if y > 0.0 => Ok(softplus_inv(y)),
            _ => Err(MtdsError::invalid(
                "theta",
                format!("{y} outside the range of {}", self.name()),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Constraint::Identity => "identity",
            Constraint::Logistic => "logistic",
            Constraint::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Option<Constraint> {
        match s {
            "identity" => Some(Constraint::Identity),
            "logistic" => Some(Constraint::Logistic),
            "softplus" => Some(Constraint::Softplus),
            _ => None,
        }
    }
}

/// One constraint per parameter dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintSpec(pub Vec<Constraint>);

impl ConstraintSpec {
    pub fn identity(d: usize) -> Self {
        ConstraintSpec(vec![Constraint::Identity; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(&self, pre: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(pre.len(), pre.iter().zip(&self.0).map(|(&x, c)| c.apply(x)))
    }

    pub fn inverse(&self, theta: &[f64]) -> Result<DVector<f64>> {
        if theta.len() != self.len() {
            return Err(MtdsError::dim("theta", self.len(), theta.len()));
        }
        let v = theta
            .iter()
            .zip(&self.0)
            .map(|(&y, c)| c.inverse(y))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(v))
    }
}

impl std::ops::Index<usize> for ConstraintSpec {
    type Output = Constraint;
    fn index(&self, i: usize) -> &Constraint {
        &self.0[i]
    }
}

/// `h(z) = f(W z + b)` with `W ∈ ℝ^{d×k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGenerator {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub constraints: ConstraintSpec,
}

/// Gradients of a scalar objective with respect to the generator inputs.
#[derive(Debug, Clone)]
pub struct GeneratorGrad {
    pub d_z: DVector<f64>,
    pub d_w: DMatrix<f64>,
    pub d_b: DVector<f64>,
}

impl ParamGenerator {
    pub fn new(w: DMatrix<f64>, b: DVector<f64>, constraints: ConstraintSpec) -> Result<Self> {
        if w.nrows() != b.len() {
            return Err(MtdsError::dim("generator rows (b)", w.nrows(), b.len()));
        }
        if constraints.len() != b.len() {
            return Err(MtdsError::dim("constraint spec", b.len(), constraints.len()));
        }
        if w.ncols() == 0 {
            return Err(MtdsError::invalid("W", "latent dimension k must be at least 1"));
        }
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(MtdsError::invalid("generator", "non-finite entry"));
        }
        Ok(ParamGenerator { w, b, constraints })
    }

    /// A generator that ignores `z`: `W = 0`, so `h(z) = f(b)`.
    pub fn constant(b: DVector<f64>, k: usize, constraints: ConstraintSpec) -> Result<Self> {
        Self::new(DMatrix::zeros(b.len(), k), b, constraints)
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    pub fn pre_activation(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.k() {
            return Err(MtdsError::dim("latent code k", self.k(), z.len()));
        }
        Ok(&self.w * z + &self.b)
    }

    pub fn apply_vec(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.constraints.apply(&self.pre_activation(z)?))
    }

    pub fn apply(&self, z: &LatentCode) -> Result<DVector<f64>> {
        self.apply_vec(&z.0)
    }

    /// `θ⁰ = h(0)`.
    pub fn default_theta(&self) -> DVector<f64> {
        self.constraints.apply(&self.b)
    }

    /// Pulls a gradient with respect to `θ` back to `(z, W, b)`.
    pub fn backprop(&self, z: &DVector<f64>, d_theta: &DVector<f64>) -> Result<GeneratorGrad> {
        let pre = self.pre_activation(z)?;
        if d_theta.len() != self.d() {
            return Err(MtdsError::dim("d_theta", self.d(), d_theta.len()));
        }
        let d_pre = DVector::from_iterator(
            self.d(),
            pre.iter()
                .zip(d_theta.iter())
                .zip(&self.constraints.0)
                .map(|((&x, &g), c)| g * c.derivative(x)),
        );
        Ok(GeneratorGrad {
            d_z: self.w.transpose() * &d_pre,
            d_w: &d_pre * z.transpose(),
            d_b: d_pre,
        })
    }
}

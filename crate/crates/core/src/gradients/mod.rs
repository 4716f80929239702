//! Exact reverse-mode gradients of `log p(Y | U, h(z))` with respect to
//! the latent code, the generator, shared parameters and log-precisions,
//! plus a central finite-difference checker.

pub mod lds;
pub mod mtrnn;
pub mod pd;

use nalgebra::{DMatrix, DVector};

use crate::error::{MtdsError, Result};
use crate::generator::ParamGenerator;
use crate::models::{gaussian_loglik, BaseModel, NoisePrecision};
use crate::types::{LatentCode, SequenceRecord};

pub use mtrnn::Checkpointing;

#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// The log-likelihood itself.
    pub value: f64,
    pub d_z: DVector<f64>,
    pub d_w: DMatrix<f64>,
    pub d_b: DVector<f64>,
    pub d_shared: Vec<f64>,
    pub d_lognu: DVector<f64>,
}

/// Gradients with respect to θ directly (no generator).
#[derive(Debug, Clone)]
pub struct ThetaGradient {
    pub value: f64,
    pub d_theta: DVector<f64>,
    pub d_shared: Vec<f64>,
    pub d_lognu: DVector<f64>,
}

/// Log-likelihood with its gradients with respect to `Ŷ` and `ln ν`.
pub fn loglik_residual_grad(
    yhat: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    nu: &NoisePrecision,
) -> (f64, DMatrix<f64>, DVector<f64>) {
    let value = gaussian_loglik(yhat, y, mask, nu);
    let (t_len, n_y) = y.shape();
    let mut d_yhat = DMatrix::zeros(t_len, n_y);
    let mut d_lognu = DVector::zeros(n_y);
    for j in 0..n_y {
        let v = nu.nu[j];
        for t in 0..t_len {
            if mask[(t, j)] {
                let r = y[(t, j)] - yhat[(t, j)];
                d_yhat[(t, j)] = v * r;
                d_lognu[j] += 0.5 - 0.5 * v * r * r;
            }
        }
    }
    (value, d_yhat, d_lognu)
}

/// `(∂L/∂θ, ∂L/∂shared)` through the model's forward pass.
pub fn model_vjp(
    model: &BaseModel,
    shared: &[f64],
    theta: &[f64],
    u: &DMatrix<f64>,
    d_yhat: &DMatrix<f64>,
    checkpointing: Checkpointing,
) -> Result<(DVector<f64>, Vec<f64>)> {
    if shared.len() != model.n_shared() {
        return Err(MtdsError::dim("shared parameters", model.n_shared(), shared.len()));
    }
    match model {
        BaseModel::Lds(s) => Ok((lds::vjp(s, theta, u, d_yhat)?, Vec::new())),
        BaseModel::Pd(s) => Ok((pd::vjp(s, theta, u, d_yhat)?, Vec::new())),
        BaseModel::MtRnn(s) => mtrnn::vjp(s, shared, theta, u, d_yhat, checkpointing),
    }
}

fn check_record(model: &BaseModel, record: &SequenceRecord, nu: &NoisePrecision) -> Result<()> {
    if record.n_u() != model.n_u() {
        return Err(MtdsError::dim("record inputs", model.n_u(), record.n_u()));
    }
    if record.n_y() != model.n_y() {
        return Err(MtdsError::dim("record outputs", model.n_y(), record.n_y()));
    }
    if nu.len() != model.n_y() {
        return Err(MtdsError::dim("nu", model.n_y(), nu.len()));
    }
    Ok(())
}

/// Log-likelihood of a record at a given θ.
pub fn loglik_theta(
    model: &BaseModel,
    shared: &[f64],
    theta: &[f64],
    record: &SequenceRecord,
    nu: &NoisePrecision,
) -> Result<f64> {
    check_record(model, record, nu)?;
    let yhat = model.simulate(shared, theta, &record.u)?;
    Ok(gaussian_loglik(&yhat, &record.y, &record.mask, nu))
}

/// Log-likelihood and its gradient with respect to θ, shared and `ln ν`.
pub fn loglik_theta_grad(
    model: &BaseModel,
    shared: &[f64],
    theta: &[f64],
    record: &SequenceRecord,
    nu: &NoisePrecision,
) -> Result<ThetaGradient> {
    check_record(model, record, nu)?;
    let yhat = model.simulate(shared, theta, &record.u)?;
    let (value, d_yhat, d_lognu) = loglik_residual_grad(&yhat, &record.y, &record.mask, nu);
    let (d_theta, d_shared) = model_vjp(model, shared, theta, &record.u, &d_yhat, Checkpointing::Full)?;
    Ok(ThetaGradient {
        value,
        d_theta,
        d_shared,
        d_lognu,
    })
}

/// `log p(Y | U, h(z))` with exact gradients with respect to
/// `(z, W, b, shared, ln ν)`.
pub fn loglik_and_grad(
    model: &BaseModel,
    shared: &[f64],
    gen: &ParamGenerator,
    z: &LatentCode,
    record: &SequenceRecord,
    nu: &NoisePrecision,
) -> Result<GradientBundle> {
    if gen.d() != model.n_params() {
        return Err(MtdsError::dim("generator output", model.n_params(), gen.d()));
    }
    let theta = gen.apply(z)?;
    let g = loglik_theta_grad(model, shared, theta.as_slice(), record, nu)?;
    let back = gen.backprop(&z.0, &g.d_theta)?;
    Ok(GradientBundle {
        value: g.value,
        d_z: back.d_z,
        d_w: back.d_w,
        d_b: back.d_b,
        d_shared: g.d_shared,
        d_lognu: g.d_lognu,
    })
}

/// `(z, W, b, shared, ln ν)` as separate arrays.
pub type JointParts = (DVector<f64>, DMatrix<f64>, DVector<f64>, Vec<f64>, DVector<f64>);

/// Packing of `(z, W, b, shared, ln ν)` into one flat vector, `W` row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointLayout {
    pub k: usize,
    pub d: usize,
    pub n_shared: usize,
    pub n_y: usize,
}

impl JointLayout {
    pub fn for_model(model: &BaseModel, k: usize) -> Self {
        JointLayout {
            k,
            d: model.n_params(),
            n_shared: model.n_shared(),
            n_y: model.n_y(),
        }
    }

    pub fn len(&self) -> usize {
        self.k + self.d * self.k + self.d + self.n_shared + self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, z: &DVector<f64>, gen: &ParamGenerator, shared: &[f64], log_nu: &DVector<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(z.iter());
        for r in 0..self.d {
            for c in 0..self.k {
                out.push(gen.w[(r, c)]);
            }
        }
        out.extend(gen.b.iter());
        out.extend_from_slice(shared);
        out.extend(log_nu.iter());
        out
    }

    pub fn pack_bundle(&self, g: &GradientBundle) -> Vec<f64> {
        let gen_like = ParamGenerator {
            w: g.d_w.clone(),
            b: g.d_b.clone(),
            constraints: crate::generator::ConstraintSpec::identity(self.d),
        };
        self.pack(&g.d_z, &gen_like, &g.d_shared, &g.d_lognu)
    }

    /// Returns `(z, W, b, shared, ln ν)`.
    pub fn unpack(&self, x: &[f64]) -> JointParts {
        let mut off = 0;
        let z = DVector::from_column_slice(&x[off..off + self.k]);
        off += self.k;
        let w = DMatrix::from_row_slice(self.d, self.k, &x[off..off + self.d * self.k]);
        off += self.d * self.k;
        let b = DVector::from_column_slice(&x[off..off + self.d]);
        off += self.d;
        let shared = x[off..off + self.n_shared].to_vec();
        off += self.n_shared;
        let log_nu = DVector::from_column_slice(&x[off..off + self.n_y]);
        (z, w, b, shared, log_nu)
    }
}

/// The log-likelihood as a function of the flat joint vector, returning
/// the value and its analytic gradient.
pub fn joint_loglik(
    model: &BaseModel,
    layout: &JointLayout,
    record: &SequenceRecord,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (z, w, b, shared, log_nu) = layout.unpack(x);
    let gen = ParamGenerator::new(w, b, model.constraints())?;
    let nu = NoisePrecision::from_log(&log_nu)?;
    let g = loglik_and_grad(model, &shared, &gen, &LatentCode(z), record, &nu)?;
    Ok((g.value, layout.pack_bundle(&g)))
}

/// Largest relative discrepancy between the analytic gradient returned by
/// `f` at `x0` and central differences with step `h`:
/// `|a − c| / max(|a|, |c|, 1e−8)` over all coordinates.
pub fn finite_diff_check<F>(f: F, x0: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x0);
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x).0;
        x[i] = x0[i] - h;
        let fm = f(&x).0;
        x[i] = x0[i];
        let central = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(central.abs()).max(1e-8);
        let rel = (analytic[i] - central).abs() / denom;
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    worst
}

/// Finite-difference check of [`joint_loglik`] on a random instance:
/// loadings and offsets near the model's default, `z ∈ [−1, 1]ᵏ`, inputs on
/// `[0, 3]`, outputs on `[−1, 2]` with about 10% of entries missing.
pub fn random_instance_check(model: &BaseModel, k: usize, t_len: usize, seed: u64, h: f64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let layout = JointLayout::for_model(model, k);
    let c = model.constraints();
    let b0 = c.inverse(model.default_theta(&vec![0.5; model.n_y()]).as_slice())?;
    let w = DMatrix::from_fn(model.n_params(), k, |_, _| rng.random_range(-0.3..0.3));
    let b = b0.map(|v| v + rng.random_range(-0.2..0.2));
    let gen = ParamGenerator::new(w, b, c)?;
    let z = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    let shared = model.init_shared(&mut rng);
    let log_nu = DVector::from_fn(model.n_y(), |_, _| rng.random_range(-0.5..1.0));
    let u = DMatrix::from_fn(t_len, model.n_u(), |_, _| rng.random_range(0.0..3.0));
    let y = DMatrix::from_fn(t_len, model.n_y(), |_, _| rng.random_range(-1.0..2.0));
    let mask = DMatrix::from_fn(t_len, model.n_y(), |_, _| rng.random_bool(0.9));
    let rec = SequenceRecord::new("check", u, y, mask)?;
    let x0 = layout.pack(&z, &gen, &shared, &log_nu);
    joint_loglik(model, &layout, &rec, &x0)?;
    Ok(finite_diff_check(
        |x| joint_loglik(model, &layout, &rec, x).unwrap_or((f64::NAN, vec![f64::NAN; x.len()])),
        &x0,
        h,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::ConstraintSpec;
    use crate::models::{LdsSpec, MtRnnSpec, PdSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(model: &BaseModel, t_len: usize, rng: &mut ChaCha8Rng) -> SequenceRecord {
        let u = DMatrix::from_fn(t_len, model.n_u(), |_, _| rng.random_range(0.0..3.0));
        let y = DMatrix::from_fn(t_len, model.n_y(), |_, _| rng.random_range(-1.0..2.0));
        let mask = DMatrix::from_fn(t_len, model.n_y(), |_, _| rng.random_bool(0.9));
        SequenceRecord::new("r", u, y, mask).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| {
            let v = x.iter().map(|a| a * a).sum::<f64>();
            (v, x.iter().map(|a| 2.0 * a).collect())
        };
        let err = finite_diff_check(f, &[0.3, -1.7, 4.0, 0.0], 1e-5);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn checker_detects_wrong_gradient() {
        let f = |x: &[f64]| (x[0] * x[0], vec![3.0 * x[0]]);
        assert!(finite_diff_check(f, &[1.0], 1e-5) > 0.1);
    }

    #[test]
    fn zero_residual_stationarity() {
        let model = BaseModel::Pd(PdSpec::standard(2));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = model.constraints();
        let b = c.inverse(model.default_theta(&[1.0, 0.5]).as_slice()).unwrap();
        let w = DMatrix::from_fn(model.n_params(), 2, |_, _| rng.random_range(-0.3..0.3));
        let gen = ParamGenerator::new(w, b, c).unwrap();
        let z = LatentCode::from_slice(&[0.4, -0.8]).unwrap();
        let u = DMatrix::from_fn(20, 1, |_, _| rng.random_range(0.0..3.0));
        let theta = gen.apply(&z).unwrap();
        let y = model.simulate(&[], theta.as_slice(), &u).unwrap();
        let rec = SequenceRecord::complete("a", u, y).unwrap();
        let nu = NoisePrecision::uniform(2, 4.0).unwrap();
        let g = loglik_and_grad(&model, &[], &gen, &z, &rec, &nu).unwrap();
        assert!(g.d_z.amax() == 0.0);
        assert!(g.d_w.amax() == 0.0);
        assert!(g.d_b.amax() == 0.0);
        // 20 observations per channel, each contributing ½
        assert!((g.d_lognu[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn pd_gradient_in_z_matches_differences() {
        let model = BaseModel::Pd(PdSpec::standard(3));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = model.constraints();
        let b = c.inverse(model.default_theta(&[1.0, 0.5, -0.2]).as_slice()).unwrap();
        let w = DMatrix::from_fn(model.n_params(), 1, |_, _| rng.random_range(-0.5..0.5));
        let gen = ParamGenerator::new(w, b, c).unwrap();
        let rec = record(&model, 30, &mut rng);
        let nu = NoisePrecision::uniform(3, 2.0).unwrap();
        let f = |x: &[f64]| {
            let z = LatentCode::from_slice(x).unwrap();
            let g = loglik_and_grad(&model, &[], &gen, &z, &rec, &nu).unwrap();
            (g.value, g.d_z.as_slice().to_vec())
        };
        let err = finite_diff_check(f, &[0.35], 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    fn joint_check(model: &BaseModel, k: usize, t_len: usize, seed: u64) -> f64 {
        random_instance_check(model, k, t_len, seed, 1e-5).unwrap()
    }

    #[test]
    fn lds_joint_gradient() {
        let model = BaseModel::Lds(LdsSpec::new(3, 2, 2).unwrap());
        for seed in 0..3 {
            let err = joint_check(&model, 2, 25, seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn pd_joint_gradient() {
        let model = BaseModel::Pd(PdSpec::standard(2));
        for seed in 0..3 {
            let err = joint_check(&model, 2, 25, seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn mtrnn_joint_gradient() {
        let model = BaseModel::MtRnn(MtRnnSpec::new(2, 2, 3, 2, 3).unwrap());
        for seed in 0..3 {
            let err = joint_check(&model, 2, 10, seed);
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn checkpointing_does_not_change_gradients() {
        let spec = MtRnnSpec::new(2, 2, 4, 2, 3).unwrap();
        let model = BaseModel::MtRnn(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let shared = model.init_shared(&mut rng);
        let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let u = DMatrix::from_fn(37, 2, |_, _| rng.random_range(-1.0..1.0));
        let dy = DMatrix::from_fn(37, 2, |_, _| rng.random_range(-1.0..1.0));
        let (t_full, s_full) = model_vjp(&model, &shared, &theta, &u, &dy, Checkpointing::Full).unwrap();
        for stride in [2, 5, 8, 37, 100] {
            let (t_ck, s_ck) = model_vjp(&model, &shared, &theta, &u, &dy, Checkpointing::Every(stride)).unwrap();
            assert!((&t_full - &t_ck).amax() < 1e-12);
            let ds = s_full.iter().zip(&s_ck).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(ds < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let model = BaseModel::Pd(PdSpec::standard(2));
        let gen = ParamGenerator::constant(DVector::zeros(5), 1, ConstraintSpec::identity(5)).unwrap();
        let rec = SequenceRecord::complete("a", DMatrix::zeros(3, 1), DMatrix::zeros(3, 2)).unwrap();
        let nu = NoisePrecision::uniform(2, 1.0).unwrap();
        assert!(loglik_and_grad(&model, &[], &gen, &LatentCode::zeros(1), &rec, &nu).is_err());
    }
}

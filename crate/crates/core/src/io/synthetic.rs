//! Synthetic sequence families with known latent codes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MtdsError, Result};
use crate::generator::ParamGenerator;
use crate::io::tables::TruthRow;
use crate::models::{BaseModel, LdsSpec, NoisePrecision, PdSpec};
use crate::numeric::logit;
use crate::types::{LatentCode, SequenceDataset, SequenceRecord};

/// Input process shared by every sequence in a family.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSpec {
    /// Piecewise-constant schedule alternating `high` and `low`, starting
    /// high, with block lengths uniform on `min_len..=max_len`.
    Pulses {
        high: f64,
        low: f64,
        min_len: usize,
        max_len: usize,
    },
    /// `amplitude` at `t = 0`, zero afterwards.
    Impulse { amplitude: f64 },
    /// IID `N(0, sd²)`.
    Noise { sd: f64 },
}

impl InputSpec {
    pub fn name(&self) -> &'static str {
        match self {
            InputSpec::Pulses { .. } => "pulses",
            InputSpec::Impulse { .. } => "impulse",
            InputSpec::Noise { .. } => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<InputSpec> {
        match s {
            "pulses" => Some(InputSpec::default_pulses()),
            "impulse" => Some(InputSpec::Impulse { amplitude: 1.0 }),
            "noise" => Some(InputSpec::Noise { sd: 1.0 }),
            _ => None,
        }
    }

    pub fn default_pulses() -> InputSpec {
        InputSpec::Pulses {
            high: 1.0,
            low: 0.0,
            min_len: 8,
            max_len: 20,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, t_len: usize, n_u: usize, rng: &mut R) -> DMatrix<f64> {
        let mut u = DMatrix::zeros(t_len, n_u);
        match *self {
            InputSpec::Pulses {
                high,
                low,
                min_len,
                max_len,
            } => {
                for c in 0..n_u {
                    let (mut t, mut on) = (0, true);
                    while t < t_len {
                        let len = rng.random_range(min_len..=max_len);
                        for s in t..(t + len).min(t_len) {
                            u[(s, c)] = if on { high } else { low };
                        }
                        t += len;
                        on = !on;
                    }
                }
            }
            InputSpec::Impulse { amplitude } => {
                if t_len > 0 {
                    u.row_mut(0).fill(amplitude);
                }
            }
            InputSpec::Noise { sd } => u
                .iter_mut()
                .for_each(|v| *v = sd * rng.sample::<f64, _>(StandardNormal)),
        }
        u
    }
}

/// Distribution of the generating latent codes.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentSpec {
    Standard,
    /// `z = ±(separation/2)·e₁ + spread·ε` with the sign drawn uniformly.
    TwoCluster {
        separation: f64,
        spread: f64,
    },
}

impl LatentSpec {
    fn draw<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        let eps = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        match *self {
            LatentSpec::Standard => eps,
            LatentSpec::TwoCluster { separation, spread } => {
                let mut z = eps * spread;
                if k > 0 {
                    z[0] += if rng.random_bool(0.5) { 0.5 } else { -0.5 } * separation;
                }
                z
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamilySpec {
    pub model: BaseModel,
    /// True generator; its latent dimension is the family's `k*`.
    pub generator: ParamGenerator,
    pub shared: Vec<f64>,
    pub nu: NoisePrecision,
    pub n: usize,
    pub t: usize,
    pub input: InputSpec,
    pub latent: LatentSpec,
}

impl SyntheticFamilySpec {
    /// PD family with `n_y` responses to a pulsed dose. Latent column `c`
    /// loads, by `c mod 3`: the offsets α; the sensitivity (β3 and β2);
    /// the effect-site decay β1.
    pub fn pd(k: usize, n_y: usize, n: usize, t: usize, nu: f64) -> Result<Self> {
        let spec = PdSpec::new(n_y, PdSpec::standard(n_y).a, PdSpec::standard(n_y).b)?;
        let d = spec.n_params();
        let mut b = DVector::zeros(d);
        for j in 0..n_y {
            b[spec.alpha_index(j)] = 0.5 * j as f64;
            b[spec.beta1_index(j)] = logit(0.9);
            b[spec.beta2_index(j)] = crate::numeric::softplus_inv(0.5);
            b[spec.beta3_index(j)] = 0.0;
            for r in 0..spec.basis_size() {
                b[spec.eta_index(j, r)] = crate::numeric::softplus_inv(0.25);
            }
        }
        let mut w = DMatrix::zeros(d, k);
        for c in 0..k {
            let scale = 0.5f64.powi((c / 3) as i32);
            for j in 0..n_y {
                match c % 3 {
                    0 => w[(spec.alpha_index(j), c)] = 0.5 * scale,
                    1 => {
                        w[(spec.beta3_index(j), c)] = 1.0 * scale;
                        w[(spec.beta2_index(j), c)] = 0.3 * scale;
                    }
                    _ => w[(spec.beta1_index(j), c)] = 0.5 * scale,
                }
            }
        }
        let model = BaseModel::Pd(spec);
        Ok(SyntheticFamilySpec {
            generator: ParamGenerator::new(w, b, model.constraints())?,
            shared: Vec::new(),
            nu: NoisePrecision::uniform(n_y, nu)?,
            n,
            t,
            input: InputSpec::default_pulses(),
            latent: LatentSpec::Standard,
            model,
        })
    }

    /// One-output damped oscillator (`n_x = 2`) at radius 0.97 and base
    /// frequency 0.6 rad/step. Latent column 0 shifts the frequency by
    /// 0.1 rad per unit, column 1 the output offset, later columns the
    /// output loadings.
    pub fn lds(k: usize, n: usize, t: usize, nu: f64) -> Result<Self> {
        let spec = LdsSpec::new(2, 1, 1)?;
        let d = spec.n_params();
        let mut b = DVector::zeros(d);
        b[0] = logit(0.97 / crate::models::lds::RADIUS_CAP);
        b[1] = 0.6;
        b[spec.b_offset()] = 1.0;
        b[spec.b_offset() + 1] = 0.5;
        b[spec.c_offset()] = 0.8;
        b[spec.c_offset() + 1] = 0.4;
        let mut w = DMatrix::zeros(d, k);
        for c in 0..k {
            match c {
                0 => w[(1, c)] = 0.1,
                1 => w[(spec.d_offset(), c)] = 0.5,
                _ => w[(spec.c_offset() + c % 2, c)] = 0.2,
            }
        }
        let model = BaseModel::Lds(spec);
        Ok(SyntheticFamilySpec {
            generator: ParamGenerator::new(w, b, model.constraints())?,
            shared: Vec::new(),
            nu: NoisePrecision::uniform(1, nu)?,
            n,
            t,
            input: InputSpec::Noise { sd: 1.0 },
            latent: LatentSpec::Standard,
            model,
        })
    }

    pub fn k(&self) -> usize {
        self.generator.k()
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator.d() != self.model.n_params() {
            return Err(MtdsError::dim(
                "generator rows",
                self.model.n_params(),
                self.generator.d(),
            ));
        }
        if self.generator.constraints != self.model.constraints() {
            return Err(MtdsError::invalid(
                "generator",
                "constraints differ from the base model's",
            ));
        }
        if self.shared.len() != self.model.n_shared() {
            return Err(MtdsError::dim(
                "shared parameters",
                self.model.n_shared(),
                self.shared.len(),
            ));
        }
        if self.nu.len() != self.model.n_y() {
            return Err(MtdsError::dim("noise precisions", self.model.n_y(), self.nu.len()));
        }
        if self.n == 0 || self.t == 0 {
            return Err(MtdsError::invalid("family", "n and t must be positive"));
        }
        if let InputSpec::Pulses { min_len, max_len, .. } = self.input {
            if min_len == 0 || min_len > max_len {
                return Err(MtdsError::invalid("pulses", "need 0 < min_len ≤ max_len"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: SequenceDataset,
    pub z: Vec<DVector<f64>>,
    pub theta: Vec<DVector<f64>>,
}

impl SyntheticData {
    pub fn truth_rows(&self) -> Vec<TruthRow> {
        self.dataset
            .sequences
            .iter()
            .zip(self.z.iter().zip(&self.theta))
            .map(|(r, (z, th))| TruthRow {
                seq_id: r.seq_id.clone(),
                z: z.clone(),
                theta: th.clone(),
            })
            .collect()
    }
}

/// Draws `z*ᵢ`, sets `θ*ᵢ = h*(z*ᵢ)` and simulates with Gaussian noise.
/// Sequence `i` uses its own stream, so it does not depend on `n`.
pub fn generate_synthetic(spec: &SyntheticFamilySpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let sd = spec.nu.std();
    let width = spec.n.saturating_sub(1).to_string().len().max(3);
    let mut sequences = Vec::with_capacity(spec.n);
    let mut zs = Vec::with_capacity(spec.n);
    let mut thetas = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let z = spec.latent.draw(spec.k(), &mut rng);
        let theta = spec.generator.apply(&LatentCode(z.clone()))?;
        let u = spec.input.draw(spec.t, spec.model.n_u(), &mut rng);
        let mut y = spec.model.simulate(&spec.shared, theta.as_slice(), &u)?;
        for t in 0..spec.t {
            for c in 0..y.ncols() {
                y[(t, c)] += sd[c] * rng.sample::<f64, _>(StandardNormal);
            }
        }
        sequences.push(SequenceRecord::complete(format!("seq{i:0width$}"), u, y)?);
        zs.push(z);
        thetas.push(theta);
    }
    Ok(SyntheticData {
        dataset: SequenceDataset::new(sequences, spec.model.n_u(), spec.model.n_y())?,
        z: zs,
        theta: thetas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::tables::write_sequences;
    use rustfft::{num_complex::Complex, FftPlanner};

    #[test]
    fn near_noiseless_data_matches_simulation() {
        for spec in [
            SyntheticFamilySpec::pd(2, 2, 4, 60, 1e9).unwrap(),
            SyntheticFamilySpec::lds(2, 4, 60, 1e9).unwrap(),
        ] {
            let data = generate_synthetic(&spec, 3).unwrap();
            for (rec, th) in data.dataset.sequences.iter().zip(&data.theta) {
                let clean = spec.model.simulate(&spec.shared, th.as_slice(), &rec.u).unwrap();
                assert!((&rec.y - clean).amax() < 1e-3);
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let spec = SyntheticFamilySpec::pd(2, 1, 5, 40, 100.0).unwrap();
        let bytes = |seed| {
            let mut buf = Vec::new();
            write_sequences(&mut buf, &generate_synthetic(&spec, seed).unwrap().dataset).unwrap();
            buf
        };
        assert_eq!(bytes(1), bytes(1));
        assert_ne!(bytes(1), bytes(2));
    }

    #[test]
    fn truth_follows_the_generator() {
        let mut spec = SyntheticFamilySpec::pd(3, 1, 6, 10, 10.0).unwrap();
        spec.latent = LatentSpec::TwoCluster {
            separation: 4.0,
            spread: 0.1,
        };
        let data = generate_synthetic(&spec, 0).unwrap();
        for (z, th) in data.z.iter().zip(&data.theta) {
            assert!((z[0].abs() - 2.0).abs() < 0.5);
            assert_eq!(th, &spec.generator.apply(&LatentCode(z.clone())).unwrap());
        }
        // prefix property: the first sequences do not depend on n
        spec.n = 3;
        let fewer = generate_synthetic(&spec, 0).unwrap();
        assert_eq!(fewer.dataset.sequences[..], data.dataset.sequences[..3]);
    }

    #[test]
    fn pulses_alternate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = InputSpec::default_pulses().draw(100, 1, &mut rng);
        assert_eq!(u[(0, 0)], 1.0);
        let switches = (1..100).filter(|&t| u[(t, 0)] != u[(t - 1, 0)]).count();
        assert!((4..=12).contains(&switches), "{switches}");
        assert!(u.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticFamilySpec::lds(1, 2, 10, 1.0).unwrap();
        spec.n = 0;
        assert!(generate_synthetic(&spec, 0).is_err());
        let mut spec = SyntheticFamilySpec::lds(1, 2, 10, 1.0).unwrap();
        spec.input = InputSpec::Pulses {
            high: 1.0,
            low: 0.0,
            min_len: 5,
            max_len: 2,
        };
        assert!(spec.validate().is_err());
    }

    /// Peak bin of the one-sided magnitude spectrum, excluding DC.
    fn dominant_bin(x: &[f64]) -> usize {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        (1..x.len() / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap()
    }

    #[test]
    fn latent_shifts_the_oscillation_frequency() {
        let n_fft = 1024;
        let mut spec = SyntheticFamilySpec::lds(1, 1, n_fft, 1e9).unwrap();
        spec.input = InputSpec::Impulse { amplitude: 1.0 };
        let run = |z: f64| {
            let th = spec.generator.apply(&LatentCode(DVector::from_vec(vec![z]))).unwrap();
            let u = spec.input.draw(n_fft, 1, &mut ChaCha8Rng::seed_from_u64(0));
            let y = spec.model.simulate(&[], th.as_slice(), &u).unwrap();
            let mean = y.mean();
            dominant_bin(&y.column(0).iter().map(|v| v - mean).collect::<Vec<_>>())
        };
        let (lo, hi) = (run(-2.0), run(2.0));
        // ω = 0.6 ± 0.2 rad/step
        let expected = 0.4 / (2.0 * std::f64::consts::PI) * n_fft as f64;
        assert!((((hi - lo) as f64) - expected).abs() <= 1.5, "{lo} {hi} {expected}");
        let centre = 0.6 / (2.0 * std::f64::consts::PI) * n_fft as f64;
        assert!(((hi + lo) as f64 / 2.0 - centre).abs() <= 1.5);
    }
}

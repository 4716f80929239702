//! Randomly shifted Sobol points mapped to standard normals.

use rand::Rng;
use sobol::params::JoeKuoD6;
use sobol::Sobol;
use statrs::distribution::{ContinuousCDF, Normal};

const MANTISSA: f64 = (1u64 << 53) as f64;

/// A Sobol sequence in `dims` dimensions with a random digital shift
/// (XOR of every coordinate's 53-bit expansion with a fixed random word).
/// Outputs lie strictly inside `(0, 1)`.
pub struct ScrambledSobol {
    seq: Sobol<f64>,
    shift: Vec<u64>,
}

impl ScrambledSobol {
    pub fn new<R: Rng + ?Sized>(dims: usize, rng: &mut R) -> Self {
        let params = JoeKuoD6::minimal();
        let shift = (0..dims).map(|_| rng.random::<u64>() >> 11).collect();
        ScrambledSobol {
            seq: Sobol::<f64>::new(dims, &params),
            shift,
        }
    }

    pub fn dims(&self) -> usize {
        self.shift.len()
    }

    /// The next point in `(0, 1)^dims`.
    pub fn next_uniform(&mut self) -> Vec<f64> {
        let point = self.seq.next().expect("sequence length exceeds 2^53");
        point
            .iter()
            .zip(&self.shift)
            .map(|(&u, &s)| {
                let bits = (u * MANTISSA) as u64 ^ s;
                (bits as f64 + 0.5) / MANTISSA
            })
            .collect()
    }

    /// The first coordinate as a uniform, the rest mapped through the
    /// standard normal quantile function.
    pub fn next_uniform_and_normals(&mut self) -> (f64, Vec<f64>) {
        let u = self.next_uniform();
        let n = Normal::standard();
        (u[0], u[1..].iter().map(|&p| n.inverse_cdf(p)).collect())
    }
}

//! Fixtures shared by the kernel benchmarks.

use mtds_core::io::{generate_synthetic, InputSpec, LatentSpec, SyntheticFamilySpec};
use mtds_core::models::MtRnnSpec;
use mtds_core::{BaseModel, LatentCode, NoisePrecision, ParamGenerator, SequenceRecord};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One synthetic sequence together with the family that generated it.
pub struct Fixture {
    pub model: BaseModel,
    pub generator: ParamGenerator,
    pub shared: Vec<f64>,
    pub nu: NoisePrecision,
    pub record: SequenceRecord,
    pub z: LatentCode,
}

impl Fixture {
    fn from_family(spec: SyntheticFamilySpec, seed: u64) -> Fixture {
        let mut data = generate_synthetic(&spec, seed).expect("family generates");
        Fixture {
            model: spec.model,
            generator: spec.generator,
            shared: spec.shared,
            nu: spec.nu,
            record: data.dataset.sequences.remove(0),
            z: LatentCode(data.z.remove(0)),
        }
    }

    /// Two-compartment PD family, `k = 2`.
    pub fn pd(t: usize) -> Fixture {
        Fixture::from_family(SyntheticFamilySpec::pd(2, 1, 1, t, 25.0).expect("valid"), 1)
    }

    /// Second-order LDS family, `k = 2`.
    pub fn lds(t: usize) -> Fixture {
        Fixture::from_family(SyntheticFamilySpec::lds(2, 1, t, 25.0).expect("valid"), 2)
    }

    /// Full-width MT-RNN with random shared weights and a small random
    /// generator around the default offsets.
    pub fn mtrnn(t: usize) -> Fixture {
        let model = BaseModel::MtRnn(MtRnnSpec::toy(1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = model.n_params();
        let w = DMatrix::from_fn(d, 2, |_, _| 0.1 * rng.random_range(-1.0..1.0));
        let b = model.default_theta(&[0.0]);
        let spec = SyntheticFamilySpec {
            generator: ParamGenerator::new(w, b, model.constraints()).expect("valid"),
            shared: model.init_shared(&mut rng),
            nu: NoisePrecision::uniform(1, 25.0).expect("positive"),
            model,
            n: 1,
            t,
            input: InputSpec::default_pulses(),
            latent: LatentSpec::Standard,
        };
        Fixture::from_family(spec, 3)
    }

    pub fn theta(&self) -> DVector<f64> {
        self.generator.apply(&self.z).expect("generator applies")
    }
}

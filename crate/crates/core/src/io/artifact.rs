//! Single-file model artifact.
//!
//! ```text
//! mtdskit-v1 <kind> k=<k> d=<d>
//! spec <key>=<value> ...
//! matrix <label> <rows> <cols>
//! <rows lines of cols values>
//! constraints <d>
//! <d names>
//! ```
//!
//! Values use the shortest round-trip decimal form, so reading an
//! artifact reproduces every `f64` bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{MtdsError, Result};
use crate::generator::{Constraint, ConstraintSpec, ParamGenerator};
use crate::learning::TrainState;
use crate::models::{BaseModel, LdsSpec, ModelKind, MtRnnSpec, NoisePrecision, PdSpec};

pub const ARTIFACT_VERSION: &str = "mtdskit-v1";

/// Everything needed to filter and forecast with a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub model: BaseModel,
    pub generator: ParamGenerator,
    pub shared: Vec<f64>,
    pub nu: NoisePrecision,
}

impl ModelArtifact {
    pub fn new(model: BaseModel, generator: ParamGenerator, shared: Vec<f64>, nu: NoisePrecision) -> Result<Self> {
        if generator.d() != model.n_params() {
            return Err(MtdsError::dim("generator rows", model.n_params(), generator.d()));
        }
        if shared.len() != model.n_shared() {
            return Err(MtdsError::dim("shared parameters", model.n_shared(), shared.len()));
        }
        if nu.len() != model.n_y() {
            return Err(MtdsError::dim("noise precisions", model.n_y(), nu.len()));
        }
        Ok(ModelArtifact {
            model,
            generator,
            shared,
            nu,
        })
    }

    pub fn from_state(state: &TrainState) -> Result<Self> {
        Self::new(
            state.model.clone(),
            state.gen.clone(),
            state.shared.clone(),
            state.nu()?,
        )
    }

    pub fn k(&self) -> usize {
        self.generator.k()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{ARTIFACT_VERSION} {} k={} d={}",
            self.model.kind().name(),
            self.generator.k(),
            self.generator.d()
        );
        match &self.model {
            BaseModel::Lds(m) => {
                let _ = writeln!(s, "spec n_x={} n_u={} n_y={}", m.n_x, m.n_u, m.n_y);
            }
            BaseModel::Pd(m) => {
                let _ = writeln!(s, "spec n_y={}", m.n_y);
                write_matrix(&mut s, "pd_a", &DMatrix::from_row_slice(1, m.a.len(), &m.a));
                write_matrix(&mut s, "pd_b", &DMatrix::from_row_slice(1, m.b.len(), &m.b));
            }
            BaseModel::MtRnn(m) => {
                let _ = writeln!(
                    s,
                    "spec n_u={} n_y={} n1={} ell={} n2={}",
                    m.n_u, m.n_y, m.n1, m.ell, m.n2
                );
            }
        }
        write_matrix(&mut s, "W", &self.generator.w);
        write_matrix(
            &mut s,
            "b",
            &DMatrix::from_column_slice(self.generator.b.len(), 1, self.generator.b.as_slice()),
        );
        let names: Vec<&str> = self.generator.constraints.0.iter().map(|c| c.name()).collect();
        let _ = writeln!(s, "constraints {}", names.len());
        let _ = writeln!(s, "{}", names.join(" "));
        write_matrix(
            &mut s,
            "shared",
            &DMatrix::from_column_slice(self.shared.len(), 1, &self.shared),
        );
        write_matrix(
            &mut s,
            "nu",
            &DMatrix::from_column_slice(self.nu.len(), 1, self.nu.nu.as_slice()),
        );
        s
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut p = Lines::new(text, name);
        let (line, header) = p.next_line()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != ARTIFACT_VERSION {
            return Err(p.err(line, format!("expected `{ARTIFACT_VERSION} <kind> k=<k> d=<d>`")));
        }
        let kind =
            ModelKind::parse(parts[1]).ok_or_else(|| p.err(line, format!("unknown model kind `{}`", parts[1])))?;
        let k = p.key_usize(line, parts[2], "k")?;
        let d = p.key_usize(line, parts[3], "d")?;

        let (line, spec) = p.next_line()?;
        let kv = p.spec_fields(line, spec)?;
        let field = |key: &str| {
            kv.get(key)
                .copied()
                .ok_or_else(|| MtdsError::parse(name, line, format!("spec is missing `{key}`")))
        };
        let model = match kind {
            ModelKind::Lds => BaseModel::Lds(
                LdsSpec::new(field("n_x")?, field("n_u")?, field("n_y")?).map_err(|e| p.err(line, e.to_string()))?,
            ),
            ModelKind::Pd => {
                let n_y = field("n_y")?;
                let a = p.matrix("pd_a")?;
                let b = p.matrix("pd_b")?;
                BaseModel::Pd(
                    PdSpec::new(n_y, a.as_slice().to_vec(), b.as_slice().to_vec())
                        .map_err(|e| p.err(line, e.to_string()))?,
                )
            }
            ModelKind::MtRnn => BaseModel::MtRnn(
                MtRnnSpec::new(field("n_u")?, field("n_y")?, field("n1")?, field("ell")?, field("n2")?)
                    .map_err(|e| p.err(line, e.to_string()))?,
            ),
        };
        if model.n_params() != d {
            return Err(p.err(1, format!("d = {d} but the model has {} parameters", model.n_params())));
        }

        let w = p.matrix_shaped("W", d, k)?;
        let b = p.matrix_shaped("b", d, 1)?;
        let (line, c_head) = p.next_line()?;
        let n_c = match c_head.split_whitespace().collect::<Vec<_>>()[..] {
            ["constraints", n] => n.parse::<usize>().map_err(|_| p.err(line, "bad constraint count"))?,
            _ => return Err(p.err(line, "expected `constraints <d>`")),
        };
        if n_c != d {
            return Err(p.err(line, format!("expected {d} constraints, found {n_c}")));
        }
        let constraints = if d == 0 {
            Vec::new()
        } else {
            let (line, names) = p.next_line()?;
            let cs: Vec<Constraint> = names
                .split_whitespace()
                .map(|n| Constraint::parse(n).ok_or_else(|| p.err(line, format!("unknown constraint `{n}`"))))
                .collect::<Result<_>>()?;
            if cs.len() != d {
                return Err(p.err(line, format!("expected {d} constraints, found {}", cs.len())));
            }
            cs
        };
        let b_line = p.line;
        let generator = ParamGenerator::new(w, DVector::from_column_slice(b.as_slice()), ConstraintSpec(constraints))
            .map_err(|e| p.err(b_line, e.to_string()))?;
        let shared = p.matrix_shaped("shared", model.n_shared(), 1)?.as_slice().to_vec();
        let nu_m = p.matrix_shaped("nu", model.n_y(), 1)?;
        let nu = NoisePrecision::new(DVector::from_column_slice(nu_m.as_slice()))
            .map_err(|e| p.err(p.line, e.to_string()))?;
        if let Ok((line, extra)) = p.next_line() {
            return Err(p.err(line, format!("trailing content `{extra}`")));
        }
        Self::new(model, generator, shared, nu)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }
}

fn write_matrix(s: &mut String, label: &str, m: &DMatrix<f64>) {
    let _ = writeln!(s, "matrix {label} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
}

/// Line cursor that skips blank lines and reports 1-based line numbers.
struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    name: &'a str,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, name: &'a str) -> Self {
        Lines {
            iter: text.lines().enumerate(),
            name,
            line: 0,
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> MtdsError {
        MtdsError::parse(self.name, line, msg)
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        for (i, l) in self.iter.by_ref() {
            self.line = i + 1;
            if !l.trim().is_empty() {
                return Ok((i + 1, l.trim()));
            }
        }
        Err(self.err(self.line + 1, "unexpected end of file"))
    }

    fn key_usize(&self, line: usize, field: &str, key: &str) -> Result<usize> {
        field
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| self.err(line, format!("expected `{key}=<n>`, found `{field}`")))
    }

    fn spec_fields(&self, line: usize, spec: &str) -> Result<BTreeMap<String, usize>> {
        let mut it = spec.split_whitespace();
        if it.next() != Some("spec") {
            return Err(self.err(line, "expected `spec ...`"));
        }
        let mut out = BTreeMap::new();
        for f in it {
            let parsed = f
                .split_once('=')
                .and_then(|(k, v)| Some((k.to_string(), v.parse::<usize>().ok()?)));
            let (k, v) = parsed.ok_or_else(|| self.err(line, format!("malformed spec field `{f}`")))?;
            out.insert(k, v);
        }
        Ok(out)
    }

    fn matrix(&mut self, label: &str) -> Result<DMatrix<f64>> {
        let (line, head) = self.next_line()?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let (rows, cols) = match parts[..] {
            ["matrix", l, r, c] if l == label => match (r.parse::<usize>(), c.parse::<usize>()) {
                (Ok(r), Ok(c)) => (r, c),
                _ => return Err(self.err(line, format!("bad shape for `{label}`"))),
            },
            _ => return Err(self.err(line, format!("expected `matrix {label} <rows> <cols>`"))),
        };
        if rows.checked_mul(cols).is_none_or(|n| n > 1 << 28) {
            return Err(self.err(line, format!("implausible shape for `{label}`")));
        }
        let mut vals = Vec::with_capacity(rows * cols);
        if cols > 0 {
            for _ in 0..rows {
                let (line, row) = self.next_line()?;
                let before = vals.len();
                for v in row.split_whitespace() {
                    vals.push(
                        v.parse::<f64>()
                            .map_err(|_| self.err(line, format!("`{label}`: cannot parse `{v}`")))?,
                    );
                }
                if vals.len() - before != cols {
                    return Err(self.err(line, format!("`{label}`: expected {cols} values")));
                }
            }
        }
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }

    fn matrix_shaped(&mut self, label: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let start = self.line + 1;
        let m = self.matrix(label)?;
        if m.shape() != (rows, cols) {
            return Err(self.err(
                start,
                format!("`{label}` must be {rows}×{cols}, found {}×{}", m.nrows(), m.ncols()),
            ));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_artifact(model: BaseModel, k: usize, seed: u64) -> ModelArtifact {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.n_params();
        let w = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal) / 3.0);
        let b = model
            .constraints()
            .inverse(model.default_theta(&[0.1; 4]).as_slice())
            .unwrap();
        let gen = ParamGenerator::new(w, b, model.constraints()).unwrap();
        let shared = model.init_shared(&mut rng);
        let nu = NoisePrecision::new(DVector::from_fn(model.n_y(), |_, _| rng.random_range(0.5..1e4))).unwrap();
        ModelArtifact::new(model, gen, shared, nu).unwrap()
    }

    fn assert_bitwise(a: &ModelArtifact, b: &ModelArtifact) {
        assert_eq!(a.model, b.model);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.generator.w.as_slice()), bits(b.generator.w.as_slice()));
        assert_eq!(bits(a.generator.b.as_slice()), bits(b.generator.b.as_slice()));
        assert_eq!(a.generator.constraints, b.generator.constraints);
        assert_eq!(bits(&a.shared), bits(&b.shared));
        assert_eq!(bits(a.nu.nu.as_slice()), bits(b.nu.nu.as_slice()));
    }

    #[test]
    fn round_trips_bitwise_for_every_model() {
        let dir = tempfile::tempdir().unwrap();
        let models = [
            BaseModel::Lds(LdsSpec::new(3, 2, 2).unwrap()),
            BaseModel::Pd(PdSpec::standard(2)),
            BaseModel::MtRnn(MtRnnSpec::toy(1, 2)),
        ];
        for (i, m) in models.into_iter().enumerate() {
            let art = random_artifact(m, 1 + i, i as u64);
            let path = dir.path().join(format!("m{i}.txt"));
            art.save(&path).unwrap();
            let back = ModelArtifact::load(&path).unwrap();
            assert_bitwise(&art, &back);
            assert_eq!(back.to_text(), art.to_text());
        }
    }

    #[test]
    fn header_is_versioned() {
        let art = random_artifact(BaseModel::Pd(PdSpec::standard(1)), 2, 9);
        let text = art.to_text();
        assert_eq!(text.lines().next().unwrap(), "mtdskit-v1 pd k=2 d=12");
    }

    #[test]
    fn corrupt_files_report_lines() {
        let art = random_artifact(BaseModel::Lds(LdsSpec::new(2, 1, 1).unwrap()), 1, 3);
        let text = art.to_text();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cases: Vec<(usize, String)> = vec![
            (0, "mtdskit-v2 lds k=1 d=7".into()),
            (0, "mtdskit-v1 lds k=1 d=8".into()),
            (1, "spec n_x=2 n_y=1".into()),
            (3, "1.0 oops".into()),
            (17, "identity logistic".into()),
        ];
        for (idx, bad) in cases {
            let orig = std::mem::replace(&mut lines[idx], bad.clone());
            let e = ModelArtifact::parse(&lines.join("\n"), "m.txt").unwrap_err();
            assert!(matches!(e, MtdsError::Parse { .. }), "{bad}: {e}");
            lines[idx] = orig;
        }
        assert!(ModelArtifact::parse(&lines[..5].join("\n"), "m.txt").is_err());
        assert!(ModelArtifact::parse(&format!("{text}extra\n"), "m.txt").is_err());
        assert!(ModelArtifact::parse(&text, "m.txt").is_ok());
    }

    #[test]
    fn rejects_inconsistent_parts() {
        let art = random_artifact(BaseModel::Pd(PdSpec::standard(1)), 1, 1);
        let nu2 = NoisePrecision::uniform(2, 1.0).unwrap();
        assert!(ModelArtifact::new(art.model.clone(), art.generator.clone(), vec![], nu2).is_err());
        assert!(ModelArtifact::new(art.model.clone(), art.generator.clone(), vec![1.0], art.nu.clone()).is_err());
    }

    #[test]
    fn random_text_never_panics() {
        let art = random_artifact(BaseModel::Lds(LdsSpec::new(2, 1, 1).unwrap()), 1, 5);
        let text = art.to_text();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let mut bytes = text.clone().into_bytes();
            for _ in 0..rng.random_range(1..4) {
                let i = rng.random_range(0..bytes.len());
                bytes[i] = b"0123456789 -.e\nxmatrixspec"[rng.random_range(0..26)];
            }
            let _ = ModelArtifact::parse(&String::from_utf8_lossy(&bytes), "fuzz");
        }
    }
}

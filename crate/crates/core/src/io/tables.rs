//! Long-format CSV tables: sequences, filtered posteriors, forecasts and
//! synthetic ground truth.
//!
//! Floats are written with `Display`, which is the shortest string that
//! parses back to the same `f64`, so every table round-trips exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::adais::{FilterStep, Forecast, GaussianMixture};
use crate::error::{MtdsError, Result};
use crate::types::{SequenceDataset, SequenceRecord};

pub(crate) fn csv_error(path: &str, e: csv::Error) -> MtdsError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    MtdsError::parse(path, line, e.to_string())
}

fn write_error(e: csv::Error) -> MtdsError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MtdsError::Io(io),
        other => MtdsError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

struct Table {
    name: String,
    header: Vec<String>,
    /// `(line, fields)` per data row.
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read<R: Read>(reader: R, name: &str) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut header = None;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(name, e))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let fields: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
            if header.is_none() {
                header = Some(fields);
                continue;
            }
            let width = header.as_ref().map_or(0, Vec::len);
            if fields.len() != width {
                return Err(MtdsError::parse(
                    name,
                    line,
                    format!("expected {width} fields, found {}", fields.len()),
                ));
            }
            rows.push((line, fields));
        }
        let header = header.ok_or_else(|| MtdsError::parse(name, 1, "missing header"))?;
        Ok(Table {
            name: name.to_string(),
            header,
            rows,
        })
    }

    fn expect_prefix(&self, cols: &[&str]) -> Result<()> {
        for (i, c) in cols.iter().enumerate() {
            if self.header.get(i).map(String::as_str) != Some(*c) {
                return Err(MtdsError::parse(
                    &self.name,
                    1,
                    format!("header column {i} must be `{c}`"),
                ));
            }
        }
        Ok(())
    }

    /// Number of consecutive `{prefix}{i}` columns starting at `start`.
    fn indexed_run(&self, start: usize, prefix: &str) -> Result<usize> {
        let mut n = 0;
        while let Some(h) = self.header.get(start + n) {
            match h.strip_prefix(prefix) {
                Some(rest) if rest == n.to_string() => n += 1,
                Some(_) => {
                    return Err(MtdsError::parse(
                        &self.name,
                        1,
                        format!("expected column `{prefix}{n}`, found `{h}`"),
                    ));
                }
                None => break,
            }
        }
        Ok(n)
    }

    fn num<T: std::str::FromStr>(&self, line: usize, col: usize, field: &str) -> Result<T> {
        field.parse::<T>().map_err(|_| {
            MtdsError::parse(
                &self.name,
                line,
                format!("column `{}`: cannot parse `{field}`", self.header[col]),
            )
        })
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn open(path: &Path) -> Result<(std::fs::File, String)> {
    Ok((std::fs::File::open(path)?, path.display().to_string()))
}

fn create(path: &Path) -> Result<csv::Writer<std::io::BufWriter<std::fs::File>>> {
    let f = std::fs::File::create(path)?;
    Ok(csv::Writer::from_writer(std::io::BufWriter::new(f)))
}

// ----------------------------------------------------------------------
// sequences

/// Reads `seq_id,t,u0..,y0..`. Rows are grouped by `seq_id` in order of
/// first appearance; each group must cover `t = 0..T−1` exactly once.
/// An empty `y` field marks the value as missing.
pub fn read_sequences<R: Read>(reader: R, name: &str) -> Result<SequenceDataset> {
    let table = Table::read(reader, name)?;
    table.expect_prefix(&["seq_id", "t"])?;
    let n_u = table.indexed_run(2, "u")?;
    let n_y = table.indexed_run(2 + n_u, "y")?;
    if 2 + n_u + n_y != table.header.len() {
        let extra = &table.header[2 + n_u + n_y];
        return Err(MtdsError::parse(name, 1, format!("unexpected column `{extra}`")));
    }
    if n_y == 0 {
        return Err(MtdsError::parse(name, 1, "no output columns"));
    }

    type Row = (usize, Vec<f64>, Vec<Option<f64>>);
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, BTreeMap<usize, Row>> = BTreeMap::new();
    for (line, f) in &table.rows {
        let id = f[0].clone();
        if id.is_empty() {
            return Err(MtdsError::parse(name, *line, "empty seq_id"));
        }
        let t: usize = table.num(*line, 1, &f[1])?;
        let mut u = Vec::with_capacity(n_u);
        for c in 2..2 + n_u {
            u.push(table.num(*line, c, &f[c])?);
        }
        let mut y = Vec::with_capacity(n_y);
        for c in 2 + n_u..2 + n_u + n_y {
            y.push(if f[c].is_empty() {
                None
            } else {
                Some(table.num(*line, c, &f[c])?)
            });
        }
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        if groups.entry(id.clone()).or_default().insert(t, (*line, u, y)).is_some() {
            return Err(MtdsError::parse(name, *line, format!("duplicate t = {t} for `{id}`")));
        }
    }

    let mut sequences = Vec::with_capacity(order.len());
    for id in order {
        let rows = &groups[&id];
        let t_len = rows.len();
        if let Some((&last, (line, ..))) = rows.iter().next_back() {
            if last + 1 != t_len {
                let missing = (0..t_len).find(|t| !rows.contains_key(t)).unwrap_or(t_len);
                return Err(MtdsError::parse(
                    name,
                    *line,
                    format!("`{id}` is missing t = {missing}"),
                ));
            }
        }
        let mut u = DMatrix::zeros(t_len, n_u);
        let mut y = DMatrix::zeros(t_len, n_y);
        let mut mask = DMatrix::from_element(t_len, n_y, false);
        for (&t, (_, ur, yr)) in rows {
            for (c, &v) in ur.iter().enumerate() {
                u[(t, c)] = v;
            }
            for (c, v) in yr.iter().enumerate() {
                if let Some(v) = v {
                    y[(t, c)] = *v;
                    mask[(t, c)] = true;
                }
            }
        }
        sequences.push(SequenceRecord::new(id, u, y, mask)?);
    }
    SequenceDataset::new(sequences, n_u, n_y)
}

pub fn load_sequences_csv(path: &Path) -> Result<SequenceDataset> {
    let (f, name) = open(path)?;
    read_sequences(f, &name)
}

pub fn write_sequences<W: Write>(writer: W, dataset: &SequenceDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["seq_id".to_string(), "t".to_string()];
    header.extend((0..dataset.n_u).map(|i| format!("u{i}")));
    header.extend((0..dataset.n_y).map(|i| format!("y{i}")));
    w.write_record(&header).map_err(write_error)?;
    for rec in &dataset.sequences {
        for t in 0..rec.len() {
            let mut row = vec![rec.seq_id.clone(), t.to_string()];
            row.extend((0..rec.n_u()).map(|c| fmt_f64(rec.u[(t, c)])));
            row.extend((0..rec.n_y()).map(|c| {
                if rec.mask[(t, c)] {
                    fmt_f64(rec.y[(t, c)])
                } else {
                    String::new()
                }
            }));
            w.write_record(&row).map_err(write_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_sequences_csv(path: &Path, dataset: &SequenceDataset) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_sequences(std::io::BufWriter::new(f), dataset)
}

// ----------------------------------------------------------------------
// posteriors

/// `t,component,weight,mu_0..mu_{k−1},chol_0..chol_{k²−1}` with the
/// Cholesky factor flattened row-major.
pub fn write_posteriors_csv(path: &Path, steps: &[FilterStep]) -> Result<()> {
    let k = steps.first().map_or(0, |s| s.gmm.k());
    let mut w = create(path)?;
    let mut header = vec!["t".to_string(), "component".to_string(), "weight".to_string()];
    header.extend((0..k).map(|i| format!("mu_{i}")));
    header.extend((0..k * k).map(|i| format!("chol_{i}")));
    w.write_record(&header).map_err(write_error)?;
    for s in steps {
        if s.gmm.k() != k {
            return Err(MtdsError::dim("posterior latent dimension", k, s.gmm.k()));
        }
        for c in 0..s.gmm.n_components() {
            let mut row = vec![s.t.to_string(), c.to_string(), fmt_f64(s.gmm.weights()[c])];
            row.extend(s.gmm.means()[c].iter().map(|&v| fmt_f64(v)));
            let l = s.gmm.chol(c);
            for i in 0..k {
                for j in 0..k {
                    row.push(fmt_f64(l[(i, j)]));
                }
            }
            w.write_record(&row).map_err(write_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a posterior dump back as `(t, mixture)` in file order.
pub fn read_posteriors<R: Read>(reader: R, name: &str) -> Result<Vec<(usize, GaussianMixture)>> {
    let table = Table::read(reader, name)?;
    table.expect_prefix(&["t", "component", "weight"])?;
    let k = table.indexed_run(3, "mu_")?;
    let kk = table.indexed_run(3 + k, "chol_")?;
    if kk != k * k || table.header.len() != 3 + k + kk {
        return Err(MtdsError::parse(
            name,
            1,
            format!("expected {} chol columns after {k} means", k * k),
        ));
    }
    struct Acc {
        t: usize,
        line: usize,
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        chols: Vec<DMatrix<f64>>,
    }
    let finish = |a: Acc| {
        GaussianMixture::from_cholesky(a.weights, a.means, a.chols)
            .map(|g| (a.t, g))
            .map_err(|e| MtdsError::parse(name, a.line, e.to_string()))
    };
    let mut out = Vec::new();
    let mut cur: Option<Acc> = None;
    for (line, f) in &table.rows {
        let t: usize = table.num(*line, 0, &f[0])?;
        let comp: usize = table.num(*line, 1, &f[1])?;
        let mut vals = Vec::with_capacity(1 + k + kk);
        for c in 2..f.len() {
            vals.push(table.num::<f64>(*line, c, &f[c])?);
        }
        if cur.as_ref().is_some_and(|a| a.t != t) {
            out.push(finish(cur.take().unwrap())?);
        }
        let acc = cur.get_or_insert_with(|| Acc {
            t,
            line: *line,
            weights: Vec::new(),
            means: Vec::new(),
            chols: Vec::new(),
        });
        if comp != acc.weights.len() {
            return Err(MtdsError::parse(
                name,
                *line,
                format!("expected component {}, found {comp}", acc.weights.len()),
            ));
        }
        acc.weights.push(vals[0]);
        acc.means.push(DVector::from_column_slice(&vals[1..1 + k]));
        acc.chols.push(DMatrix::from_row_slice(k, k, &vals[1 + k..]));
    }
    if let Some(a) = cur {
        out.push(finish(a)?);
    }
    Ok(out)
}

pub fn load_posteriors_csv(path: &Path) -> Result<Vec<(usize, GaussianMixture)>> {
    let (f, name) = open(path)?;
    read_posteriors(f, &name)
}

// ----------------------------------------------------------------------
// forecasts

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub seq_id: String,
    /// Zero-based step index within the sequence.
    pub t: usize,
    pub channel: usize,
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
}

/// Long-format rows for a forecast whose first row predicts step `start`.
pub fn forecast_rows(seq_id: &str, start: usize, fc: &Forecast) -> Vec<ForecastRow> {
    let mut rows = Vec::with_capacity(fc.mean.len());
    for i in 0..fc.mean.nrows() {
        for c in 0..fc.mean.ncols() {
            rows.push(ForecastRow {
                seq_id: seq_id.to_string(),
                t: start + i,
                channel: c,
                mean: fc.mean[(i, c)],
                q05: fc.q05[(i, c)],
                q95: fc.q95[(i, c)],
            });
        }
    }
    rows
}

const FORECAST_HEADER: [&str; 6] = ["seq_id", "t", "channel", "mean", "q05", "q95"];

pub fn write_forecast_csv(path: &Path, rows: &[ForecastRow]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(FORECAST_HEADER).map_err(write_error)?;
    for r in rows {
        w.write_record([
            r.seq_id.clone(),
            r.t.to_string(),
            r.channel.to_string(),
            fmt_f64(r.mean),
            fmt_f64(r.q05),
            fmt_f64(r.q95),
        ])
        .map_err(write_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_forecast<R: Read>(reader: R, name: &str) -> Result<Vec<ForecastRow>> {
    let table = Table::read(reader, name)?;
    table.expect_prefix(&FORECAST_HEADER)?;
    if table.header.len() != FORECAST_HEADER.len() {
        return Err(MtdsError::parse(name, 1, "unexpected extra columns"));
    }
    table
        .rows
        .iter()
        .map(|(line, f)| {
            Ok(ForecastRow {
                seq_id: f[0].clone(),
                t: table.num(*line, 1, &f[1])?,
                channel: table.num(*line, 2, &f[2])?,
                mean: table.num(*line, 3, &f[3])?,
                q05: table.num(*line, 4, &f[4])?,
                q95: table.num(*line, 5, &f[5])?,
            })
        })
        .collect()
}

pub fn load_forecast_csv(path: &Path) -> Result<Vec<ForecastRow>> {
    let (f, name) = open(path)?;
    read_forecast(f, &name)
}

// ----------------------------------------------------------------------
// ground truth

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub seq_id: String,
    pub z: DVector<f64>,
    pub theta: DVector<f64>,
}

/// `seq_id,z_0..z_{k−1},theta_0..theta_{d−1}`.
pub fn write_truth_csv(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.z.len());
    let d = rows.first().map_or(0, |r| r.theta.len());
    let mut w = create(path)?;
    let mut header = vec!["seq_id".to_string()];
    header.extend((0..k).map(|i| format!("z_{i}")));
    header.extend((0..d).map(|i| format!("theta_{i}")));
    w.write_record(&header).map_err(write_error)?;
    for r in rows {
        if r.z.len() != k || r.theta.len() != d {
            return Err(MtdsError::dim("truth row width", k + d, r.z.len() + r.theta.len()));
        }
        let mut row = vec![r.seq_id.clone()];
        row.extend(r.z.iter().chain(r.theta.iter()).map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(write_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth<R: Read>(reader: R, name: &str) -> Result<Vec<TruthRow>> {
    let table = Table::read(reader, name)?;
    table.expect_prefix(&["seq_id"])?;
    let k = table.indexed_run(1, "z_")?;
    let d = table.indexed_run(1 + k, "theta_")?;
    if table.header.len() != 1 + k + d {
        return Err(MtdsError::parse(name, 1, "unexpected extra columns"));
    }
    table
        .rows
        .iter()
        .map(|(line, f)| {
            let mut v = Vec::with_capacity(k + d);
            for c in 1..f.len() {
                v.push(table.num::<f64>(*line, c, &f[c])?);
            }
            Ok(TruthRow {
                seq_id: f[0].clone(),
                z: DVector::from_column_slice(&v[..k]),
                theta: DVector::from_column_slice(&v[k..]),
            })
        })
        .collect()
}

pub fn load_truth_csv(path: &Path) -> Result<Vec<TruthRow>> {
    let (f, name) = open(path)?;
    read_truth(f, &name)
}

//! Sparse binary-classification datasets: LIBSVM text IO, min-max feature
//! scaling and seeded synthetic generation.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

/// Row-compressed feature matrix with labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    labels: Vec<f64>,
    n_features: usize,
}

impl SparseDataset {
    /// Builds a dataset from per-row `(index, value)` lists. Indices within a
    /// row are sorted; duplicates are rejected.
    pub fn from_rows(
        rows: Vec<Vec<(usize, f64)>>,
        labels: Vec<f64>,
        n_features: usize,
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(invalid(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(b) = labels.iter().find(|&&b| b != 1.0 && b != -1.0) {
            return Err(invalid(format!("label {b} is not in {{-1, +1}}")));
        }
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(j, _)| j);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(invalid(format!("duplicate feature index {}", w[0].0)));
                }
            }
            for (j, v) in row {
                if j >= n_features {
                    return Err(invalid(format!(
                        "feature index {j} >= n_features {n_features}"
                    )));
                }
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            indptr,
            indices,
            values,
            labels,
            n_features,
        })
    }

    pub fn n_points(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// `<a_i, x>`
    #[inline]
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&j, &v)| v * x[j]).sum()
    }

    /// `out += alpha * a_i`
    #[inline]
    pub fn row_axpy(&self, i: usize, alpha: f64, out: &mut [f64]) {
        let (idx, val) = self.row(i);
        for (&j, &v) in idx.iter().zip(val) {
            out[j] += alpha * v;
        }
    }

    pub fn row_norm_sq(&self, i: usize) -> f64 {
        self.row(i).1.iter().map(|v| v * v).sum()
    }

    /// Keeps the first `max_points` rows and drops features with index
    /// `>= max_features`.
    pub fn truncate(&self, max_points: Option<usize>, max_features: Option<usize>) -> Self {
        let n = max_points.unwrap_or(self.n_points()).min(self.n_points());
        let d = max_features.unwrap_or(self.n_features).min(self.n_features);
        let rows = (0..n)
            .map(|i| {
                let (idx, val) = self.row(i);
                idx.iter()
                    .zip(val)
                    .filter(|(&j, _)| j < d)
                    .map(|(&j, &v)| (j, v))
                    .collect()
            })
            .collect();
        Self::from_rows(rows, self.labels[..n].to_vec(), d).expect("subset of a valid dataset")
    }

    /// SHA-256 over the CSR arrays, labels and width.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_features as u64).to_le_bytes());
        h.update((self.n_points() as u64).to_le_bytes());
        for &p in &self.indptr {
            h.update((p as u64).to_le_bytes());
        }
        for &j in &self.indices {
            h.update((j as u64).to_le_bytes());
        }
        for &v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        for &b in &self.labels {
            h.update(b.to_bits().to_le_bytes());
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    }

    /// Writes the dataset in LIBSVM format with 1-based indices.
    pub fn write_libsvm<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.n_points() {
            let b = if self.labels[i] > 0.0 { "+1" } else { "-1" };
            write!(w, "{b}")?;
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                write!(w, " {}:{}", j + 1, v)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Overrides the inferred width (`max index + 1`).
    pub n_features: Option<usize>,
    /// Desk-scale caps applied after parsing.
    pub max_points: Option<usize>,
    pub max_features: Option<usize>,
}

pub fn load_libsvm(path: impl AsRef<Path>) -> Result<SparseDataset> {
    load_libsvm_with(path, &LoadOptions::default())
}

pub fn load_libsvm_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<SparseDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_libsvm(BufReader::new(file), opts)
}

/// Parses `<label> <idx>:<val> ...` lines with 1-based indices. Blank lines and
/// `#` comments are skipped.
pub fn parse_libsvm<R: BufRead>(reader: R, opts: &LoadOptions) -> Result<SparseDataset> {
    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    let mut max_index = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad label {label_tok:?}"),
        })?;
        let mut row = Vec::new();
        for tok in tokens {
            let (i, v) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected idx:val, got {tok:?}"),
            })?;
            let i: usize = i.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad index {i:?}"),
            })?;
            if i == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "indices are 1-based".into(),
                });
            }
            let v: f64 = v.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad value {v:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite value {v}"),
                });
            }
            max_index = max_index.max(i);
            row.push((i - 1, v));
        }
        row.sort_by_key(|&(j, _)| j);
        if row.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Parse {
                line: lineno,
                msg: "duplicate feature index".into(),
            });
        }
        rows.push(row);
        raw_labels.push(label);
    }

    let labels = map_labels(&raw_labels)?;
    let n_features = match opts.n_features {
        Some(d) if d < max_index => {
            return Err(invalid(format!(
                "n_features override {d} is below the largest index {max_index}"
            )))
        }
        Some(d) => d,
        None => max_index,
    };
    let ds = SparseDataset::from_rows(rows, labels, n_features)?;
    if opts.max_points.is_some() || opts.max_features.is_some() {
        Ok(ds.truncate(opts.max_points, opts.max_features))
    } else {
        Ok(ds)
    }
}

/// The smaller of two observed classes maps to -1. A single observed class maps
/// by sign (`<= 0` is -1).
fn map_labels(raw: &[f64]) -> Result<Vec<f64>> {
    let mut classes: Vec<f64> = Vec::new();
    for &b in raw {
        if !classes.contains(&b) {
            classes.push(b);
            if classes.len() > 2 {
                return Err(Error::NonBinaryLabels(classes.len()));
            }
        }
    }
    let lower = match classes.as_slice() {
        [a, b] => a.min(*b),
        _ => 0.0,
    };
    let two = classes.len() == 2;
    Ok(raw
        .iter()
        .map(|&b| if (two && b == lower) || (!two && b <= 0.0) { -1.0 } else { 1.0 })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    PerFeature,
    Global,
}

/// Min-max scales stored entries to `[0, 1]`. Implicit zeros take part in the
/// min/max whenever a column (or, in global mode, the matrix) has any, and are
/// left implicit. Columns with `max == min` map to 0; empty columns are untouched.
pub fn scale_features(ds: &SparseDataset, mode: ScaleMode) -> SparseDataset {
    let n = ds.n_points();
    let d = ds.n_features;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut count = vec![0usize; d];
    for (&j, &v) in ds.indices.iter().zip(&ds.values) {
        lo[j] = lo[j].min(v);
        hi[j] = hi[j].max(v);
        count[j] += 1;
    }
    for j in 0..d {
        if count[j] > 0 && count[j] < n {
            lo[j] = lo[j].min(0.0);
            hi[j] = hi[j].max(0.0);
        }
    }
    if mode == ScaleMode::Global && ds.nnz() > 0 {
        let mut glo = lo
            .iter()
            .zip(&count)
            .filter(|(_, &c)| c > 0)
            .map(|(&l, _)| l)
            .fold(f64::INFINITY, f64::min);
        let mut ghi = hi
            .iter()
            .zip(&count)
            .filter(|(_, &c)| c > 0)
            .map(|(&h, _)| h)
            .fold(f64::NEG_INFINITY, f64::max);
        if ds.nnz() < n * d {
            glo = glo.min(0.0);
            ghi = ghi.max(0.0);
        }
        lo.iter_mut().for_each(|l| *l = glo);
        hi.iter_mut().for_each(|h| *h = ghi);
    }
    let values = ds
        .indices
        .iter()
        .zip(&ds.values)
        .map(|(&j, &v)| {
            let span = hi[j] - lo[j];
            if span > 0.0 {
                ((v - lo[j]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    SparseDataset {
        values,
        ..ds.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_points: usize,
    pub n_features: usize,
    pub density: f64,
    pub seed: u64,
    pub noise: f64,
}

/// Random sparse features uniform on `[0, 1]`, labelled by the sign of
/// `<a_i, w> - median` for a sparse Gaussian `w`, with labels flipped at rate
/// `noise`.
pub fn synth_binary(spec: &SynthSpec) -> Result<SparseDataset> {
    let SynthSpec {
        n_points,
        n_features,
        density,
        seed,
        noise,
    } = *spec;
    if !(density > 0.0 && density <= 1.0) {
        return Err(invalid(format!("density {density} not in (0, 1]")));
    }
    if !(0.0..0.5).contains(&noise) {
        return Err(invalid(format!("noise {noise} not in [0, 0.5)")));
    }
    if n_points == 0 || n_features == 0 {
        return Err(invalid("n_points and n_features must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let support = (n_features / 5).max(1);
    let picked = rand::seq::index::sample(&mut rng, n_features, support);
    let mut w = vec![0.0; n_features];
    for j in picked.iter() {
        w[j] = StandardNormal.sample(&mut rng);
    }

    let mut rows = Vec::with_capacity(n_points);
    let mut scores = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mut row = Vec::new();
        let mut s = 0.0;
        for (j, &wj) in w.iter().enumerate() {
            if rng.random::<f64>() < density {
                let v: f64 = rng.random();
                s += v * wj;
                row.push((j, v));
            }
        }
        rows.push(row);
        scores.push(s);
    }

    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n_points % 2 == 1 {
        sorted[n_points / 2]
    } else {
        0.5 * (sorted[n_points / 2 - 1] + sorted[n_points / 2])
    };
    let labels = scores
        .iter()
        .map(|&s| {
            let b = if s > median { 1.0 } else { -1.0 };
            if rng.random::<f64>() < noise {
                -b
            } else {
                b
            }
        })
        .collect();
    SparseDataset::from_rows(rows, labels, n_features)
}

/// Ground-truth weights used by [`synth_binary`] for a given spec.
pub fn synth_weights(spec: &SynthSpec) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let support = (spec.n_features / 5).max(1);
    let picked = rand::seq::index::sample(&mut rng, spec.n_features, support);
    let mut w = vec![0.0; spec.n_features];
    for j in picked.iter() {
        w[j] = StandardNormal.sample(&mut rng);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(s: &str) -> Result<SparseDataset> {
        parse_libsvm(Cursor::new(s), &LoadOptions::default())
    }

    #[test]
    fn parses_one_based_rows() {
        let ds = parse("1 1:0.5 3:1.0\n-1 2:2\n").unwrap();
        assert_eq!(ds.n_points(), 2);
        assert_eq!(ds.n_features(), 3);
        assert_eq!(ds.row(0), (&[0usize, 2][..], &[0.5, 1.0][..]));
        assert_eq!(ds.label(0), 1.0);
        assert_eq!(ds.row(1), (&[1usize][..], &[2.0][..]));
        assert_eq!(ds.label(1), -1.0);
    }

    #[test]
    fn counts_lines() {
        let ds = parse("1 1:1\n-1 2:1\n1 3:1\n").unwrap();
        assert_eq!(ds.n_points(), 3);
    }

    #[test]
    fn maps_zero_one_and_one_two_labels() {
        let ds = parse("0 1:1\n1 1:2\n").unwrap();
        assert_eq!(ds.labels(), &[-1.0, 1.0]);
        let ds = parse("2 1:1\n1 1:2\n").unwrap();
        assert_eq!(ds.labels(), &[1.0, -1.0]);
    }

    #[test]
    fn rejects_multiclass_and_reports_line() {
        assert!(matches!(
            parse("1 1:1\n2 1:1\n3 1:1\n"),
            Err(Error::NonBinaryLabels(3))
        ));
        match parse("1 1:1\n-1 2-3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse("1 0:1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn n_features_override_and_caps() {
        let opts = LoadOptions {
            n_features: Some(10),
            ..Default::default()
        };
        let ds = parse_libsvm(Cursor::new("1 1:1 4:2\n-1 2:1\n"), &opts).unwrap();
        assert_eq!(ds.n_features(), 10);
        let opts = LoadOptions {
            max_points: Some(1),
            max_features: Some(2),
            ..Default::default()
        };
        let ds = parse_libsvm(Cursor::new("1 1:1 4:2\n-1 2:1\n"), &opts).unwrap();
        assert_eq!(ds.n_points(), 1);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.row(0).0, &[0]);
    }

    #[test]
    fn scaling_examples() {
        // column 0: stored {2, 4} with an implicit zero in row 2
        // column 1: stored {3, 3} with an implicit zero
        // column 2: empty
        let ds = SparseDataset::from_rows(
            vec![vec![(0, 2.0), (1, 3.0)], vec![(0, 4.0), (1, 3.0)], vec![]],
            vec![1.0, -1.0, 1.0],
            3,
        )
        .unwrap();
        let s = scale_features(&ds, ScaleMode::PerFeature);
        assert_eq!(s.row(0).1, &[0.5, 1.0]);
        assert_eq!(s.row(1).1, &[1.0, 1.0]);
        assert_eq!(s.row(2).1.len(), 0);
    }

    #[test]
    fn dense_constant_column_maps_to_zero() {
        let ds =
            SparseDataset::from_rows(vec![vec![(0, 3.0)], vec![(0, 3.0)]], vec![1.0, -1.0], 1)
                .unwrap();
        let s = scale_features(&ds, ScaleMode::PerFeature);
        assert_eq!(s.row(0).1, &[0.0]);
    }

    #[test]
    fn global_scaling_uses_one_range() {
        let ds = SparseDataset::from_rows(
            vec![vec![(0, 2.0), (1, 8.0)], vec![(0, 4.0)]],
            vec![1.0, -1.0],
            2,
        )
        .unwrap();
        let s = scale_features(&ds, ScaleMode::Global);
        assert_eq!(s.row(0).1, &[0.25, 1.0]);
        assert_eq!(s.row(1).1, &[0.5]);
    }

    #[test]
    fn synth_is_deterministic_and_seed_sensitive() {
        let spec = SynthSpec {
            n_points: 50,
            n_features: 20,
            density: 0.3,
            seed: 11,
            noise: 0.1,
        };
        let a = synth_binary(&spec).unwrap();
        let b = synth_binary(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = synth_binary(&SynthSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_without_noise_is_separable_by_truth() {
        let spec = SynthSpec {
            n_points: 101,
            n_features: 30,
            density: 0.5,
            seed: 3,
            noise: 0.0,
        };
        let ds = synth_binary(&spec).unwrap();
        let w = synth_weights(&spec);
        let mut scores: Vec<f64> = (0..ds.n_points()).map(|i| ds.row_dot(i, &w)).collect();
        let s2 = scores.clone();
        scores.sort_by(f64::total_cmp);
        let median = scores[50];
        for (i, s) in s2.iter().enumerate() {
            assert_eq!(ds.label(i), if *s > median { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn synth_density_matches_binomial() {
        let spec = SynthSpec {
            n_points: 100,
            n_features: 200,
            density: 0.1,
            seed: 5,
            noise: 0.0,
        };
        let ds = synth_binary(&spec).unwrap();
        let mean = ds.nnz() as f64 / 100.0;
        // per-row nnz ~ Binomial(200, 0.1); the mean over 100 rows has sd sqrt(18/100)
        let sd = (200.0 * 0.1 * 0.9 / 100.0f64).sqrt();
        assert!((mean - 20.0).abs() <= 3.0 * sd, "mean nnz {mean}");
    }

    #[test]
    fn synth_rejects_bad_fractions() {
        let spec = SynthSpec {
            n_points: 10,
            n_features: 5,
            density: 0.0,
            seed: 0,
            noise: 0.0,
        };
        assert!(synth_binary(&spec).is_err());
        assert!(synth_binary(&SynthSpec {
            density: 0.5,
            noise: 0.5,
            ..spec
        })
        .is_err());
    }
}

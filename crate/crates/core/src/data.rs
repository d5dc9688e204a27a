//! Synthetic labeled datasets, stratified splits and a plain CSV format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{norm2, Matrix, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("split: {0}")]
    Split(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty dataset")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianBlobs,
    ConcentricRings,
    HypercubeCorners,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianBlobs => "gaussian_blobs",
            Family::ConcentricRings => "concentric_rings",
            Family::HypercubeCorners => "hypercube_corners",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian_blobs" => Ok(Family::GaussianBlobs),
            "concentric_rings" => Ok(Family::ConcentricRings),
            "hypercube_corners" => Ok(Family::HypercubeCorners),
            _ => Err(format!("unknown dataset family `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub family: Family,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    /// The default desk task.
    fn default() -> Self {
        Self {
            family: Family::GaussianBlobs,
            num_classes: 16,
            samples_per_class: 200,
            input_dim: 32,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::Spec("need at least two classes".into()));
        }
        if self.samples_per_class < 2 {
            return Err(DataError::Spec(format!(
                "samples_per_class must be at least 2, got {}",
                self.samples_per_class
            )));
        }
        if self.input_dim == 0 {
            return Err(DataError::Spec("input_dim must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(DataError::Spec(format!("noise_scale must be non-negative, got {}", self.noise_scale)));
        }
        if self.family == Family::HypercubeCorners {
            let bits = corner_bits(self.num_classes);
            if bits > self.input_dim {
                return Err(DataError::Spec(format!(
                    "{} classes need {bits} corner dims but input_dim is {}",
                    self.num_classes, self.input_dim
                )));
            }
        }
        Ok(())
    }
}

fn corner_bits(k: usize) -> usize {
    (usize::BITS - (k - 1).leading_zeros()) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Unsplit,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub tags: Vec<SplitTag>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if inputs.rows() != labels.len() {
            return Err(DataError::Invalid(format!("{} rows but {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= num_classes {num_classes}")));
        }
        let tags = vec![SplitTag::Unsplit; labels.len()];
        Ok(Self { inputs, labels, num_classes, tags })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// At least two classes present and every present class has two rows,
    /// so both positive and negative pairs exist.
    pub fn check_pairable(&self) -> Result<(), DataError> {
        let counts = self.class_counts();
        let present = counts.iter().filter(|&&c| c > 0).count();
        if present < 2 {
            return Err(DataError::Invalid("fewer than two classes present".into()));
        }
        if let Some(k) = counts.iter().position(|&c| c == 1) {
            return Err(DataError::Invalid(format!("class {k} has a single sample")));
        }
        Ok(())
    }

    pub fn subset(&self, rows: &[usize], tag: SplitTag) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
            tags: vec![tag; rows.len()],
        }
    }
}

/// Random orthonormal frame of `k` vectors in `d` dims (`k ≤ d`).
fn orthonormal_frame(k: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &frame {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= p * b;
            }
        }
        let n = norm2(&v);
        if n > 1e-8 {
            frame.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    frame
}

fn random_direction(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Class means on the radius-`r` sphere. When the dimension allows, they
/// form a randomly rotated regular simplex so every pair of classes is
/// equally far apart; otherwise they are independent uniform directions.
fn sphere_means(k: usize, d: usize, r: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    if k <= d {
        let frame = orthonormal_frame(k, d, rng);
        let mut centroid = vec![0.0; d];
        for u in &frame {
            for (c, x) in centroid.iter_mut().zip(u) {
                *c += x / k as f64;
            }
        }
        frame
            .into_iter()
            .map(|u| {
                let v: Vec<f64> = u.iter().zip(&centroid).map(|(a, c)| a - c).collect();
                let n = norm2(&v);
                v.into_iter().map(|x| r * x / n).collect()
            })
            .collect()
    } else {
        (0..k).map(|_| random_direction(d, rng).into_iter().map(|x| r * x).collect()).collect()
    }
}

/// Class-major rows: `samples_per_class` rows of class 0, then class 1, ...
///
/// * blobs: isotropic noise around means on a sphere of radius `4·noise`;
/// * rings: class `k` lies at radius `4·noise·(k+1)` in uniformly random
///   directions, plus isotropic noise;
/// * hypercube: class `k` sits on the corner whose first `⌈log2 K⌉`
///   coordinates are `±2·noise` by the bits of `k`, plus isotropic noise.
pub fn generate(spec: &GenSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut mean_rng = root.stream("data.means");
    let mut noise_rng = root.stream("data.noise");
    let (k, d, s) = (spec.num_classes, spec.input_dim, spec.noise_scale);
    let n = k * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let means = match spec.family {
        Family::GaussianBlobs => sphere_means(k, d, 4.0 * s, &mut mean_rng),
        Family::ConcentricRings => vec![vec![0.0; d]; k],
        Family::HypercubeCorners => {
            let bits = corner_bits(k);
            (0..k)
                .map(|c| {
                    (0..d)
                        .map(|j| if j >= bits { 0.0 } else if (c >> j) & 1 == 1 { 2.0 * s } else { -2.0 * s })
                        .collect()
                })
                .collect()
        }
    };
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let centre: Vec<f64> = if spec.family == Family::ConcentricRings {
                let radius = 4.0 * s * (c + 1) as f64;
                random_direction(d, &mut mean_rng).into_iter().map(|x| radius * x).collect()
            } else {
                mean.clone()
            };
            data.extend(centre.iter().map(|m| m + s * noise_rng.normal()));
            labels.push(c);
        }
    }
    let inputs = Matrix::from_vec(n, d, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(inputs, labels, k)
}

/// Stratified split into (train, val, test). Per class, rows are shuffled
/// and the first `round(f₀·n)` go to train, the next `round(f₁·n)` to val
/// and the rest to test; each output keeps the original row order.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), DataError> {
    if fractions.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
        return Err(DataError::Split(format!("fractions must be non-negative, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("fractions sum to {total}, expected 1")));
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = Rng::new(seed).stream("data.split");
    let mut assign = vec![SplitTag::Unsplit; ds.len()];
    for (c, rows) in by_class.iter_mut().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < active {
            return Err(DataError::Split(format!("class {c} has {} rows for {active} splits", rows.len())));
        }
        rng.shuffle(rows);
        let n = rows.len();
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        let n_val = if fractions[2] == 0.0 { n - n_train } else { n_val };
        for (pos, &r) in rows.iter().enumerate() {
            assign[r] = if pos < n_train {
                SplitTag::Train
            } else if pos < n_train + n_val {
                SplitTag::Val
            } else {
                SplitTag::Test
            };
        }
    }
    let pick = |tag: SplitTag| -> Dataset {
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| assign[i] == tag).collect();
        ds.subset(&rows, tag)
    };
    Ok((pick(SplitTag::Train), pick(SplitTag::Val), pick(SplitTag::Test)))
}

pub fn to_csv(ds: &Dataset) -> String {
    let mut out = String::from("label");
    for j in 0..ds.input_dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (row, &l) in ds.inputs.row_iter().zip(&ds.labels) {
        out.push_str(&l.to_string());
        for v in row {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, to_csv(ds))?;
    Ok(())
}

/// `num_classes` is one more than the largest label seen.
pub fn parse_csv(text: &str) -> Result<Dataset, DataError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or(DataError::Parse { line: 1, msg: "missing header".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") {
        return Err(DataError::Parse { line: 1, msg: "header must start with `label`".into() });
    }
    let d = cols.len() - 1;
    for (j, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(DataError::Parse { line: 1, msg: format!("expected column f{j}, found `{c}`") });
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, text) in lines {
        if text.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(DataError::Parse { line, msg: format!("expected {} fields, found {}", d + 1, fields.len()) });
        }
        let label: usize =
            fields[0].parse().map_err(|_| DataError::Parse { line, msg: format!("bad label `{}`", fields[0]) })?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| DataError::Parse { line, msg: format!("bad value `{f}`") })?;
            if !v.is_finite() {
                return Err(DataError::Parse { line, msg: format!("non-finite value `{f}`") });
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let inputs = Matrix::from_vec(labels.len(), d, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(inputs, labels, k)
}

pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    parse_csv(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    fn spec(family: Family, k: usize, n: usize) -> GenSpec {
        GenSpec { family, num_classes: k, samples_per_class: n, input_dim: 8, noise_scale: 1.0, seed: 3 }
    }

    #[test]
    fn counts_per_family() {
        for family in [Family::GaussianBlobs, Family::ConcentricRings, Family::HypercubeCorners] {
            let ds = generate(&spec(family, 4, 100)).unwrap();
            assert_eq!(ds.len(), 400);
            assert_eq!(ds.class_counts(), vec![100; 4]);
        }
        let ds = generate(&GenSpec::default()).unwrap();
        assert_eq!(ds.inputs.shape(), (3200, 32));
    }

    #[test]
    fn zero_noise_collapses_classes() {
        let mut s = spec(Family::HypercubeCorners, 4, 10);
        s.noise_scale = 0.0;
        let ds = generate(&s).unwrap();
        for (i, &l) in ds.labels.iter().enumerate() {
            let first = ds.labels.iter().position(|&m| m == l).unwrap();
            assert_eq!(ds.inputs.row(i), ds.inputs.row(first));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = spec(Family::GaussianBlobs, 3, 5);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let mut t = s;
        t.seed = 4;
        assert_ne!(generate(&s).unwrap().inputs, generate(&t).unwrap().inputs);
    }

    #[test]
    fn blob_means_are_equidistant_on_sphere() {
        let mut rng = Rng::new(1);
        let means = sphere_means(5, 8, 4.0, &mut rng);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let d01 = dist(&means[0], &means[1]);
        for i in 0..5 {
            assert!((norm2(&means[i]) - 4.0).abs() < 1e-12);
            for j in 0..i {
                assert!((dist(&means[i], &means[j]) - d01).abs() < 1e-12);
            }
        }
        let wide = sphere_means(10, 3, 2.0, &mut rng);
        assert!(wide.iter().all(|m| (norm2(m) - 2.0).abs() < 1e-12));
    }

    #[test]
    fn spec_errors() {
        assert!(generate(&spec(Family::GaussianBlobs, 4, 1)).is_err());
        let mut s = spec(Family::GaussianBlobs, 4, 2);
        s.noise_scale = -1.0;
        assert!(generate(&s).is_err());
        assert!(generate(&spec(Family::HypercubeCorners, 300, 2)).is_err());
    }

    #[test]
    fn split_counts() {
        let ds = generate(&spec(Family::GaussianBlobs, 4, 100)).unwrap();
        let (tr, va, te) = split(&ds, [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (320, 40, 40));
        assert!(tr.tags.iter().all(|&t| t == SplitTag::Train));
        let (tr, va, te) = split(&ds, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (400, 0, 0));
    }

    #[test]
    fn split_is_disjoint_cover() {
        let ds = generate(&spec(Family::GaussianBlobs, 3, 7)).unwrap();
        let (tr, va, te) = split(&ds, [0.5, 0.25, 0.25], 9).unwrap();
        let mut rows: Vec<Vec<u64>> = [&tr, &va, &te]
            .iter()
            .flat_map(|d| d.inputs.row_iter().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect();
        let mut all: Vec<Vec<u64>> = ds.inputs.row_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        all.sort();
        assert_eq!(rows, all);
        assert_eq!(split(&ds, [0.5, 0.25, 0.25], 9).unwrap().1, va);
    }

    #[test]
    fn split_errors() {
        let ds = generate(&spec(Family::GaussianBlobs, 3, 2)).unwrap();
        assert!(split(&ds, [0.4, 0.3, 0.3], 0).is_err());
        assert!(split(&ds, [0.5, 0.5, 0.5], 0).is_err());
        assert!(split(&ds, [0.5, 0.5, 0.0], 0).is_ok());
    }

    proptest! {
        #[test]
        fn split_is_stratified(k in 2usize..6, n in 3usize..40, f0 in 0.1f64..0.8, seed in 0u64..50) {
            let f1 = (1.0 - f0) / 2.0;
            let ds = generate(&spec(Family::GaussianBlobs, k, n)).unwrap();
            let (tr, va, te) = split(&ds, [f0, f1, 1.0 - f0 - f1], seed).unwrap();
            for (part, f) in [(&tr, f0), (&va, f1), (&te, 1.0 - f0 - f1)] {
                for c in part.class_counts() {
                    prop_assert!((c as f64 - f * n as f64).abs() <= 1.0 + 1e-9);
                }
            }
        }

        #[test]
        fn csv_round_trip(vals in proptest::collection::vec(-1e300f64..1e300, 6), tiny in -1e-300f64..1e-300) {
            let mut data = vals;
            data.push(tiny);
            data.push(f64::MIN_POSITIVE / 3.0);
            let ds = Dataset::new(Matrix::from_vec(4, 2, data).unwrap(), vec![0, 1, 1, 0], 2).unwrap();
            let back = parse_csv(&to_csv(&ds)).unwrap();
            prop_assert_eq!(back.labels, ds.labels);
            let (a, b) = (back.inputs.data(), ds.inputs.data());
            for (x, y) in a.iter().zip(b) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn csv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = generate(&spec(Family::ConcentricRings, 3, 4)).unwrap();
        save_csv(&ds, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), ds);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("label,f0,f1,f2,f3,f4,f5,f6,f7\n"));
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv(""), Err(DataError::Parse { line: 1, .. })));
        assert!(matches!(parse_csv("label,f0\n"), Err(DataError::Empty)));
        assert!(matches!(parse_csv("label,f0\n0,1.0\n1,x\n"), Err(DataError::Parse { line: 3, .. })));
        assert!(matches!(parse_csv("label,f0\n0,1.0,2.0\n"), Err(DataError::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("id,f0\n0,1\n"), Err(DataError::Parse { line: 1, .. })));
    }
}

//! Deterministic synthetic class-conditional datasets.
//!
//! Every sample is a pure function of `(spec.seed, index)`: sample `i` is
//! drawn from stream `i` of the seeded generator and carries label
//! `i mod classes`. Training uses indices `0..n_train`, evaluation
//! `n_train..n_train + n_eval`.
//!
//! | mode     | family  | classes | sample                                     |
//! |----------|---------|---------|--------------------------------------------|
//! | points2d | gauss8  | 8       | `N((2cos 2πc/8, 2sin 2πc/8), 0.1²·I)`       |
//! | points2d | checker | 8       | uniform in the c-th dark cell of a 4×4 board on `[-2,2]²` |
//! | points2d | moons   | 2       | two interleaved half circles, noise σ=0.05 |
//! | points2d | rings   | 3       | radius `0.8(c+1)` ± 0.05, uniform angle     |
//! | grid8    | blobs   | 1..=64  | Gaussian bump (σ=1 px) near a class cell    |
//! | grid8    | bars    | 8       | two-pixel horizontal (c<4) or vertical bar |
//! | grid8    | checker | 4       | checkerboard, cell size `1 + c/2`, phase `c mod 2` |

use crate::error::{Error, LoadFailure, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    Points2d,
    Grid8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Gauss8,
    PointChecker,
    Moons,
    Rings,
    Blobs,
    Bars,
    GridChecker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub mode: DataMode,
    pub family: String,
    pub classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            mode: DataMode::Points2d,
            family: "gauss8".into(),
            classes: 8,
            n_train: 50_000,
            n_eval: 4_000,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn family(&self) -> Result<Family> {
        let fam = match (self.mode, self.family.as_str()) {
            (DataMode::Points2d, "gauss8") => Family::Gauss8,
            (DataMode::Points2d, "checker") => Family::PointChecker,
            (DataMode::Points2d, "moons") => Family::Moons,
            (DataMode::Points2d, "rings") => Family::Rings,
            (DataMode::Grid8, "blobs") => Family::Blobs,
            (DataMode::Grid8, "bars") => Family::Bars,
            (DataMode::Grid8, "checker") => Family::GridChecker,
            (mode, other) => {
                return Err(Error::Config(format!(
                    "field `family`: unknown family '{other}' for mode {mode:?}"
                )))
            }
        };
        Ok(fam)
    }

    pub fn validate(&self) -> Result<()> {
        let fam = self.family()?;
        let ok = match fam {
            Family::Gauss8 | Family::PointChecker | Family::Bars => self.classes == 8,
            Family::Moons => self.classes == 2,
            Family::Rings => self.classes == 3,
            Family::GridChecker => self.classes == 4,
            Family::Blobs => (1..=64).contains(&self.classes),
        };
        if !ok {
            return Err(Error::Config(format!(
                "field `classes`: {} is not valid for family '{}'",
                self.classes, self.family
            )));
        }
        if self.n_train == 0 {
            return Err(Error::Config("field `n_train` must be positive".into()));
        }
        Ok(())
    }

    /// `(tokens, latent_dim)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize) {
        match self.mode {
            DataMode::Points2d => (1, 2),
            DataMode::Grid8 => (64, 1),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        match self.mode {
            DataMode::Points2d => (1, 1),
            DataMode::Grid8 => (8, 8),
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("dataset spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Label of sample `index`.
    pub fn label(&self, index: usize) -> usize {
        index % self.classes
    }

    /// Sample `index` as a flat `tokens·latent` vector.
    pub fn sample(&self, index: usize) -> Result<Vec<f64>> {
        let fam = self.family()?;
        let c = self.label(index);
        let mut rng = Rng::with_stream(self.seed, index as u64);
        Ok(match fam {
            Family::Gauss8 => {
                let a = 2.0 * PI * c as f64 / 8.0;
                vec![2.0 * a.cos() + 0.1 * rng.normal(), 2.0 * a.sin() + 0.1 * rng.normal()]
            }
            Family::PointChecker => {
                let dark: Vec<(usize, usize)> = (0..4)
                    .flat_map(|r| (0..4).map(move |col| (r, col)))
                    .filter(|(r, col)| (r + col) % 2 == 0)
                    .collect();
                let (r, col) = dark[c];
                vec![-2.0 + col as f64 + rng.uniform(), -2.0 + r as f64 + rng.uniform()]
            }
            Family::Moons => {
                let th = PI * rng.uniform();
                let (x, y) = if c == 0 {
                    (th.cos(), th.sin())
                } else {
                    (1.0 - th.cos(), 0.5 - th.sin())
                };
                vec![x - 0.5 + 0.05 * rng.normal(), y - 0.25 + 0.05 * rng.normal()]
            }
            Family::Rings => {
                let th = 2.0 * PI * rng.uniform();
                let r = 0.8 * (c as f64 + 1.0) + 0.05 * rng.normal();
                vec![r * th.cos(), r * th.sin()]
            }
            Family::Blobs => {
                let cell = c * 64 / self.classes;
                let cy = (cell / 8) as f64 + rng.uniform_in(-0.25, 0.25);
                let cx = (cell % 8) as f64 + rng.uniform_in(-0.25, 0.25);
                (0..64)
                    .map(|p| {
                        let (y, x) = ((p / 8) as f64, (p % 8) as f64);
                        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                        -1.0 + 2.0 * (-d2 / 2.0).exp()
                    })
                    .collect()
            }
            Family::Bars => (0..64)
                .map(|p| {
                    let (y, x) = (p / 8, p % 8);
                    let on = if c < 4 { y / 2 == c } else { x / 2 == c - 4 };
                    let base = if on { 1.0 } else { -1.0 };
                    (base + 0.1 * rng.normal()).clamp(-1.0, 1.0)
                })
                .collect(),
            Family::GridChecker => {
                let size = 1 + c / 2;
                let phase = c % 2;
                let amp = 0.8 + 0.2 * rng.uniform();
                (0..64)
                    .map(|p| {
                        let (y, x) = (p / 8, p % 8);
                        let s = if (y / size + x / size + phase).is_multiple_of(2) {
                            amp
                        } else {
                            -amp
                        };
                        (s + 0.05 * rng.normal()).clamp(-1.0, 1.0)
                    })
                    .collect()
            }
        })
    }

    /// Class centres in data space, where the family has them.
    pub fn class_centers(&self) -> Option<Vec<[f64; 2]>> {
        match self.family().ok()? {
            Family::Gauss8 => Some(
                (0..8)
                    .map(|c| {
                        let a = 2.0 * PI * c as f64 / 8.0;
                        [2.0 * a.cos(), 2.0 * a.sin()]
                    })
                    .collect(),
            ),
            _ => None,
        }
    }
}

/// A materialized split: `samples` is `[n, tokens, latent]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<f64>,
    pub labels: Vec<usize>,
    pub tokens: usize,
    pub latent: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens * self.latent
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim()..(i + 1) * self.dim()]
    }

    /// Rows as owned vectors, for metric code.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.get(i).to_vec()).collect()
    }

    /// Gathers samples into a `[B, tokens, latent]` tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend_from_slice(self.get(i));
        }
        Tensor::from_f64(&[indices.len(), self.tokens, self.latent], &data)
    }
}

/// Generates one split.
pub fn generate(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let range = match split {
        Split::Train => 0..spec.n_train,
        Split::Eval => spec.n_train..spec.n_train + spec.n_eval,
    };
    let (tokens, latent) = spec.sample_shape();
    let mut samples = Vec::with_capacity(range.len() * tokens * latent);
    let mut labels = Vec::with_capacity(range.len());
    for i in range {
        samples.extend(spec.sample(i)?);
        labels.push(spec.label(i));
    }
    Ok(Dataset {
        samples,
        labels,
        tokens,
        latent,
    })
}

/// Per-coordinate centring and a single global scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl Normalizer {
    /// Fits on a dataset's first `min(len, 8192)` samples.
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.len().min(8192).max(1);
        let dim = ds.dim();
        let mut mean = vec![0.0; dim];
        for i in 0..n {
            for (m, &x) in mean.iter_mut().zip(ds.get(i)) {
                *m += x / n as f64;
            }
        }
        let mut var = 0.0;
        for i in 0..n {
            for (m, &x) in mean.iter().zip(ds.get(i)) {
                var += (x - m).powi(2);
            }
        }
        let std = (var / (n * dim) as f64).sqrt().max(1e-6);
        Self { mean, std }
    }

    pub fn for_spec(spec: &DatasetSpec) -> Result<Self> {
        let mut small = spec.clone();
        small.n_train = spec.n_train.min(8192);
        Ok(Self::fit(&generate(&small, Split::Train)?))
    }

    pub fn normalize(&self, x: &mut [f64]) {
        let d = self.mean.len();
        for (i, v) in x.iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) / self.std;
        }
    }

    pub fn denormalize(&self, x: &mut [f64]) {
        let d = self.mean.len();
        for (i, v) in x.iter_mut().enumerate() {
            *v = *v * self.std + self.mean[i % d];
        }
    }

    pub fn normalized(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        self.normalize(&mut out.samples);
        out
    }
}

const DATA_MAGIC: &[u8; 4] = b"LTTD";
const DATA_VERSION: u32 = 1;

/// Contents of an `LTTD` sample file.
#[derive(Clone, Debug, PartialEq)]
pub struct DataFile {
    pub header: String,
    pub tokens: usize,
    pub latent: usize,
    pub samples: Vec<f32>,
    pub labels: Vec<u32>,
}

impl DataFile {
    pub fn from_dataset(header: String, ds: &Dataset) -> Self {
        Self {
            header,
            tokens: ds.tokens,
            latent: ds.latent,
            samples: ds.samples.iter().map(|&v| v as f32).collect(),
            labels: ds.labels.iter().map(|&l| l as u32).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            samples: self.samples.iter().map(|&v| v as f64).collect(),
            labels: self.labels.iter().map(|&l| l as usize).collect(),
            tokens: self.tokens,
            latent: self.latent,
        }
    }

    /// Layout: magic `LTTD`, u32 version, u32 header length, header text,
    /// u32 count, u32 tokens, u32 latent, count·tokens·latent f32 values,
    /// count u32 labels. All little-endian.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(DATA_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        w.write_all(&(self.header.len() as u32).to_le_bytes())?;
        w.write_all(self.header.as_bytes())?;
        for v in [self.len(), self.tokens, self.latent] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.samples.len() * 4 + self.labels.len() * 4);
        for v in &self.samples {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, LoadFailure> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != DATA_MAGIC {
            return Err(LoadFailure::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != DATA_VERSION {
            return Err(LoadFailure::Version {
                found: version,
                expected: DATA_VERSION,
            });
        }
        let hlen = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; hlen];
        read_exact(&mut r, &mut header)?;
        let header = String::from_utf8(header).map_err(|_| LoadFailure::Corrupt("header is not UTF-8".into()))?;
        let count = read_u32(&mut r)? as usize;
        let tokens = read_u32(&mut r)? as usize;
        let latent = read_u32(&mut r)? as usize;
        let n_values = count
            .checked_mul(tokens)
            .and_then(|v| v.checked_mul(latent))
            .ok_or_else(|| LoadFailure::Corrupt("sizes overflow".into()))?;
        if r.len() != n_values * 4 + count * 4 {
            return Err(LoadFailure::Corrupt(format!(
                "expected {} body bytes, found {}",
                n_values * 4 + count * 4,
                r.len()
            )));
        }
        let (vals, labs) = r.split_at(n_values * 4);
        let samples = vals
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = labs
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            header,
            tokens,
            latent,
            samples,
            labels,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

pub(crate) fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> std::result::Result<(), LoadFailure> {
    r.read_exact(buf)
        .map_err(|_| LoadFailure::Corrupt("unexpected end of file".into()))
}

pub(crate) fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, LoadFailure> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(n_train: usize) -> DatasetSpec {
        DatasetSpec {
            n_train,
            n_eval: 100,
            seed: 42,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn unknown_family_names_the_field() {
        let spec = DatasetSpec {
            family: "spirals".into(),
            ..DatasetSpec::default()
        };
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("family"), "{msg}");
        let grid = DatasetSpec {
            mode: DataMode::Grid8,
            family: "gauss8".into(),
            ..DatasetSpec::default()
        };
        assert!(grid.validate().is_err());
    }

    #[test]
    fn samples_regenerate_bitwise() {
        let spec = gauss(10);
        let a = spec.sample(7).unwrap();
        let b = spec.sample(7).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let ds = generate(&spec, Split::Train).unwrap();
        assert_eq!(ds.get(7), &a[..]);
    }

    #[test]
    fn classes_are_balanced_and_splits_disjoint() {
        let spec = gauss(1003);
        let train = generate(&spec, Split::Train).unwrap();
        let mut counts = [0usize; 8];
        train.labels.iter().for_each(|&l| counts[l] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        let eval = generate(&spec, Split::Eval).unwrap();
        assert_eq!(eval.len(), 100);
        assert_eq!(eval.get(0), &spec.sample(1003).unwrap()[..]);
    }

    #[test]
    fn gauss8_class_means_match_centres() {
        let spec = gauss(80_000);
        let ds = generate(&spec, Split::Train).unwrap();
        let centers = spec.class_centers().unwrap();
        for (c, center) in centers.iter().enumerate() {
            let pts: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| ds.get(i))
                .collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
            let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
            assert!((mx - center[0]).abs() < 0.01 && (my - center[1]).abs() < 0.01);
            let sx = (pts.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / n).sqrt();
            assert!((sx - 0.1).abs() < 0.01, "{sx}");
        }
    }

    #[test]
    fn normalizer_roundtrip_and_scale() {
        let spec = gauss(20_000);
        let ds = generate(&spec, Split::Train).unwrap();
        let norm = Normalizer::fit(&ds);
        let nd = norm.normalized(&ds);
        let n = nd.samples.len() as f64;
        let m = nd.samples.iter().sum::<f64>() / n;
        let sd = (nd.samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.8..=1.2).contains(&sd), "{sd}");
        let mut x = ds.get(3).to_vec();
        let orig = x.clone();
        norm.normalize(&mut x);
        norm.denormalize(&mut x);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut c = vec![0.5; 4];
        norm.normalize(&mut c);
        assert_eq!(c[0], c[2]);
        assert_eq!(c[1], c[3]);
    }

    #[test]
    fn every_family_generates_in_range() {
        let cases = [
            (DataMode::Points2d, "checker", 8),
            (DataMode::Points2d, "moons", 2),
            (DataMode::Points2d, "rings", 3),
            (DataMode::Grid8, "blobs", 8),
            (DataMode::Grid8, "bars", 8),
            (DataMode::Grid8, "checker", 4),
        ];
        for (mode, family, classes) in cases {
            let spec = DatasetSpec {
                mode,
                family: family.into(),
                classes,
                n_train: 16,
                n_eval: 0,
                seed: 1,
            };
            let ds = generate(&spec, Split::Train).unwrap();
            assert!(ds.samples.iter().all(|v| v.is_finite()));
            if mode == DataMode::Grid8 {
                assert!(ds.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn data_file_roundtrip_and_truncation() {
        let spec = gauss(9);
        let ds = generate(&spec, Split::Train).unwrap();
        let file = DataFile::from_dataset(spec.to_text(), &ds);
        let mut bytes = Vec::new();
        file.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"LTTD");
        assert_eq!(DataFile::parse(&bytes).unwrap(), file);
        assert!(matches!(
            DataFile::parse(&bytes[..bytes.len() - 3]),
            Err(LoadFailure::Corrupt(_))
        ));
    }
}

//! Datasets: IDX loading and saving, synthetic OOD generators, and the 3-D
//! sphere-octant toy.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::nn::Tensor;

pub const IDX_IMAGES_U8: u32 = 0x0000_0803;
pub const IDX_LABELS_U8: u32 = 0x0000_0801;
const IDX_TYPE_U8: u8 = 0x08;
const IDX_TYPE_F64: u8 = 0x0E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// Every value in [0, 1].
    Unit,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    dim: usize,
    samples: Vec<f64>,
    labels: Vec<usize>,
    range: ValueRange,
    /// `(rows, cols)` when the samples are images.
    image_shape: Option<(usize, usize)>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        samples: Vec<f64>,
        labels: Vec<usize>,
        range: ValueRange,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("dataset dimension must be positive"));
        }
        if samples.len() != dim * labels.len() {
            return Err(Error::contract(format!(
                "{} values do not form {} samples of dim {dim}",
                samples.len(),
                labels.len()
            )));
        }
        if range == ValueRange::Unit {
            if let Some(v) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::contract(format!(
                    "value {v} outside [0, 1] in a unit-range dataset"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            dim,
            samples,
            labels,
            range,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Self {
        if rows * cols == self.dim {
            self.image_shape = Some((rows, cols));
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// One more than the largest label (0 for an empty dataset).
    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes()];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut samples = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            samples.extend_from_slice(self.sample(i));
        }
        Self {
            name: self.name.clone(),
            dim: self.dim,
            samples,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            range: self.range,
            image_shape: self.image_shape,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Rows `indices` as a `[len, dim]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::matrix(indices.len(), self.dim, data).expect("batch shape")
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.samples.clone()).expect("dataset shape")
    }

    /// Largest Euclidean norm over samples.
    pub fn max_norm(&self) -> f64 {
        (0..self.len()).map(|i| norm(self.sample(i))).fold(0.0, f64::max)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::contract("cannot concatenate datasets of different dims"));
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(&other.samples);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let range = if self.range == ValueRange::Unit && other.range == ValueRange::Unit {
            ValueRange::Unit
        } else {
            ValueRange::Unbounded
        };
        Ok(Self {
            name: self.name.clone(),
            dim: self.dim,
            samples,
            labels,
            range,
            image_shape: self.image_shape,
        })
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxArray {
    type_code: u8,
    dims: Vec<usize>,
    payload_offset: usize,
}

fn parse_idx_header(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let fmt = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 {
        return Err(fmt(bytes.len(), "truncated magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt(0, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let type_code = bytes[2];
    let ndim = bytes[3] as usize;
    if type_code != IDX_TYPE_U8 && type_code != IDX_TYPE_F64 {
        return Err(fmt(2, format!("unsupported IDX element type 0x{type_code:02x}")));
    }
    if ndim == 0 {
        return Err(fmt(3, "IDX array with zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(fmt(bytes.len(), "truncated dimension header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let elem = if type_code == IDX_TYPE_U8 { 1 } else { 8 };
    let need = header + dims.iter().product::<usize>() * elem;
    if bytes.len() < need {
        return Err(fmt(
            bytes.len(),
            format!("truncated payload: expected {need} bytes"),
        ));
    }
    Ok(IdxArray {
        type_code,
        dims,
        payload_offset: header,
    })
}

/// Loads an IDX image file (ubyte pixels scaled to [0, 1], or raw f64) and an
/// optional IDX label file. Gzipped files are detected by their magic bytes.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<LabeledDataset> {
    let bytes = open_maybe_gz(images_path)?;
    let arr = parse_idx_header(&bytes, images_path)?;
    let n = arr.dims[0];
    let dim: usize = arr.dims[1..].iter().product::<usize>().max(1);
    let payload = &bytes[arr.payload_offset..];
    let (samples, range) = if arr.type_code == IDX_TYPE_U8 {
        let s = payload[..n * dim].iter().map(|&b| f64::from(b) / 255.0).collect();
        (s, ValueRange::Unit)
    } else {
        let s: Vec<f64> = payload[..n * dim * 8]
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect();
        let range = if s.iter().all(|v| (0.0..=1.0).contains(v)) {
            ValueRange::Unit
        } else {
            ValueRange::Unbounded
        };
        (s, range)
    };
    let labels = match labels_path {
        Some(p) => {
            let lb = open_maybe_gz(p)?;
            let la = parse_idx_header(&lb, p)?;
            if la.type_code != IDX_TYPE_U8 || la.dims.len() != 1 {
                return Err(Error::Format {
                    path: p.to_path_buf(),
                    offset: 2,
                    message: "label file must be a 1-D ubyte array".into(),
                });
            }
            if la.dims[0] != n {
                return Err(Error::Format {
                    path: p.to_path_buf(),
                    offset: 4,
                    message: format!("{} labels for {n} images", la.dims[0]),
                });
            }
            lb[la.payload_offset..la.payload_offset + n]
                .iter()
                .map(|&b| b as usize)
                .collect()
        }
        None => vec![0; n],
    };
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = LabeledDataset::new(name, dim, samples, labels, range)?;
    if arr.dims.len() == 3 {
        ds = ds.with_image_shape(arr.dims[1], arr.dims[2]);
    }
    Ok(ds)
}

fn writer(path: &Path) -> Result<Box<dyn Write>> {
    let f = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzEncoder::new(f, Compression::default())))
    } else {
        Ok(Box::new(f))
    }
}

/// Writes the samples as an IDX array: ubyte pixels (`round(255·v)`) for
/// unit-range data, big-endian f64 otherwise. Paths ending in `.gz` are
/// compressed.
pub fn save_idx(ds: &LabeledDataset, images_path: &Path, labels_path: Option<&Path>) -> Result<()> {
    let mut w = writer(images_path)?;
    let unit = ds.range == ValueRange::Unit;
    if unit && ds.samples.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("unit-range dataset holds values outside [0, 1]"));
    }
    let mut dims = vec![ds.len() as u32];
    match ds.image_shape {
        Some((r, c)) => dims.extend([r as u32, c as u32]),
        None => dims.push(ds.dim as u32),
    }
    let type_code = if unit { IDX_TYPE_U8 } else { IDX_TYPE_F64 };
    w.write_all(&[0, 0, type_code, dims.len() as u8])?;
    for d in &dims {
        w.write_all(&d.to_be_bytes())?;
    }
    if unit {
        let bytes: Vec<u8> = ds.samples.iter().map(|v| (v * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
    } else {
        for v in &ds.samples {
            w.write_all(&v.to_be_bytes())?;
        }
    }
    w.flush()?;
    drop(w);
    if let Some(lp) = labels_path {
        if ds.labels.iter().any(|&y| y > 255) {
            return Err(Error::contract("IDX labels must fit in a byte"));
        }
        let mut lw = writer(lp)?;
        lw.write_all(&IDX_LABELS_U8.to_be_bytes())?;
        lw.write_all(&(ds.len() as u32).to_be_bytes())?;
        let bytes: Vec<u8> = ds.labels.iter().map(|&y| y as u8).collect();
        lw.write_all(&bytes)?;
        lw.flush()?;
    }
    Ok(())
}

/// Reads a plain or gzipped file fully; exposed for hashing artifacts.
pub fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut v)?;
    Ok(v)
}

/// Pixels i.i.d. N(0.5, 1), clamped to [0, 1] unless `clamp` is false.
pub fn gen_gaussian_noise(n: usize, dim: usize, clamp: bool, rng: &mut impl Rng) -> LabeledDataset {
    let normal = Normal::new(0.5, 1.0).expect("valid normal");
    let samples: Vec<f64> = (0..n * dim)
        .map(|_| {
            let v: f64 = normal.sample(rng);
            if clamp {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    let range = if clamp { ValueRange::Unit } else { ValueRange::Unbounded };
    LabeledDataset::new("gaussian-noise", dim, samples, vec![0; n], range)
        .expect("generated shape")
        .square_image()
}

/// Pixels i.i.d. U[0, 1].
pub fn gen_uniform_noise(n: usize, dim: usize, rng: &mut impl Rng) -> LabeledDataset {
    let samples = (0..n * dim).map(|_| rng.random::<f64>()).collect();
    LabeledDataset::new("uniform-noise", dim, samples, vec![0; n], ValueRange::Unit)
        .expect("generated shape")
        .square_image()
}

fn unit_gaussian_direction(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&u);
        if n > 0.0 {
            return u.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Points uniform on the origin-centred sphere of the given radius.
pub fn gen_sphere_ood(n: usize, dim: usize, radius: f64, rng: &mut impl Rng) -> Result<LabeledDataset> {
    if !(radius > 0.0) {
        return Err(Error::contract("sphere radius must be positive"));
    }
    let mut samples = Vec::with_capacity(n * dim);
    for _ in 0..n {
        samples.extend(unit_gaussian_direction(dim, rng).into_iter().map(|v| v * radius));
    }
    Ok(
        LabeledDataset::new("sphere-ood", dim, samples, vec![0; n], ValueRange::Unbounded)?
            .square_image(),
    )
}

/// Two classes on the unit sphere in R³: class 0 uniform on the octant with
/// all coordinates positive, class 1 on the opposite octant.
pub fn gen_toy3d(n_per_class: usize, rng: &mut impl Rng) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::contract("n_per_class must be positive"));
    }
    let mut samples = Vec::with_capacity(6 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for class in 0..2 {
            let sign = if class == 0 { 1.0 } else { -1.0 };
            let p = unit_gaussian_direction(3, rng);
            samples.extend(p.iter().map(|v| sign * v.abs()));
            labels.push(class);
        }
    }
    LabeledDataset::new("toy3d", 3, samples, labels, ValueRange::Unbounded)
}

/// Whether a 3-D point lies in one of the two toy in-distribution octants.
pub fn in_toy_octants(p: &[f64]) -> bool {
    p.iter().all(|&v| v > 0.0) || p.iter().all(|&v| v < 0.0)
}

/// Points uniform on the unit sphere restricted to the six octants that hold
/// no toy in-distribution data.
pub fn gen_off_octant_sphere(n: usize, rng: &mut impl Rng) -> LabeledDataset {
    let mut samples = Vec::with_capacity(3 * n);
    let mut count = 0;
    while count < n {
        let p = unit_gaussian_direction(3, rng);
        if !in_toy_octants(&p) {
            samples.extend(p);
            count += 1;
        }
    }
    LabeledDataset::new("off-octant-sphere", 3, samples, vec![0; n], ValueRange::Unbounded)
        .expect("generated shape")
}

impl LabeledDataset {
    fn square_image(self) -> Self {
        let side = (self.dim as f64).sqrt().round() as usize;
        self.with_image_shape(side, side)
    }
}

/// Stratified shuffled partition: each class contributes
/// `round(train_fraction · count)` samples to the first part.
pub fn split(ds: &LabeledDataset, train_fraction: f64, rng: &mut impl Rng) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::contract("train_fraction must lie in (0, 1)"));
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for class in 0..ds.n_classes() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            log::warn!("class {class} has {} sample(s); stratification is degenerate", idx.len());
        }
        idx.shuffle(rng);
        let k = (train_fraction * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..k]);
        held.extend_from_slice(&idx[k..]);
    }
    train.shuffle(rng);
    held.shuffle(rng);
    Ok((ds.subset(&train), ds.subset(&held)))
}

/// Keeps samples whose label is in `keep`; with `relabel`, kept classes map
/// to `0..k` in ascending order.
pub fn class_filter(ds: &LabeledDataset, keep: &[usize], relabel: bool) -> Result<LabeledDataset> {
    if keep.is_empty() {
        return Err(Error::contract("class_filter needs at least one class"));
    }
    let mut sorted = keep.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| sorted.binary_search(&ds.labels[i]).is_ok())
        .collect();
    if idx.is_empty() {
        return Err(Error::contract("class_filter produced an empty dataset"));
    }
    let mut out = ds.subset(&idx);
    if relabel {
        for y in &mut out.labels {
            *y = sorted.binary_search(y).expect("kept label");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn hand_built_fixture_decodes() {
        let dir = tempfile::tempdir().unwrap();
        // two 1×2 images: [0, 255] and [255, 0]
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        img.extend([0, 255, 255, 0]);
        let lab = [0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        let ip = write_bytes(dir.path(), "img", &img);
        let lp = write_bytes(dir.path(), "lab", &lab);
        let ds = load_idx(&ip, Some(&lp)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.sample(0), &[0.0, 1.0]);
        assert_eq!(ds.sample(1), &[1.0, 0.0]);
        assert_eq!(ds.labels(), &[7, 3]);
    }

    #[test]
    fn empty_image_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let img = [0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 28, 0, 0, 0, 28];
        let ip = write_bytes(dir.path(), "img", &img);
        let ds = load_idx(&ip, None).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.dim(), 784);
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let bad = write_bytes(dir.path(), "bad", &[1, 2, 8, 3]);
        assert!(matches!(load_idx(&bad, None), Err(Error::Format { offset: 0, .. })));
        let short = write_bytes(dir.path(), "short", &[0, 0, 8, 3, 0, 0, 0, 5, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2]);
        match load_idx(&short, None) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 18),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_round_trip_quantized_and_float() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded(4);
        let px: Vec<f64> = (0..12).map(|_| f64::from(rng.random::<u8>()) / 255.0).collect();
        let ds = LabeledDataset::new("q", 4, px, vec![2, 0, 1], ValueRange::Unit).unwrap();
        let (ip, lp) = (dir.path().join("i.gz"), dir.path().join("l.gz"));
        save_idx(&ds, &ip, Some(&lp)).unwrap();
        let back = load_idx(&ip, Some(&lp)).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.labels(), ds.labels());

        let f = gen_sphere_ood(3, 5, 2.5, &mut rng).unwrap();
        let fp = dir.path().join("f.idx");
        save_idx(&f, &fp, None).unwrap();
        let fb = load_idx(&fp, None).unwrap();
        assert_eq!(fb.samples(), f.samples());
        assert_eq!(fb.range(), ValueRange::Unbounded);
    }

    #[test]
    fn gaussian_noise_moments_and_clamp() {
        let mut rng = seeded(11);
        let raw = gen_gaussian_noise(1000, 1000, false, &mut rng);
        let mean = raw.samples().iter().sum::<f64>() / raw.samples().len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        let clamped = gen_gaussian_noise(50, 784, true, &mut rng);
        assert!(clamped.samples().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(clamped.range(), ValueRange::Unit);
        assert_eq!(
            gen_gaussian_noise(5, 4, true, &mut seeded(1)),
            gen_gaussian_noise(5, 4, true, &mut seeded(1))
        );
    }

    #[test]
    fn uniform_noise_moments_and_range() {
        let ds = gen_uniform_noise(1000, 1000, &mut seeded(12));
        let s = ds.samples();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(gen_uniform_noise(3, 3, &mut seeded(2)), gen_uniform_noise(3, 3, &mut seeded(2)));
    }

    #[test]
    fn sphere_ood_norms_and_isotropy() {
        let ds = gen_sphere_ood(1000, 784, 9.5, &mut seeded(13)).unwrap();
        for i in 0..ds.len() {
            assert!((norm(ds.sample(i)) - 9.5).abs() < 1e-9);
        }
        let mut total = 0.0;
        let mut pairs = 0.0;
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                total += crate::linalg::dot(ds.sample(i), ds.sample(j)) / (9.5 * 9.5);
                pairs += 1.0;
            }
        }
        assert!((total / pairs).abs() < 0.05);
        assert!(gen_sphere_ood(1, 3, 0.0, &mut seeded(1)).is_err());
    }

    #[test]
    fn unit_cube_radius_bound() {
        let ds = gen_uniform_noise(20, 784, &mut seeded(3));
        assert!(ds.max_norm() <= 28.0);
    }

    #[test]
    fn toy_geometry() {
        let ds = gen_toy3d(500, &mut seeded(14)).unwrap();
        assert_eq!(ds.class_counts(), vec![500, 500]);
        let mut min_dist = f64::INFINITY;
        for i in 0..ds.len() {
            let p = ds.sample(i);
            assert!((norm(p) - 1.0).abs() < 1e-12);
            if ds.label(i) == 0 {
                assert!(p.iter().all(|&v| v > 0.0));
            } else {
                assert!(p.iter().all(|&v| v < 0.0));
            }
        }
        for i in (0..ds.len()).filter(|&i| ds.label(i) == 0) {
            for j in (0..ds.len()).filter(|&j| ds.label(j) == 1) {
                let d: f64 = ds.sample(i).iter().zip(ds.sample(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                min_dist = min_dist.min(d.sqrt());
            }
        }
        assert!(min_dist >= 0.5);
    }

    #[test]
    fn off_octant_points_avoid_inlier_octants() {
        let ds = gen_off_octant_sphere(200, &mut seeded(5));
        for i in 0..ds.len() {
            assert!(!in_toy_octants(ds.sample(i)));
        }
    }

    fn balanced(n_per: usize, classes: usize) -> LabeledDataset {
        let n = n_per * classes;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let samples: Vec<f64> = (0..n).map(|i| i as f64).collect();
        LabeledDataset::new("b", 1, samples, labels, ValueRange::Unbounded).unwrap()
    }

    #[test]
    fn split_is_stratified_partition() {
        let ds = balanced(50, 2);
        let (a, b) = split(&ds, 0.5, &mut seeded(6)).unwrap();
        assert_eq!(a.class_counts(), vec![25, 25]);
        assert_eq!(b.class_counts(), vec![25, 25]);
        let mut all: Vec<f64> = a.samples().iter().chain(b.samples()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, ds.samples());
        let (a2, _) = split(&ds, 0.5, &mut seeded(6)).unwrap();
        assert_eq!(a, a2);
        assert!(split(&ds, 1.0, &mut seeded(6)).is_err());
    }

    #[test]
    fn class_filter_keeps_and_relabels() {
        let ds = balanced(3, 10);
        let low = class_filter(&ds, &[0, 1, 2, 3, 4], false).unwrap();
        assert!(low.labels().iter().all(|&y| y <= 4));
        assert_eq!(low.class_counts(), vec![3; 5]);
        let all = class_filter(&ds, &(0..10).collect::<Vec<_>>(), false).unwrap();
        assert_eq!(all, ds);
        let high = class_filter(&ds, &[9, 5, 6, 7, 8], true).unwrap();
        assert_eq!(high.class_counts(), vec![3; 5]);
        assert_eq!(high.sample(0), &[5.0]);
        assert_eq!(high.label(0), 0);
        assert!(class_filter(&ds, &[42], false).is_err());
        assert!(class_filter(&ds, &[], false).is_err());
    }

    #[test]
    fn unit_range_is_enforced() {
        assert!(LabeledDataset::new("x", 1, vec![1.5], vec![0], ValueRange::Unit).is_err());
    }
}

//! Generated outliers with their provenance.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, save_idx, LabeledDataset, ValueRange};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OodType {
    /// Off-manifold: pushed along the normal bundle.
    I,
    /// On-manifold: decoded from the class ellipsoid surface.
    II,
}

impl fmt::Display for OodType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodType::I => "I",
            OodType::II => "II",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRecord {
    pub kind: OodType,
    pub source_class: usize,
    /// Index of the perturbed training sample (Type I only).
    pub source_index: Option<usize>,
    /// Perturbation length (Type I only).
    pub beta: Option<f64>,
    /// Latent Mahalanobis radius (Type II only).
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodBatch {
    dim: usize,
    samples: Vec<f64>,
    records: Vec<OodRecord>,
    latents: Vec<Option<Vec<f64>>>,
}

impl OodBatch {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            samples: Vec::new(),
            records: Vec::new(),
            latents: Vec::new(),
        }
    }

    pub fn push(&mut self, x: Vec<f64>, record: OodRecord, latent: Option<Vec<f64>>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::contract(format!(
                "OOD sample has {} values, batch holds {}",
                x.len(),
                self.dim
            )));
        }
        self.samples.extend(x);
        self.records.push(record);
        self.latents.push(latent);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn record(&self, i: usize) -> &OodRecord {
        &self.records[i]
    }

    pub fn records(&self) -> &[OodRecord] {
        &self.records
    }

    /// Latent point that produced sample `i`, when one was kept (Type II).
    pub fn latent(&self, i: usize) -> Option<&[f64]> {
        self.latents[i].as_deref()
    }

    pub fn count(&self, kind: OodType) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }

    pub fn append(&mut self, other: OodBatch) -> Result<()> {
        if other.dim != self.dim && !other.is_empty() {
            return Err(Error::contract("cannot append OOD batches of different widths"));
        }
        self.samples.extend(other.samples);
        self.records.extend(other.records);
        self.latents.extend(other.latents);
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> OodBatch {
        let mut out = OodBatch::new(self.dim);
        for &i in indices {
            out.samples.extend_from_slice(self.sample(i));
            out.records.push(self.records[i].clone());
            out.latents.push(self.latents[i].clone());
        }
        out
    }

    /// The samples as a dataset whose every label is `label`.
    pub fn to_dataset(&self, name: &str, label: usize) -> LabeledDataset {
        let range = if self.samples.iter().all(|v| (0.0..=1.0).contains(v)) {
            ValueRange::Unit
        } else {
            ValueRange::Unbounded
        };
        LabeledDataset::new(name, self.dim, self.samples.clone(), vec![label; self.len()], range)
            .expect("batch shape is consistent")
    }

    /// Clamps every value to `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.samples {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn write_manifest(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "index,type,source_class,source_index,beta,radius")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for (i, r) in self.records.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{},{},{},{}",
                r.kind,
                r.source_class,
                r.source_index.map(|s| s.to_string()).unwrap_or_default(),
                opt(r.beta),
                opt(r.radius)
            )?;
        }
        Ok(())
    }

    /// Writes the samples as an IDX file (f64 unless every value is in
    /// `[0, 1]` and the dataset is declared unit range) and the CSV manifest.
    pub fn save(&self, images: &Path, manifest: &Path) -> Result<()> {
        let mut ds = self.to_dataset("ood", 0);
        if ds.range() == ValueRange::Unit {
            // Quantizing to bytes would move points off their exact β shell.
            ds = LabeledDataset::new("ood", self.dim, self.samples.clone(), vec![0; self.len()], ValueRange::Unbounded)?;
        }
        save_idx(&ds, images, None)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(manifest)?);
        self.write_manifest(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Reads a batch written by [`OodBatch::save`]. Latent points are not
    /// stored, so they come back empty.
    pub fn load(images: &Path, manifest: &Path) -> Result<Self> {
        let ds = load_idx(images, None)?;
        let text = std::fs::read_to_string(manifest)?;
        let bad = |line: usize, what: &str| Error::Format {
            path: manifest.to_path_buf(),
            offset: text.split_inclusive('\n').take(line.saturating_sub(1)).map(|l| l.len() as u64).sum(),
            message: format!("manifest line {line}: {what}"),
        };
        let mut lines = text.lines();
        if lines.next() != Some("index,type,source_class,source_index,beta,radius") {
            return Err(bad(1, "unexpected header"));
        }
        let mut batch = OodBatch::new(ds.dim());
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 || f[0].parse::<usize>().ok() != Some(k) {
                return Err(bad(lineno, "malformed record"));
            }
            let kind = match f[1] {
                "I" => OodType::I,
                "II" => OodType::II,
                _ => return Err(bad(lineno, "type must be I or II")),
            };
            let opt_f = |s: &str| -> std::result::Result<Option<f64>, ()> {
                if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| ()) }
            };
            let rec = OodRecord {
                kind,
                source_class: f[2].parse().map_err(|_| bad(lineno, "bad source_class"))?,
                source_index: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad(lineno, "bad source_index"))?)
                },
                beta: opt_f(f[4]).map_err(|_| bad(lineno, "bad beta"))?,
                radius: opt_f(f[5]).map_err(|_| bad(lineno, "bad radius"))?,
            };
            if k >= ds.len() {
                return Err(bad(lineno, "more records than images"));
            }
            batch.push(ds.sample(k).to_vec(), rec, None)?;
        }
        if batch.len() != ds.len() {
            return Err(bad(0, "record count differs from image count"));
        }
        Ok(batch)
    }
}

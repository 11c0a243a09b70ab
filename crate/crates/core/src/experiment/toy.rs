//! Point clouds of a finished toy run, for external plotting.

use std::io::Write;
use std::path::PathBuf;

use super::{prepare_data, ExperimentConfig, RunDir};
use crate::batch::OodBatch;
use crate::error::{Error, Result};

/// Coordinates in the plane orthogonal to `(1, 1, 1)`, on the basis
/// `(1, −1, 0)/√2`, `(1, 1, −2)/√6`.
pub fn project_plane(p: &[f64]) -> (f64, f64) {
    let u = (p[0] - p[1]) / 2f64.sqrt();
    let v = (p[0] + p[1] - 2.0 * p[2]) / 6f64.sqrt();
    (u, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPlotData {
    pub points_csv: PathBuf,
    pub projection_csv: PathBuf,
    /// `(tag, count)` in emission order.
    pub counts: Vec<(String, usize)>,
}

/// Writes `toy-points-*.csv` (`x,y,z,tag`) and `toy-projection-*.csv`
/// (`u,v,tag`) from a finished run's generated batches. A trailing `class`
/// column holds the label of inliers and the source class of generated points.
pub fn emit_toy_plotdata(cfg: &ExperimentConfig) -> Result<ToyPlotData> {
    if cfg.dataset != "toy3d" {
        return Err(Error::contract("plot data is only defined for the toy3d dataset"));
    }
    let run = RunDir::new(cfg)?;
    let load = |which: &str| -> Result<OodBatch> {
        let (img, man) = (run.artifact(which, "idx"), run.artifact(which, "csv"));
        if !img.is_file() || !man.is_file() {
            return Err(Error::contract(format!(
                "missing {} from a finished toy run",
                img.display()
            )));
        }
        OodBatch::load(&img, &man)
    };
    let type1 = load("ood-type1")?;
    let type2 = load("ood-type2")?;
    let train = prepare_data(cfg)?.train;

    let mut rows: Vec<([f64; 3], String, usize)> = Vec::new();
    for i in 0..train.len() {
        let s = train.sample(i);
        rows.push(([s[0], s[1], s[2]], format!("class{}", train.label(i)), train.label(i)));
    }
    for (batch, tag) in [(&type1, "type1"), (&type2, "type2")] {
        for i in 0..batch.len() {
            let s = batch.sample(i);
            rows.push(([s[0], s[1], s[2]], tag.to_owned(), batch.record(i).source_class));
        }
    }
    let points_csv = run.artifact("toy-points", "csv");
    let projection_csv = run.artifact("toy-projection", "csv");
    let mut pw = std::io::BufWriter::new(std::fs::File::create(&points_csv)?);
    let mut qw = std::io::BufWriter::new(std::fs::File::create(&projection_csv)?);
    writeln!(pw, "x,y,z,tag,class")?;
    writeln!(qw, "u,v,tag,class")?;
    let mut counts: Vec<(String, usize)> = Vec::new();
    for (p, tag, class) in &rows {
        writeln!(pw, "{:?},{:?},{:?},{tag},{class}", p[0], p[1], p[2])?;
        let (u, v) = project_plane(p);
        writeln!(qw, "{u:?},{v:?},{tag},{class}")?;
        match counts.iter_mut().find(|(t, _)| t == tag) {
            Some(c) => c.1 += 1,
            None => counts.push((tag.clone(), 1)),
        }
    }
    pw.flush()?;
    qw.flush()?;
    Ok(ToyPlotData {
        points_csv,
        projection_csv,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_kills_the_diagonal() {
        let (u, v) = project_plane(&[0.3, 0.3, 0.3]);
        assert!(u.abs() < 1e-15 && v.abs() < 1e-15);
        let (u, v) = project_plane(&[1.0, 0.0, 0.0]);
        assert!((u - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((v - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        // the basis is orthonormal: in-plane vectors keep their length
        let w = [1.0, -2.0, 1.0];
        let (u, v) = project_plane(&w);
        assert!(((u * u + v * v) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn missing_artifacts_are_contract_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::toy3d();
        cfg.out_dir = dir.path().to_string_lossy().into_owned();
        assert!(matches!(emit_toy_plotdata(&cfg), Err(Error::Contract(_))));
    }
}

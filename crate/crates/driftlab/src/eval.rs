//! Point metrics, comparison tables, benchmark timing, and reproducibility
//! fingerprints for assimilation and forecast experiments.
//!
//! Everything here writes plot-ready CSV with a fixed column order and
//! shortest-roundtrip float formatting, so a rerun under the same config and
//! seed produces byte-identical files. Field snapshots use the same raw
//! little-endian f32 layout as the dataset chunks, with a JSON sidecar.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::tracer::minimal_image;

/// Root-mean-square difference between equal-length vectors.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Config("rmse of empty vectors".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "rmse length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// RMSE between two-layer fields, per layer and pooled over both.
#[derive(Clone, Copy, Debug)]
pub struct FieldErrors {
    pub upper: f64,
    pub lower: f64,
    pub both: f64,
}

pub fn field_rmse(a: &[Array2<f64>; 2], b: &[Array2<f64>; 2]) -> Result<FieldErrors> {
    let mut sums = [0.0; 2];
    let mut cells = [0usize; 2];
    for layer in 0..2 {
        if a[layer].dim() != b[layer].dim() {
            return Err(Error::Config("field shape mismatch".into()));
        }
        sums[layer] = a[layer]
            .iter()
            .zip(b[layer].iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        cells[layer] = a[layer].len();
        if cells[layer] == 0 {
            return Err(Error::Config("rmse of empty fields".into()));
        }
    }
    Ok(FieldErrors {
        upper: (sums[0] / cells[0] as f64).sqrt(),
        lower: (sums[1] / cells[1] as f64).sqrt(),
        both: ((sums[0] + sums[1]) / (cells[0] + cells[1]) as f64).sqrt(),
    })
}

/// Tracer position RMSE on minimal-image displacements, so an error across
/// the periodic seam counts its short way around.
pub fn tracer_rmse(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Config("rmse of empty tracer sets".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "tracer count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let dx = minimal_image(p[0], q[0]);
            let dy = minimal_image(p[1], q[1]);
            dx * dx + dy * dy
        })
        .sum();
    Ok((sum / (2 * a.len()) as f64).sqrt())
}

/// One scored assimilation or forecast step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Tracer position error, when the method carries a tracer estimate.
    pub tracer: Option<f64>,
    pub upper: f64,
    pub lower: f64,
    pub both: f64,
    /// Method-reported uncertainty, when the method carries one.
    pub spread: Option<f64>,
}

/// Per-step metric series for one method.
#[derive(Clone, Debug, Serialize)]
pub struct MethodSeries {
    pub method: String,
    pub steps: Vec<StepMetrics>,
}

/// Time-mean metrics past the spin-up window.
#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub steps_scored: usize,
    pub tracer: Option<f64>,
    pub upper: f64,
    pub lower: f64,
    pub both: f64,
    pub mean_spread: Option<f64>,
    pub wall_seconds: f64,
}

impl MethodSeries {
    /// Arithmetic mean of the per-step metrics, excluding the first `spinup`
    /// steps while the filter forgets its initialization. Optional columns
    /// aggregate only when every scored step carries them.
    pub fn summarize(&self, spinup: usize, wall_seconds: f64) -> Result<MethodSummary> {
        let scored = &self.steps[self.steps.len().min(spinup)..];
        if scored.is_empty() {
            return Err(Error::Config(format!(
                "spin-up of {spinup} leaves no scored steps for {}",
                self.method
            )));
        }
        let n = scored.len() as f64;
        let mean = |f: fn(&StepMetrics) -> f64| scored.iter().map(f).sum::<f64>() / n;
        let opt_mean = |f: fn(&StepMetrics) -> Option<f64>| {
            let vals: Vec<f64> = scored.iter().filter_map(f).collect();
            (vals.len() == scored.len()).then(|| vals.iter().sum::<f64>() / n)
        };
        Ok(MethodSummary {
            method: self.method.clone(),
            steps_scored: scored.len(),
            tracer: opt_mean(|s| s.tracer),
            upper: mean(|s| s.upper),
            lower: mean(|s| s.lower),
            both: mean(|s| s.both),
            mean_spread: opt_mean(|s| s.spread),
            wall_seconds,
        })
    }
}

/// Comparison report: summaries for every method plus the fingerprint that
/// pins down config, data, and weights.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub fingerprint: String,
    pub spinup: usize,
    pub summaries: Vec<MethodSummary>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Per-step series table, one row per (method, step).
pub fn write_series_csv(path: &Path, series: &[MethodSeries]) -> Result<()> {
    let mut out = String::from("method,step,tracer_rmse,upper_rmse,lower_rmse,two_layer_rmse,spread\n");
    for s in series {
        for m in &s.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.method,
                m.step,
                fmt_opt(m.tracer),
                m.upper,
                m.lower,
                m.both,
                fmt_opt(m.spread)
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Summary table, one row per method. Wall clocks stay out of this file so
/// its bytes depend only on config, data, and seed; they go to the timings
/// table instead.
pub fn write_summary_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = String::from(
        "method,steps_scored,tracer_rmse,upper_rmse,lower_rmse,two_layer_rmse,mean_spread\n",
    );
    for s in &report.summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.method,
            s.steps_scored,
            fmt_opt(s.tracer),
            s.upper,
            s.lower,
            s.both,
            fmt_opt(s.mean_spread)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Measured wall clocks, one row per method. Kept apart from the metric
/// tables because timing is never bit-reproducible.
pub fn write_timings_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = String::from("method,wall_seconds\n");
    for s in &report.summaries {
        out.push_str(&format!("{},{}\n", s.method, s.wall_seconds));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One benchmark measurement: median wall-clock seconds per assimilation
/// step for a method at a given problem size.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub grid: usize,
    pub tracer_count: usize,
    /// Ensemble size for sample-based methods, 0 otherwise.
    pub ensemble: usize,
    pub cycles: usize,
    pub seconds_per_step: f64,
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut out = String::from("method,grid,tracer_count,ensemble,cycles,seconds_per_step\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.grid, r.tracer_count, r.ensemble, r.cycles, r.seconds_per_step
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Median over `repeats` timed batches of the per-step wall clock. The
/// closure runs one batch and reports how many assimilation steps it took.
pub fn median_seconds_per_step<F>(repeats: usize, mut run: F) -> Result<f64>
where
    F: FnMut() -> Result<usize>,
{
    let mut per = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let steps = run()?;
        if steps == 0 {
            return Err(Error::Config("benchmark batch ran zero steps".into()));
        }
        per.push(t0.elapsed().as_secs_f64() / steps as f64);
    }
    per.sort_by(f64::total_cmp);
    Ok(per[(per.len() - 1) / 2])
}

/// Hash of the canonicalized config plus whatever data and weights identity
/// the run used. JSON objects serialize with sorted keys, so two configs
/// that differ only in key order fingerprint identically.
pub fn config_fingerprint(
    config: &serde_json::Value,
    manifest: Option<&Manifest>,
    weights_meta: Option<&serde_json::Value>,
) -> String {
    let mut h = Sha256::new();
    let mut feed = |tag: &str, bytes: &[u8]| {
        h.update(tag.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    feed("config", config.to_string().as_bytes());
    if let Some(m) = manifest {
        feed("manifest", serde_json::to_string(m).expect("manifest serializes").as_bytes());
    }
    if let Some(w) = weights_meta {
        feed("weights", w.to_string().as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file, for output comparison across reruns.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format_version: String,
    grid: String,
    layers: String,
    dtype: String,
    byte_order: String,
    layout: String,
    crc32: String,
}

/// Write a two-layer field snapshot: `<name>.bin` holds layer-major,
/// row-major little-endian f32 values, `<name>.json` describes the layout
/// and carries a checksum.
pub fn write_field_snapshot(dir: &Path, name: &str, fields: &[Array2<f64>; 2]) -> Result<()> {
    let n = fields[0].dim().0;
    if fields.iter().any(|f| f.dim() != (n, n)) {
        return Err(Error::Config("snapshot layers must be square and equal-sized".into()));
    }
    let mut bytes = Vec::with_capacity(2 * n * n * 4);
    for layer in fields {
        for v in layer.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let header = SnapshotHeader {
        format_version: "1".into(),
        grid: n.to_string(),
        layers: "2".into(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        layout: "layer-major row-major".into(),
        crc32: crc32fast::hash(&bytes).to_string(),
    };
    fs::create_dir_all(dir)?;
    let mut bin = fs::File::create(dir.join(format!("{name}.bin")))?;
    bin.write_all(&bytes)?;
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(dir.join(format!("{name}.json")), json + "\n")?;
    Ok(())
}

/// Read back a snapshot written by [`write_field_snapshot`], verifying the
/// checksum.
pub fn read_field_snapshot(dir: &Path, name: &str) -> Result<[Array2<f64>; 2]> {
    let header_path = dir.join(format!("{name}.json"));
    let bin_path = dir.join(format!("{name}.bin"));
    let header: SnapshotHeader = serde_json::from_str(
        &fs::read_to_string(&header_path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", header_path.display())))?,
    )
    .map_err(|e| Error::Format(format!("{}: {e}", header_path.display())))?;
    let n: usize = header
        .grid
        .parse()
        .map_err(|_| Error::Format("snapshot grid is not an integer".into()))?;
    let bytes = fs::read(&bin_path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", bin_path.display())))?;
    if crc32fast::hash(&bytes).to_string() != header.crc32 {
        return Err(Error::Format(format!("{}: checksum mismatch", bin_path.display())));
    }
    if bytes.len() != 2 * n * n * 4 {
        return Err(Error::Format(format!("{}: unexpected length", bin_path.display())));
    }
    let mut fields = [Array2::zeros((n, n)), Array2::zeros((n, n))];
    for (j, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        let (layer, cell) = (j / (n * n), j % (n * n));
        fields[layer][[cell / n, cell % n]] = v;
    }
    Ok(fields)
}

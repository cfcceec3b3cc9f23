//! Observation datasets: generation from the flow solver and the on-disk
//! layout.
//!
//! A dataset directory holds `manifest.json` plus `chunk_0000.bin`,
//! `chunk_0001.bin`, ... Every numeric manifest field is a decimal string so
//! the manifest survives any JSON reader untouched. Chunks carry a 16-byte
//! header (8-byte magic, u32 version, u32 record count) followed by
//! little-endian f32 records; each chunk's payload CRC32 lives in the
//! manifest and loading refuses to proceed on a mismatch.
//!
//! One record per observation instant: the two stored stream-function grids
//! (spatially subsampled, with measurement noise added to both the tracer
//! positions and the stored fields) followed by the noisy tracer positions.

use crate::error::{Error, Result};
use crate::qg::{stream_tag, QGParams, QGSolver};
use crate::rng::{stream_rng, stream_seed};
use crate::tracer::{observe, tracer_step, Interpolation, TracerSet};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHUNK_MAGIC: &[u8; 8] = b"DLCHUNK\0";
pub const CHUNK_VERSION: u32 = 1;
pub const MANIFEST_VERSION: &str = "1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Solver steps discarded before the first record.
    pub warmup_steps: u64,
    /// Observation records to store.
    pub n_records: usize,
    /// Observation interval; the stride in solver steps is round(dt_obs/dt).
    pub dt_obs: f64,
    /// Keep every k-th grid point per axis in stored fields.
    pub spatial_stride: usize,
    pub tracer_count: usize,
    /// Transport noise std in the tracer SDE.
    pub tracer_sigma: f64,
    /// Std of the initial tracer cluster around the domain center.
    pub tracer_init_std: f64,
    /// Measurement noise std, applied to positions and stored fields alike.
    pub obs_noise_std: f64,
    /// Std of the white-noise PV start.
    pub init_std: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub records_per_chunk: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 1,
            warmup_steps: 1000,
            n_records: 2501,
            dt_obs: 0.04,
            spatial_stride: 2,
            tracer_count: 16,
            tracer_sigma: 0.1,
            tracer_init_std: 0.1,
            obs_noise_std: 0.01,
            init_std: 10.0,
            train_frac: 0.8,
            val_frac: 0.1,
            records_per_chunk: 256,
        interpolation: Interpolation::Bilinear,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, qg: &QGParams) -> Result<()> {
        if self.n_records < 2 {
            return Err(Error::Config("n_records must be at least 2".into()));
        }
        if self.spatial_stride == 0 || qg.n % self.spatial_stride != 0 {
            return Err(Error::Config(format!(
                "spatial_stride {} must divide the solver grid {}",
                self.spatial_stride, qg.n
            )));
        }
        if self.tracer_count == 0 {
            return Err(Error::Config("tracer_count must be positive".into()));
        }
        if self.obs_subsample(qg) == 0 {
            return Err(Error::Config(format!(
                "dt_obs {} is below the solver step {}",
                self.dt_obs, qg.dt
            )));
        }
        if self.records_per_chunk == 0 {
            return Err(Error::Config("records_per_chunk must be positive".into()));
        }
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0) {
            return Err(Error::Config(
                "train_frac and val_frac must be positive and leave room for a test split".into(),
            ));
        }
        Ok(())
    }

    pub fn obs_subsample(&self, qg: &QGParams) -> u64 {
        (self.dt_obs / qg.dt).round() as u64
    }
}

/// One observation instant, in f64 after storage rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub psi: [Array2<f64>; 2],
    pub positions: Vec<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkEntry {
    pub file: String,
    pub records: String,
    pub crc32: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub solver_grid: String,
    pub data_grid: String,
    pub layers: String,
    pub tracer_count: String,
    pub n_records: String,
    pub dt: String,
    pub dt_obs: String,
    pub obs_subsample: String,
    pub warmup_steps: String,
    pub spatial_stride: String,
    pub tracer_sigma: String,
    pub tracer_init_std: String,
    pub obs_noise_std: String,
    pub init_std: String,
    pub seed: String,
    pub interpolation: String,
    /// Solver parameters, stringified, so model-based baselines can rebuild
    /// the generating dynamics.
    pub qg: BTreeMap<String, String>,
    /// Contiguous [start, end) record ranges, disjoint and ordered.
    pub splits: BTreeMap<String, [String; 2]>,
    pub record_floats: String,
    pub chunks: Vec<ChunkEntry>,
}

impl Manifest {
    pub fn data_grid(&self) -> usize {
        self.data_grid.parse().expect("manifest data_grid")
    }

    pub fn tracer_count(&self) -> usize {
        self.tracer_count.parse().expect("manifest tracer_count")
    }

    pub fn n_records(&self) -> usize {
        self.n_records.parse().expect("manifest n_records")
    }

    pub fn dt_obs_value(&self) -> f64 {
        self.dt_obs.parse().expect("manifest dt_obs")
    }

    pub fn split_range(&self, split: Split) -> Result<std::ops::Range<usize>> {
        let key = match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let [a, b] = self
            .splits
            .get(key)
            .ok_or_else(|| Error::Format(format!("manifest lacks split '{key}'")))?;
        let start: usize = a.parse().map_err(|_| Error::Format(format!("bad split bound {a}")))?;
        let end: usize = b.parse().map_err(|_| Error::Format(format!("bad split bound {b}")))?;
        Ok(start..end)
    }

    pub fn qg_params(&self) -> Result<QGParams> {
        let get = |k: &str| -> Result<&String> {
            self.qg.get(k).ok_or_else(|| Error::Format(format!("manifest qg map lacks '{k}'")))
        };
        let f = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("bad qg field '{k}'")))
        };
        let u = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("bad qg field '{k}'")))
        };
        Ok(QGParams {
            n: u("n")? as usize,
            kd: f("kd")?,
            beta: f("beta")?,
            u_mean: f("u_mean")?,
            kappa: f("kappa")?,
            nu: f("nu")?,
            hyper_order: u("hyper_order")? as u32,
            dt: f("dt")?,
            topo_cos_x: f("topo_cos_x")?,
            topo_cos_2y: f("topo_cos_2y")?,
            forcing_std: f("forcing_std")?,
            forcing_seed: u("forcing_seed")?,
        })
    }
}

fn qg_to_map(p: &QGParams) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("n".into(), p.n.to_string());
    m.insert("kd".into(), p.kd.to_string());
    m.insert("beta".into(), p.beta.to_string());
    m.insert("u_mean".into(), p.u_mean.to_string());
    m.insert("kappa".into(), p.kappa.to_string());
    m.insert("nu".into(), p.nu.to_string());
    m.insert("hyper_order".into(), p.hyper_order.to_string());
    m.insert("dt".into(), p.dt.to_string());
    m.insert("topo_cos_x".into(), p.topo_cos_x.to_string());
    m.insert("topo_cos_2y".into(), p.topo_cos_2y.to_string());
    m.insert("forcing_std".into(), p.forcing_std.to_string());
    m.insert("forcing_seed".into(), p.forcing_seed.to_string());
    m
}

/// Run the flow+tracer system and collect records in memory.
pub fn generate_records(qg: &QGParams, cfg: &DatasetConfig) -> Result<Vec<Record>> {
    cfg.validate(qg)?;
    let solver = QGSolver::new(qg.clone())?;
    let mut state = solver.random_init(cfg.init_std, cfg.seed);
    let mut tracers = TracerSet::init_gaussian(
        cfg.tracer_count,
        cfg.tracer_init_std,
        cfg.tracer_sigma,
        stream_seed(cfg.seed, &[stream_tag::TRACER_INIT]),
    );
    let sub = cfg.obs_subsample(qg);
    let stride = cfg.spatial_stride;
    let g = qg.n / stride;

    let advance = |state: &mut crate::qg::QGState, tracers: &mut TracerSet, steps: u64| -> Result<()> {
        for _ in 0..steps {
            let snap = solver.snapshot(state);
            tracer_step(tracers, &snap, qg.dt, state.step_index, 0, cfg.interpolation)?;
            solver.step(state)?;
        }
        Ok(())
    };

    advance(&mut state, &mut tracers, cfg.warmup_steps)?;

    let mut records = Vec::with_capacity(cfg.n_records);
    for r in 0..cfg.n_records {
        let snap = solver.snapshot(&state);
        let mut psi = [Array2::zeros((g, g)), Array2::zeros((g, g))];
        for l in 0..2 {
            let mut rng = stream_rng(cfg.seed, &[stream_tag::FIELD_OBS, r as u64, l as u64]);
            for j in 0..g {
                for i in 0..g {
                    let noise: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                    let v = snap.psi[l][[j * stride, i * stride]] + cfg.obs_noise_std * noise;
                    psi[l][[j, i]] = v as f32 as f64;
                }
            }
        }
        let obs = observe(&tracers, cfg.obs_noise_std, r as u64, cfg.seed);
        let positions: Vec<[f64; 2]> =
            obs.positions.iter().map(|p| [p[0] as f32 as f64, p[1] as f32 as f64]).collect();
        records.push(Record { psi, positions });
        if r + 1 < cfg.n_records {
            advance(&mut state, &mut tracers, sub)?;
        }
    }
    Ok(records)
}

fn split_ranges(cfg: &DatasetConfig) -> BTreeMap<String, [String; 2]> {
    let n = cfg.n_records;
    let train_end = ((n as f64) * cfg.train_frac).floor() as usize;
    let val_end = train_end + ((n as f64) * cfg.val_frac).floor() as usize;
    let mut m = BTreeMap::new();
    m.insert("train".into(), ["0".into(), train_end.to_string()]);
    m.insert("val".into(), [train_end.to_string(), val_end.to_string()]);
    m.insert("test".into(), [val_end.to_string(), n.to_string()]);
    m
}

fn record_to_floats(rec: &Record, out: &mut Vec<f32>) {
    for l in 0..2 {
        out.extend(rec.psi[l].iter().map(|&v| v as f32));
    }
    for p in &rec.positions {
        out.push(p[0] as f32);
        out.push(p[1] as f32);
    }
}

/// Generate and write a dataset directory. Returns the manifest.
pub fn generate_to_dir(qg: &QGParams, cfg: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    let records = generate_records(qg, cfg)?;
    std::fs::create_dir_all(dir)?;
    let g = qg.n / cfg.spatial_stride;
    let record_floats = 2 * g * g + 2 * cfg.tracer_count;

    let mut chunks = Vec::new();
    for (ci, chunk) in records.chunks(cfg.records_per_chunk).enumerate() {
        let mut floats = Vec::with_capacity(chunk.len() * record_floats);
        for rec in chunk {
            record_to_floats(rec, &mut floats);
        }
        let mut payload = Vec::with_capacity(floats.len() * 4);
        for v in &floats {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&payload);
        let crc = hasher.finalize();

        let file = format!("chunk_{ci:04}.bin");
        let mut f = std::fs::File::create(dir.join(&file))?;
        f.write_all(CHUNK_MAGIC)?;
        f.write_all(&CHUNK_VERSION.to_le_bytes())?;
        f.write_all(&(chunk.len() as u32).to_le_bytes())?;
        f.write_all(&payload)?;
        chunks.push(ChunkEntry {
            file,
            records: chunk.len().to_string(),
            crc32: format!("{crc}"),
        });
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION.into(),
        solver_grid: qg.n.to_string(),
        data_grid: g.to_string(),
        layers: "2".into(),
        tracer_count: cfg.tracer_count.to_string(),
        n_records: records.len().to_string(),
        dt: qg.dt.to_string(),
        dt_obs: cfg.dt_obs.to_string(),
        obs_subsample: cfg.obs_subsample(qg).to_string(),
        warmup_steps: cfg.warmup_steps.to_string(),
        spatial_stride: cfg.spatial_stride.to_string(),
        tracer_sigma: cfg.tracer_sigma.to_string(),
        tracer_init_std: cfg.tracer_init_std.to_string(),
        obs_noise_std: cfg.obs_noise_std.to_string(),
        init_std: cfg.init_std.to_string(),
        seed: cfg.seed.to_string(),
        interpolation: match cfg.interpolation {
            Interpolation::Bilinear => "bilinear".into(),
            Interpolation::SpectralDirect => "spectral_direct".into(),
        },
        qg: qg_to_map(qg),
        splits: split_ranges(cfg),
        record_floats: record_floats.to_string(),
        chunks,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn split_records(&self, split: Split) -> Result<&[Record]> {
        let r = self.manifest.split_range(split)?;
        Ok(&self.records[r])
    }
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::MissingArtifact(format!("no dataset manifest at {}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format_version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let g: usize = manifest.data_grid();
    let tracer_count = manifest.tracer_count();
    let record_floats: usize =
        manifest.record_floats.parse().map_err(|_| Error::Format("bad record_floats".into()))?;
    if record_floats != 2 * g * g + 2 * tracer_count {
        return Err(Error::Format("record_floats inconsistent with grid and tracer count".into()));
    }

    let mut records = Vec::with_capacity(manifest.n_records());
    for entry in &manifest.chunks {
        let path = dir.join(&entry.file);
        let mut f = std::fs::File::open(&path)
            .map_err(|_| Error::MissingArtifact(format!("missing chunk {}", path.display())))?;
        let mut header = [0u8; 16];
        f.read_exact(&mut header)?;
        if &header[0..8] != CHUNK_MAGIC {
            return Err(Error::Format(format!("{}: bad magic", entry.file)));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != CHUNK_VERSION {
            return Err(Error::Format(format!("{}: unsupported chunk version {version}", entry.file)));
        }
        let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let declared: usize =
            entry.records.parse().map_err(|_| Error::Format("bad chunk record count".into()))?;
        if count != declared {
            return Err(Error::Format(format!(
                "{}: header says {count} records, manifest says {declared}",
                entry.file
            )));
        }
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;
        if payload.len() != count * record_floats * 4 {
            return Err(Error::Format(format!("{}: truncated payload", entry.file)));
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&payload);
        let crc = hasher.finalize();
        let declared_crc: u32 =
            entry.crc32.parse().map_err(|_| Error::Format("bad crc32 field".into()))?;
        if crc != declared_crc {
            return Err(Error::Format(format!(
                "{}: checksum mismatch (stored {declared_crc}, computed {crc})",
                entry.file
            )));
        }

        for r in 0..count {
            let base = r * record_floats * 4;
            let mut at = base;
            let mut next = || {
                let v = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
                at += 4;
                v as f64
            };
            let mut psi = [Array2::zeros((g, g)), Array2::zeros((g, g))];
            for l in 0..2 {
                for j in 0..g {
                    for i in 0..g {
                        psi[l][[j, i]] = next();
                    }
                }
            }
            let mut positions = Vec::with_capacity(tracer_count);
            for _ in 0..tracer_count {
                let x = next();
                let y = next();
                positions.push([x, y]);
            }
            records.push(Record { psi, positions });
        }
    }
    if records.len() != manifest.n_records() {
        return Err(Error::Format(format!(
            "chunks held {} records, manifest says {}",
            records.len(),
            manifest.n_records()
        )));
    }
    Ok(Dataset { manifest, records })
}

/// Deterministically pick k of n tracer indices, sorted ascending.
pub fn choose_subset(n: usize, k: usize, seed: u64) -> Vec<usize> {
    assert!(k <= n, "cannot choose {k} of {n}");
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, &[0x53_55_42]);
    // Partial Fisher-Yates: fix the first k slots.
    for i in 0..k {
        let j = i + (rand::Rng::random_range(&mut rng, 0..(n - i) as u64)) as usize;
        idx.swap(i, j);
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// A record restricted to a subset of its tracers (fields untouched).
pub fn subsample_tracers(rec: &Record, subset: &[usize]) -> Record {
    Record {
        psi: rec.psi.clone(),
        positions: subset.iter().map(|&i| rec.positions[i]).collect(),
    }
}

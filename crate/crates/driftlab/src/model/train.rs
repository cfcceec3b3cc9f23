//! Training stages for the surrogate: forecast-only warm-up, observation
//! noise calibration, assimilation-aware fine-tuning, and the uncertainty
//! head regression. All stages draw windows deterministically from seeded
//! streams and keep the last finite parameters if a step diverges.

use std::ops::Range;

use rand::Rng;
use serde::Serialize;

use crate::cg::{run_filter, LatentPosterior};
use crate::dataset::choose_subset;
use crate::error::{Error, Result};
use crate::model::batch::{extract_window, field_stats, tensor_to_fields, TrainingArrays};
use crate::model::loss::composite_loss_var;
use crate::model::surrogate::{Surrogate, FROZEN_PREFIX};
use crate::nn::adam::Adam;
use crate::nn::encode::{angular_embed_flat, fourier_encode_rows};
use crate::nn::tape::Tape;
use crate::nn::tensor::Tensor;
use crate::rng::stream_rng;

const TRAIN_TAG: u64 = 0x5452_4149;
const UNCERTAINTY_SAMPLES_PER_EPOCH: usize = 64;
const NOISE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TrainLogEntry {
    pub stage: u8,
    pub epoch: usize,
    pub total: f64,
    pub ae: f64,
    pub u: f64,
    pub z: f64,
    pub da: f64,
}

#[derive(Debug, Default, Serialize)]
pub struct TrainReport {
    pub entries: Vec<TrainLogEntry>,
    pub diverged: bool,
}

impl TrainReport {
    fn extend(&mut self, other: TrainReport) {
        self.entries.extend(other.entries);
        self.diverged |= other.diverged;
    }
}

fn check_range(arrays: &TrainingArrays, range: &Range<usize>, window_len: usize) -> Result<()> {
    if range.end > arrays.fields.len() || range.start >= range.end {
        return Err(Error::Config(format!(
            "training range {range:?} outside the {} available records",
            arrays.fields.len()
        )));
    }
    if range.end - range.start < window_len {
        return Err(Error::Config(format!(
            "training range {range:?} shorter than one window of {window_len}"
        )));
    }
    Ok(())
}

/// Shared per-stage loop: sample windows, evaluate the loss, step Adam.
/// Returns early with `diverged` set if a loss or gradient goes non-finite,
/// restoring the parameters from the start of the failing epoch.
fn run_stage(
    s: &mut Surrogate,
    arrays: &TrainingArrays,
    range: &Range<usize>,
    stage: u8,
    epochs: usize,
    windows_per_epoch: usize,
    window_len: usize,
    with_da: bool,
) -> Result<TrainReport> {
    check_range(arrays, range, window_len)?;
    let mut report = TrainReport::default();
    let mut rng = stream_rng(s.cfg.seed, &[TRAIN_TAG, stage as u64]);
    let mut adam = Adam::new(s.cfg.lr);
    let subset_size = s.cfg.batch_tracers.min(arrays.tracer_count);

    for epoch in 0..epochs {
        let snapshot = s.params.clone();
        let mut sums = [0.0f64; 5];
        for _ in 0..windows_per_epoch {
            let start = rng.random_range(range.start..=range.end - window_len);
            let ids = choose_subset(arrays.tracer_count, subset_size, rng.random());
            let window = extract_window(arrays, start, window_len, &ids);
            let noise = if with_da { Some(s.sigma1_for_ids(&ids)?) } else { None };

            let tape = Tape::new();
            let bound = s.params.bind(&tape);
            let loss = composite_loss_var(s, &tape, &bound, &window, noise.as_deref())?;
            let b = loss.breakdown();
            if !b.total.is_finite() {
                s.params = snapshot;
                report.diverged = true;
                return Ok(report);
            }
            let mut grads = bound.gradients(&tape.backward(loss.total));
            grads.retain(|k, _| !k.starts_with(FROZEN_PREFIX));
            if grads.values().any(|g| !g.all_finite()) {
                s.params = snapshot;
                report.diverged = true;
                return Ok(report);
            }
            adam.step(&mut s.params, &grads);
            for (acc, v) in sums.iter_mut().zip([b.total, b.ae, b.u, b.z, b.da]) {
                *acc += v;
            }
        }
        let n = windows_per_epoch as f64;
        report.entries.push(TrainLogEntry {
            stage,
            epoch,
            total: sums[0] / n,
            ae: sums[1] / n,
            u: sums[2] / n,
            z: sums[3] / n,
            da: sums[4] / n,
        });
    }
    Ok(report)
}

/// Stage 1: autoencoder and one-step forecast objective, no assimilation
/// term. Also freezes the field normalization from the training split.
pub fn train_stage1(s: &mut Surrogate, arrays: &TrainingArrays, range: Range<usize>) -> Result<TrainReport> {
    check_range(arrays, &range, s.cfg.n_s + 1)?;
    let (mean, std) = field_stats(arrays, range.clone());
    s.set_normalization(mean, std);
    run_stage(
        s,
        arrays,
        &range,
        1,
        s.cfg.stage1_epochs,
        s.cfg.stage1_windows_per_epoch,
        s.cfg.n_s + 1,
        false,
    )
}

/// Fit per-coordinate observation noise stds as one-step prediction
/// residuals over the training split, then freeze them. Stores both the
/// exact per-tracer table and a pooled per-slot version for other counts.
pub fn calibrate_observation_noise(
    s: &mut Surrogate,
    arrays: &TrainingArrays,
    range: Range<usize>,
) -> Result<()> {
    check_range(arrays, &range, 2)?;
    let i = arrays.tracer_count;
    let d_z = s.d_z();
    let mut sumsq = vec![0.0f64; 4 * i];
    let mut count = 0usize;
    for n in range.start..range.end - 1 {
        let z = s.encode_value(&arrays.fields[n]);
        let tape = Tape::new();
        let bound = s.params.bind(&tape);
        let feats = tape.leaf(fourier_encode_rows(&arrays.positions[n], s.cfg.k_freq));
        let (f1, g1) = s.coefficients_var(&bound, feats);
        let f1v = f1.value();
        let g1v = g1.value();
        let target = angular_embed_flat(&arrays.positions[n + 1]);
        for row in 0..4 * i {
            let mut pred = f1v.data()[row];
            for (c, zc) in z.iter().enumerate() {
                pred += g1v.data()[row * d_z + c] * zc;
            }
            sumsq[row] += (pred - target[row]).powi(2);
        }
        count += 1;
    }
    let full: Vec<f64> = sumsq.iter().map(|sq| (sq / count as f64).sqrt().max(NOISE_FLOOR)).collect();
    let mut pooled = vec![0.0f64; 4];
    for (row, v) in full.iter().enumerate() {
        pooled[row % 4] += v * v;
    }
    for v in &mut pooled {
        *v = (*v / i as f64).sqrt().max(NOISE_FLOOR);
    }
    s.params.set("const.sigma1_full", Tensor::from_vec(full));
    s.params.set("const.sigma1_pooled", Tensor::from_vec(pooled));
    s.i_train = i;
    Ok(())
}

/// Stage 2: the full objective with the assimilation term running through
/// the filter recursion. Requires calibrated observation noise.
pub fn train_stage2(s: &mut Surrogate, arrays: &TrainingArrays, range: Range<usize>) -> Result<TrainReport> {
    run_stage(
        s,
        arrays,
        &range,
        2,
        s.cfg.stage2_epochs,
        s.cfg.stage2_windows_per_epoch,
        s.cfg.n_l + 1,
        true,
    )
}

/// Stage 3: regress per-layer posterior residual scales on the observation
/// set, training only the uncertainty head. Targets come from running the
/// trained filter over the training split.
pub fn train_uncertainty(s: &mut Surrogate, arrays: &TrainingArrays, range: Range<usize>) -> Result<TrainReport> {
    check_range(arrays, &range, s.cfg.n_b + 2)?;
    let d_z = s.d_z();
    let records: Vec<usize> = (range.start..range.end).collect();
    let obs: Vec<nalgebra::DVector<f64>> = records
        .iter()
        .map(|&r| nalgebra::DVector::from_vec(angular_embed_flat(&arrays.positions[r])))
        .collect();
    let init = LatentPosterior::spherical(d_z, 0.1);
    let posts = run_filter(|k, _| s.eval_coefficients(&arrays.positions[records[k]]), &obs, init)?;

    // per-record per-layer residual RMS, past the filter burn-in
    let mut targets: Vec<(usize, [f64; 2])> = Vec::new();
    for (k, post) in posts.iter().enumerate().skip(s.cfg.n_b + 1) {
        let rec = records[k];
        let dec = tensor_to_fields(&s.decode_value(post.mu.as_slice()));
        let truth = tensor_to_fields(&arrays.fields[rec]);
        let mut rms = [0.0f64; 2];
        for layer in 0..2 {
            let diff = &dec[layer] - &truth[layer];
            rms[layer] = (diff.mapv(|v| v * v).mean().unwrap()).sqrt();
        }
        targets.push((rec, rms));
    }
    if targets.is_empty() {
        return Err(Error::Config("no records left after the burn-in".into()));
    }

    let mut report = TrainReport::default();
    let mut rng = stream_rng(s.cfg.seed, &[TRAIN_TAG, 3]);
    let mut adam = Adam::new(s.cfg.lr);
    let samples = UNCERTAINTY_SAMPLES_PER_EPOCH.min(targets.len());
    for epoch in 0..s.cfg.uncertainty_epochs {
        let snapshot = s.params.clone();
        let mut sum = 0.0;
        for _ in 0..samples {
            let (rec, rms) = targets[rng.random_range(0..targets.len())];
            let tape = Tape::new();
            let bound = s.params.bind(&tape);
            let emb = angular_embed_flat(&arrays.positions[rec]);
            let x = tape.leaf(Tensor::new(&[arrays.positions[rec].len(), 4], emb).unwrap());
            let out = s.uncertainty_var(&bound, x);
            let target = tape.leaf(Tensor::new(&[1, 2], rms.to_vec()).unwrap());
            let d = out.sub(target);
            let loss = d.mul(d).mean_all();
            if !loss.item().is_finite() {
                s.params = snapshot;
                report.diverged = true;
                return Ok(report);
            }
            let mut grads = bound.gradients(&tape.backward(loss));
            grads.retain(|k, _| k.starts_with("unc."));
            adam.step(&mut s.params, &grads);
            sum += loss.item();
        }
        report.entries.push(TrainLogEntry {
            stage: 3,
            epoch,
            total: sum / samples as f64,
            ae: 0.0,
            u: 0.0,
            z: 0.0,
            da: 0.0,
        });
    }
    Ok(report)
}

/// All stages in order; stops early (parameters intact at the last finite
/// state) if any stage diverges.
pub fn train_full(s: &mut Surrogate, arrays: &TrainingArrays, range: Range<usize>) -> Result<TrainReport> {
    let mut report = train_stage1(s, arrays, range.clone())?;
    if report.diverged {
        return Ok(report);
    }
    calibrate_observation_noise(s, arrays, range.clone())?;
    report.extend(train_stage2(s, arrays, range.clone())?);
    if report.diverged {
        return Ok(report);
    }
    report.extend(train_uncertainty(s, arrays, range)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;
    use crate::model::batch::training_arrays;
    use crate::model::config::SurrogateConfig;
    use ndarray::Array2;

    fn toy_records(count: usize, grid: usize, tracers: usize, seed: u64) -> Vec<Record> {
        let mut rng = stream_rng(seed, &[0x7E57]);
        (0..count)
            .map(|_| Record {
                psi: [
                    Array2::from_shape_fn((grid, grid), |_| rng.random_range(-1.0..1.0)),
                    Array2::from_shape_fn((grid, grid), |_| rng.random_range(-0.5..0.5)),
                ],
                positions: (0..tracers)
                    .map(|_| [rng.random_range(0.0..6.28), rng.random_range(0.0..6.28)])
                    .collect(),
            })
            .collect()
    }

    fn tiny_config() -> SurrogateConfig {
        SurrogateConfig {
            z_h: 2,
            z_w: 2,
            n_c: 2,
            hidden: 8,
            rank: 2,
            k_freq: 2,
            n_s: 1,
            n_l: 4,
            n_b: 1,
            uncertainty_hidden: 4,
            stage1_epochs: 4,
            stage1_windows_per_epoch: 4,
            stage2_epochs: 2,
            stage2_windows_per_epoch: 2,
            uncertainty_epochs: 3,
            batch_tracers: 3,
            seed: 13,
            ..SurrogateConfig::default()
        }
    }

    #[test]
    fn stage1_reduces_the_objective_on_toy_data() {
        let records = toy_records(20, 4, 3, 31);
        let arrays = training_arrays(&records);
        let mut s = Surrogate::init(tiny_config(), 4, 3).unwrap();
        let report = train_stage1(&mut s, &arrays, 0..20).unwrap();
        assert!(!report.diverged);
        assert_eq!(report.entries.len(), 4);
        let first = report.entries.first().unwrap().total;
        let last = report.entries.last().unwrap().total;
        assert!(last < first, "loss went {first} -> {last}");
        assert!(s.params.all_finite());
    }

    #[test]
    fn calibration_freezes_positive_noise_of_the_right_shape() {
        let records = toy_records(12, 4, 3, 32);
        let arrays = training_arrays(&records);
        let mut s = Surrogate::init(tiny_config(), 4, 3).unwrap();
        calibrate_observation_noise(&mut s, &arrays, 0..12).unwrap();
        let full = s.params.get("const.sigma1_full").unwrap();
        let pooled = s.params.get("const.sigma1_pooled").unwrap();
        assert_eq!(full.shape(), &[12]);
        assert_eq!(pooled.shape(), &[4]);
        assert!(full.data().iter().all(|&v| v > 0.0));
        assert!(pooled.data().iter().all(|&v| v > 0.0));
        // pooled is the per-slot rms of the full table
        let expect = (full.data()[0].powi(2) + full.data()[4].powi(2) + full.data()[8].powi(2)) / 3.0;
        assert!((pooled.data()[0] - expect.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn full_pipeline_runs_all_stages_and_stays_finite() {
        let records = toy_records(24, 4, 3, 33);
        let arrays = training_arrays(&records);
        let mut s = Surrogate::init(tiny_config(), 4, 3).unwrap();
        let report = train_full(&mut s, &arrays, 0..24).unwrap();
        assert!(!report.diverged);
        let stages: Vec<u8> = report.entries.iter().map(|e| e.stage).collect();
        assert!(stages.contains(&1) && stages.contains(&2) && stages.contains(&3));
        assert!(s.params.all_finite());
        assert!(s.params.contains("const.sigma1_full"));
        // the trained model can now produce filter coefficients at any count
        assert!(s.eval_coefficients(&[[1.0, 2.0], [3.0, 4.0]]).is_ok());
    }

    #[test]
    fn subset_gather_matches_the_full_table() {
        let records = toy_records(12, 4, 3, 34);
        let arrays = training_arrays(&records);
        let mut s = Surrogate::init(tiny_config(), 4, 3).unwrap();
        calibrate_observation_noise(&mut s, &arrays, 0..12).unwrap();
        let full = s.params.get("const.sigma1_full").unwrap().data().to_vec();
        let sub = s.sigma1_for_ids(&[2, 0]).unwrap();
        assert_eq!(&sub[0..4], &full[8..12]);
        assert_eq!(&sub[4..8], &full[0..4]);
    }

    #[test]
    fn training_ranges_are_validated() {
        let records = toy_records(6, 4, 3, 35);
        let arrays = training_arrays(&records);
        let mut s = Surrogate::init(tiny_config(), 4, 3).unwrap();
        assert!(matches!(train_stage1(&mut s, &arrays, 0..40), Err(Error::Config(_))));
        assert!(matches!(train_stage2(&mut s, &arrays, 0..3), Err(Error::Config(_))));
    }
}

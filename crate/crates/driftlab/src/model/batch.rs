//! Conversions between dataset records and the tensors the model consumes,
//! plus training-window extraction.

use ndarray::Array2;

use crate::dataset::Record;
use crate::nn::tensor::Tensor;

/// Records reshaped once up front: fields as [1, H, W, 2] tensors (channel
/// order: upper layer, lower layer) and tracer positions per record.
pub struct TrainingArrays {
    pub fields: Vec<Tensor>,
    pub positions: Vec<Vec<[f64; 2]>>,
    pub grid: usize,
    pub tracer_count: usize,
}

pub fn fields_to_tensor(psi: &[Array2<f64>; 2]) -> Tensor {
    let n = psi[0].nrows();
    let mut data = Vec::with_capacity(n * n * 2);
    for iy in 0..n {
        for ix in 0..n {
            data.push(psi[0][[iy, ix]]);
            data.push(psi[1][[iy, ix]]);
        }
    }
    Tensor::new(&[1, n, n, 2], data).unwrap()
}

pub fn tensor_to_fields(t: &Tensor) -> [Array2<f64>; 2] {
    let sh = t.shape();
    let (h, w) = (sh[1], sh[2]);
    let mut out = [Array2::zeros((h, w)), Array2::zeros((h, w))];
    for iy in 0..h {
        for ix in 0..w {
            for layer in 0..2 {
                out[layer][[iy, ix]] = t.data()[(iy * w + ix) * 2 + layer];
            }
        }
    }
    out
}

pub fn training_arrays(records: &[Record]) -> TrainingArrays {
    assert!(!records.is_empty());
    let grid = records[0].psi[0].nrows();
    let tracer_count = records[0].positions.len();
    TrainingArrays {
        fields: records.iter().map(|r| fields_to_tensor(&r.psi)).collect(),
        positions: records.iter().map(|r| r.positions.clone()).collect(),
        grid,
        tracer_count,
    }
}

/// Per-layer mean and std over a record range, for the frozen normalization.
pub fn field_stats(arrays: &TrainingArrays, range: std::ops::Range<usize>) -> ([f64; 2], [f64; 2]) {
    let mut mean = [0.0f64; 2];
    let mut count = 0usize;
    for rec in &arrays.fields[range.clone()] {
        for chunk in rec.data().chunks_exact(2) {
            mean[0] += chunk[0];
            mean[1] += chunk[1];
        }
        count += rec.len() / 2;
    }
    mean[0] /= count as f64;
    mean[1] /= count as f64;
    let mut var = [0.0f64; 2];
    for rec in &arrays.fields[range] {
        for chunk in rec.data().chunks_exact(2) {
            var[0] += (chunk[0] - mean[0]).powi(2);
            var[1] += (chunk[1] - mean[1]).powi(2);
        }
    }
    let std = [(var[0] / count as f64).sqrt().max(1e-12), (var[1] / count as f64).sqrt().max(1e-12)];
    (mean, std)
}

/// One training window: borrowed field tensors and a tracer-subset view of
/// the positions.
pub struct Window<'a> {
    pub fields: &'a [Tensor],
    pub positions: Vec<Vec<[f64; 2]>>,
}

pub fn extract_window<'a>(
    arrays: &'a TrainingArrays,
    start: usize,
    len: usize,
    tracer_subset: &[usize],
) -> Window<'a> {
    let positions = arrays.positions[start..start + len]
        .iter()
        .map(|ps| tracer_subset.iter().map(|&i| ps[i]).collect())
        .collect();
    Window { fields: &arrays.fields[start..start + len], positions }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_preserves_layer_layout() {
        let mut psi = [Array2::zeros((4, 4)), Array2::zeros((4, 4))];
        for iy in 0..4 {
            for ix in 0..4 {
                psi[0][[iy, ix]] = (iy * 4 + ix) as f64;
                psi[1][[iy, ix]] = -((iy * 4 + ix) as f64);
            }
        }
        let t = fields_to_tensor(&psi);
        assert_eq!(t.shape(), &[1, 4, 4, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 0.0);
        assert_eq!(t.data()[2], 1.0);
        assert_eq!(t.data()[3], -1.0);
        let back = tensor_to_fields(&t);
        assert_eq!(back[0], psi[0]);
        assert_eq!(back[1], psi[1]);
    }

    #[test]
    fn stats_match_direct_two_pass_computation() {
        let recs: Vec<Record> = (0..3)
            .map(|k| Record {
                psi: [
                    Array2::from_elem((2, 2), k as f64),
                    Array2::from_elem((2, 2), 2.0 * k as f64 + 1.0),
                ],
                positions: vec![[0.0, 0.0]],
            })
            .collect();
        let arrays = training_arrays(&recs);
        let (mean, std) = field_stats(&arrays, 0..3);
        assert!((mean[0] - 1.0).abs() < 1e-15);
        assert!((mean[1] - 3.0).abs() < 1e-15);
        let expect_std0 = (2.0f64 / 3.0).sqrt();
        assert!((std[0] - expect_std0).abs() < 1e-15);
        assert!((std[1] - 2.0 * expect_std0).abs() < 1e-15);
    }

    #[test]
    fn window_subsets_tracers_in_order() {
        let recs: Vec<Record> = (0..2)
            .map(|k| Record {
                psi: [Array2::zeros((2, 2)), Array2::zeros((2, 2))],
                positions: vec![[k as f64, 0.0], [k as f64, 1.0], [k as f64, 2.0]],
            })
            .collect();
        let arrays = training_arrays(&recs);
        let w = extract_window(&arrays, 0, 2, &[2, 0]);
        assert_eq!(w.positions[1], vec![[1.0, 2.0], [1.0, 0.0]]);
    }
}

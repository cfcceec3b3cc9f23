//! The two no-skill reference estimates: the training-time mean field and
//! the previous truth.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Training-split time mean per layer, accumulated in one streaming pass.
pub struct Climatology {
    pub mean: [Array2<f64>; 2],
    count: usize,
}

impl Climatology {
    pub fn from_fields<'a, I>(fields: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [Array2<f64>; 2]>,
    {
        let mut iter = fields.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Config("climatology needs at least one field".into()))?;
        let mut clim = Climatology { mean: [first[0].clone(), first[1].clone()], count: 1 };
        for pair in iter {
            clim.count += 1;
            let w = 1.0 / clim.count as f64;
            for layer in 0..2 {
                ndarray::Zip::from(&mut clim.mean[layer]).and(&pair[layer]).for_each(|m, &v| {
                    *m += (v - *m) * w;
                });
            }
        }
        Ok(clim)
    }

    pub fn records_used(&self) -> usize {
        self.count
    }
}

/// Persistence pairs: the field at each record is the forecast for `lead`
/// records later. Yields (forecast, verification) index pairs.
pub fn persistence_pairs(record_count: usize, lead: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..record_count.saturating_sub(lead)).map(move |n| (n, n + lead))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streaming_mean_matches_the_direct_average() {
        let fields: Vec<[Array2<f64>; 2]> = (0..7)
            .map(|k| {
                [
                    Array2::from_shape_fn((4, 4), |(iy, ix)| (k * 16 + iy * 4 + ix) as f64),
                    Array2::from_elem((4, 4), (k as f64).sin()),
                ]
            })
            .collect();
        let clim = Climatology::from_fields(fields.iter()).unwrap();
        assert_eq!(clim.records_used(), 7);
        let mut direct = [Array2::<f64>::zeros((4, 4)), Array2::<f64>::zeros((4, 4))];
        for pair in &fields {
            direct[0] += &pair[0];
            direct[1] += &pair[1];
        }
        for layer in 0..2 {
            direct[layer].mapv_inplace(|v| v / 7.0);
            for (a, b) in clim.mean[layer].iter().zip(direct[layer].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(Climatology::from_fields(std::iter::empty()).is_err());
    }

    #[test]
    fn persistence_pairs_cover_the_overlap() {
        let pairs: Vec<(usize, usize)> = persistence_pairs(5, 2).collect();
        assert_eq!(pairs, vec![(0, 2), (1, 3), (2, 4)]);
        assert_eq!(persistence_pairs(3, 5).count(), 0);
    }
}

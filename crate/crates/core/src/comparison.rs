//! Cross-source analyses: average heatmaps, relative heatmaps and the
//! human-versus-classifier overlap score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{top_percent_mask, BinaryMask};
use crate::tensor::Tensor;

/// Highlight fraction for relative heatmaps built from human boxes.
pub const HUMAN_RELATIVE_FRACTION: f64 = 0.10;
/// Highlight fraction for relative heatmaps built from classifier saliency.
pub const CLASSIFIER_RELATIVE_FRACTION: f64 = 0.05;

/// Elementwise mean, accumulated in `f64`.
pub fn average_heatmap(heatmaps: &[Tensor]) -> Result<Tensor> {
    let first = heatmaps
        .first()
        .ok_or_else(|| Error::EmptyInput("no heatmaps to average".into()))?;
    let mut sums = vec![0f64; first.len()];
    for h in heatmaps {
        h.expect_same_shape(first)?;
        for (s, &v) in sums.iter_mut().zip(h.data()) {
            *s += v as f64;
        }
    }
    let n = heatmaps.len() as f64;
    Tensor::new(first.shape(), sums.into_iter().map(|s| (s / n) as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeHeatmap {
    /// `individual − average`; may be negative.
    pub diff: Tensor,
    pub highlight: BinaryMask,
}

pub fn relative_heatmap(individual: &Tensor, average: &Tensor, top_fraction: f64) -> Result<RelativeHeatmap> {
    individual.dims2()?;
    let diff = individual.sub(average)?;
    let highlight = top_percent_mask(&diff, top_fraction)?;
    Ok(RelativeHeatmap { diff, highlight })
}

/// Set sizes behind an overlap score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub a: usize,
    pub b: usize,
    pub intersection: usize,
    pub union: usize,
}

impl OverlapCounts {
    pub fn jaccard(&self) -> Result<f64> {
        if self.union == 0 {
            return Err(Error::Degenerate("both masks are empty".into()));
        }
        Ok(self.intersection as f64 / self.union as f64)
    }
}

pub fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> Result<OverlapCounts> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = a.shape();
    let (mut intersection, mut union) = (0, 0);
    for i in 0..h * w {
        let (x, y) = (a.is_set(i), b.is_set(i));
        intersection += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(OverlapCounts {
        a: a.count(),
        b: b.count(),
        intersection,
        union,
    })
}

/// Jaccard index `|A∩B| / |A∪B|`.
pub fn overlap_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    overlap_counts(a, b)?.jaccard()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, w: usize, data: Vec<f32>) -> Tensor {
        Tensor::new([h, w], data).unwrap()
    }

    #[test]
    fn average_examples() {
        let a = t(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(average_heatmap(std::slice::from_ref(&a)).unwrap(), a);
        let zeros = Tensor::zeros([3, 3]).unwrap();
        let twos = Tensor::full([3, 3], 2.0).unwrap();
        assert_eq!(
            average_heatmap(&[zeros.clone(), twos]).unwrap(),
            Tensor::full([3, 3], 1.0).unwrap()
        );
        assert!(average_heatmap(&[]).is_err());
        assert!(average_heatmap(&[zeros, Tensor::zeros([3, 2]).unwrap()]).is_err());
    }

    #[test]
    fn relative_of_equal_maps_takes_first_pixels() {
        let a = t(4, 5, (0..20).map(|v| v as f32).collect());
        let rel = relative_heatmap(&a, &a, 0.10).unwrap();
        assert!(rel.diff.data().iter().all(|&d| d == 0.0));
        assert_eq!(rel.highlight.indices(), vec![0, 1]);
    }

    #[test]
    fn relative_single_excess_pixel_ranks_first() {
        let avg = Tensor::full([4, 4], 1.0).unwrap();
        let mut ind = avg.clone();
        ind.data_mut()[11] = 3.0;
        let rel = relative_heatmap(&ind, &avg, CLASSIFIER_RELATIVE_FRACTION).unwrap();
        assert_eq!(rel.highlight.indices(), vec![11]);
        assert_eq!(rel.diff.data()[11], 2.0);
    }

    #[test]
    fn relative_rejects_shape_mismatch() {
        let a = Tensor::zeros([2, 2]).unwrap();
        let b = Tensor::zeros([2, 3]).unwrap();
        assert!(relative_heatmap(&a, &b, 0.1).is_err());
    }

    #[test]
    fn overlap_examples() {
        let m = |idx: &[usize]| BinaryMask::from_indices(5, 5, idx.iter().copied()).unwrap();
        let a = m(&[0, 1, 2, 3, 4, 5]);
        assert_eq!(overlap_score(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap_score(&a, &m(&[10, 11])).unwrap(), 0.0);
        let b = m(&[4, 5, 6, 7, 8, 9]);
        assert_eq!(overlap_score(&a, &b).unwrap(), 0.2);
        assert_eq!(
            overlap_counts(&a, &b).unwrap(),
            OverlapCounts {
                a: 6,
                b: 6,
                intersection: 2,
                union: 10
            }
        );
        assert!(overlap_score(&m(&[]), &m(&[])).is_err());
        let other = BinaryMask::from_indices(4, 4, [0]).unwrap();
        assert!(overlap_score(&a, &other).is_err());
    }
}

//! Correlation feature images: the system-status snapshots the
//! autoencoder learns to reconstruct.
//!
//! For one window of `d` timestamps over `n` series (sensors plus any
//! embedding pseudo-series), entry `(i, j)` of the image is the inner
//! product of series `i` and `j` across the window, divided by `d`. The
//! matrix is symmetric by construction and, for data scaled to [0, 1],
//! bounded by 1. Shape similarity between two signals shows up as a large
//! entry; a correlation break during a fault wipes a whole row and column.

use crate::error::{Error, Result};
use crate::preprocess::{Label, TimeSeriesSet, Window, WindowIndex};

/// One window's correlation matrix plus provenance.
#[derive(Debug, Clone)]
pub struct FeatureImage {
    /// Row-major `side x side` matrix.
    pub matrix: Vec<f64>,
    pub side: usize,
    pub window_start: usize,
    pub experiment: usize,
    pub label: Label,
}

/// Mean pairwise products over `values[.][start..start+d]`, row-major
/// `n x n`. Computes the upper triangle and mirrors it.
pub fn correlation_matrix(values: &[Vec<f64>], start: usize, d: usize) -> Vec<f64> {
    let n = values.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        let xi = &values[i][start..start + d];
        for j in i..n {
            let xj = &values[j][start..start + d];
            let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
            let v = dot / d as f64;
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    m
}

/// Mean of each series over the window, used when embedding pseudo-series
/// are assembled on the autodiff graph.
pub fn window_means(values: &[Vec<f64>], start: usize, d: usize) -> Vec<f64> {
    values
        .iter()
        .map(|s| s[start..start + d].iter().sum::<f64>() / d as f64)
        .collect()
}

/// Builds the feature image for one window of `x`.
pub fn build_feature_image(x: &TimeSeriesSet, w: &Window, d: usize) -> Result<FeatureImage> {
    if w.start + d > x.len() {
        return Err(Error::invalid(
            "build_feature_image",
            format!("window [{}, {}) runs past length {}", w.start, w.start + d, x.len()),
        ));
    }
    Ok(FeatureImage {
        matrix: correlation_matrix(&x.values, w.start, d),
        side: x.n_series(),
        window_start: w.start,
        experiment: w.experiment,
        label: w.label,
    })
}

/// Convenience: images for every window in an index.
pub fn build_feature_images(x: &TimeSeriesSet, idx: &WindowIndex) -> Result<Vec<FeatureImage>> {
    idx.windows
        .iter()
        .map(|w| build_feature_image(x, w, idx.d))
        .collect()
}

/// One model input: `h` consecutive images from a single experiment,
/// referenced by position into the image list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSample {
    /// Index of the first image; the sample covers `first..first + h`.
    pub first: usize,
    pub experiment: usize,
    pub label: Label,
}

/// Time-ordered images grouped into overlapping h-long model samples.
#[derive(Debug, Clone)]
pub struct FeatureImageSequence {
    pub h: usize,
    pub side: usize,
    pub images: Vec<FeatureImage>,
    pub samples: Vec<SequenceSample>,
    /// Experiments with fewer than `h` images, as (experiment id, image
    /// count). They contribute no samples; the caller decides whether to
    /// warn.
    pub skipped_experiments: Vec<(usize, usize)>,
}

impl FeatureImageSequence {
    /// The images making up one sample, oldest first.
    pub fn sample_images(&self, s: &SequenceSample) -> &[FeatureImage] {
        &self.images[s.first..s.first + self.h]
    }
}

/// Slides a length-`h` run over each experiment's images. An experiment
/// with `N >= h` images yields `N - h + 1` samples; shorter ones yield
/// none and are recorded as skipped.
pub fn build_sequences(images: Vec<FeatureImage>, h: usize) -> Result<FeatureImageSequence> {
    if h == 0 {
        return Err(Error::invalid("build_sequences", "h must be at least 1"));
    }
    if images.is_empty() {
        return Err(Error::invalid("build_sequences", "no feature images"));
    }
    let side = images[0].side;
    if let Some(bad) = images.iter().find(|im| im.side != side) {
        return Err(Error::invalid(
            "build_sequences",
            format!("mixed image sizes: {side} and {}", bad.side),
        ));
    }

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut group_start = 0usize;
    for end in 1..=images.len() {
        let group_done =
            end == images.len() || images[end].experiment != images[group_start].experiment;
        if !group_done {
            continue;
        }
        let count = end - group_start;
        if count < h {
            skipped.push((images[group_start].experiment, count));
        } else {
            for first in group_start..=end - h {
                samples.push(SequenceSample {
                    first,
                    experiment: images[first].experiment,
                    label: images[first].label,
                });
            }
        }
        group_start = end;
    }
    Ok(FeatureImageSequence {
        h,
        side,
        images,
        samples,
        skipped_experiments: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::TimeSeriesSet;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn set_from(values: Vec<Vec<f64>>, experiment_ids: Vec<usize>) -> TimeSeriesSet {
        let names = (0..values.len()).map(|i| format!("s{i}")).collect();
        let labels = experiment_ids
            .iter()
            .map(|&id| (id, if id % 2 == 1 { Label::Anomalous } else { Label::Normal }))
            .collect::<BTreeMap<_, _>>();
        TimeSeriesSet::new(names, values, Vec::new(), experiment_ids, labels, 1.0).unwrap()
    }

    fn window(start: usize) -> Window {
        Window {
            start,
            experiment: 0,
            label: Label::Normal,
        }
    }

    #[test]
    fn all_ones_window_gives_unit_entries() {
        let x = set_from(vec![vec![1.0; 5], vec![1.0; 5]], vec![0; 5]);
        let im = build_feature_image(&x, &window(0), 5).unwrap();
        assert_eq!(im.matrix, vec![1.0; 4]);
    }

    #[test]
    fn orthogonal_series_give_zero() {
        let x = set_from(
            vec![vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]],
            vec![0; 4],
        );
        let im = build_feature_image(&x, &window(0), 4).unwrap();
        assert_eq!(im.matrix[1], 0.0);
        assert_eq!(im.matrix[2], 0.0);
        assert!((im.matrix[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = crate::rng::seeded(61);
        for _ in 0..25 {
            let d = 8;
            let values: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..d).map(|_| crate::rng::uniform(&mut rng, -2.0, 2.0)).collect())
                .collect();
            let x = set_from(values.clone(), vec![0; d]);
            let im = build_feature_image(&x, &window(0), d).unwrap();
            let rows: Vec<&[f64]> = values.iter().map(|v| v.as_slice()).collect();
            let oracle = crate::testkit::feature_image_oracle(&rows);
            crate::testkit::assert_close(&im.matrix, &oracle, 1e-12, "feature image");
        }
    }

    #[test]
    fn matches_matrix_product_form() {
        // M must equal W . W^T / d with W the [n, d] window slice.
        let mut rng = crate::rng::seeded(62);
        let (n, d) = (4, 10);
        let values: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| crate::rng::uniform(&mut rng, 0.0, 1.0)).collect())
            .collect();
        let x = set_from(values.clone(), vec![0; d]);
        let im = build_feature_image(&x, &window(0), d).unwrap();

        let flat: Vec<f64> = values.concat();
        let w = crate::tensor::Tensor::constant(&[n, d], flat).unwrap();
        let product = w
            .matmul(&w.transpose().unwrap())
            .unwrap()
            .scale(1.0 / d as f64)
            .unwrap();
        crate::testkit::assert_close(&im.matrix, &product.to_vec(), 1e-12, "matrix form");
    }

    #[test]
    fn exactly_symmetric() {
        let mut rng = crate::rng::seeded(63);
        let d = 12;
        let values: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..d).map(|_| crate::rng::uniform(&mut rng, -1.0, 1.0)).collect())
            .collect();
        let x = set_from(values, vec![0; d]);
        let im = build_feature_image(&x, &window(0), d).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                // bitwise equality, not tolerance: both triangles share one computation
                assert_eq!(im.matrix[i * 5 + j], im.matrix[j * 5 + i]);
            }
        }
    }

    #[test]
    fn scaling_one_series_scales_its_row_and_column() {
        let mut rng = crate::rng::seeded(64);
        let d = 10;
        let values: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| crate::rng::uniform(&mut rng, 0.1, 1.0)).collect())
            .collect();
        let c = 3.7;
        let mut scaled = values.clone();
        for v in scaled[1].iter_mut() {
            *v *= c;
        }
        let base = build_feature_image(&set_from(values, vec![0; d]), &window(0), d).unwrap();
        let bumped = build_feature_image(&set_from(scaled, vec![0; d]), &window(0), d).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let factor = match (i == 1, j == 1) {
                    (true, true) => c * c,
                    (true, false) | (false, true) => c,
                    (false, false) => 1.0,
                };
                let expect = base.matrix[i * 3 + j] * factor;
                assert!((bumped.matrix[i * 3 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_timestep_noise_is_bounded_and_shrinks_with_d() {
        // Bumping one timestep of one series by eta moves an off-diagonal
        // entry by at most eta*max|x|/d and the perturbed diagonal by
        // (2*x*eta + eta^2)/d, so the worst case over the matrix is
        // (2*eta*max|x| + eta^2)/d. The bound shrinks as d grows.
        let mut rng = crate::rng::seeded(65);
        let eta = 0.05;
        let mut last_bound = f64::INFINITY;
        for d in [10usize, 30, 60] {
            let values: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..d).map(|_| crate::rng::uniform(&mut rng, 0.0, 1.0)).collect())
                .collect();
            let mut noisy = values.clone();
            noisy[2][d / 2] += eta;
            let a = build_feature_image(&set_from(values, vec![0; d]), &window(0), d).unwrap();
            let b = build_feature_image(&set_from(noisy, vec![0; d]), &window(0), d).unwrap();
            let max_change = a
                .matrix
                .iter()
                .zip(&b.matrix)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let bound = (2.0 * eta * 1.0 + eta * eta) / d as f64;
            assert!(max_change <= bound + 1e-12, "d={d}: {max_change} > {bound}");
            assert!(bound < last_bound);
            last_bound = bound;
        }
    }

    #[test]
    fn sequence_counts() {
        let images: Vec<FeatureImage> = (0..10)
            .map(|k| FeatureImage {
                matrix: vec![0.0; 4],
                side: 2,
                window_start: k * 2,
                experiment: 0,
                label: Label::Normal,
            })
            .collect();
        let seq = build_sequences(images.clone(), 5).unwrap();
        assert_eq!(seq.samples.len(), 6);
        let seq1 = build_sequences(images.clone(), 1).unwrap();
        assert_eq!(seq1.samples.len(), 10);
        let seq2 = build_sequences(images[..3].to_vec(), 2).unwrap();
        assert_eq!(seq2.samples[0].first, 0);
        assert_eq!(seq2.sample_images(&seq2.samples[0]).len(), 2);
        assert_eq!(seq2.sample_images(&seq2.samples[0])[1].window_start, 2);
    }

    #[test]
    fn sequences_stay_inside_experiments() {
        let mut images = Vec::new();
        for (exp, count) in [(0usize, 4usize), (1, 2), (2, 3)] {
            for k in 0..count {
                images.push(FeatureImage {
                    matrix: vec![0.0],
                    side: 1,
                    window_start: k,
                    experiment: exp,
                    label: Label::Normal,
                });
            }
        }
        let seq = build_sequences(images, 3).unwrap();
        // experiment 0: 2 samples; experiment 1: too short; experiment 2: 1
        assert_eq!(seq.samples.len(), 3);
        assert_eq!(seq.skipped_experiments, vec![(1, 2)]);
        for s in &seq.samples {
            for im in seq.sample_images(s) {
                assert_eq!(im.experiment, s.experiment);
            }
        }
    }

    proptest! {
        #[test]
        fn symmetric_with_nonnegative_diagonal(
            seed in 0u64..1000,
            n in 2usize..6,
            d in 2usize..20,
        ) {
            let mut rng = crate::rng::seeded(seed);
            let values: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| crate::rng::uniform(&mut rng, -5.0, 5.0)).collect())
                .collect();
            let m = correlation_matrix(&values, 0, d);
            for i in 0..n {
                prop_assert!(m[i * n + i] >= 0.0);
                for j in 0..n {
                    prop_assert_eq!(m[i * n + j], m[j * n + i]);
                }
            }
        }
    }
}

mod common;

use std::collections::BTreeMap;

use common::{noisy_copy, schedule, PrototypePredictor};
use genclass::counterfactual::{delta_adjust, heatmap, heatmap_grid, mean_error_tensors};
use genclass::{LatentCodec, LatentTensor, PcaCodec, Space};

#[test]
fn predicted_class_delta_is_zero_and_identity_heatmap_is_delta() {
    let s = schedule();
    let p = PrototypePredictor::new(3, (1, 5, 5), 1, &s);
    let img = noisy_copy(&p, 1, 0.2, 2);
    let codec = LatentCodec::Identity;
    let means = mean_error_tensors(&img, &[0, 1, 2], &p, &codec, &s, 64, 8).unwrap();
    let deltas: BTreeMap<usize, LatentTensor> = means.iter().map(|m| (m.class_index, m.delta.clone())).collect();
    let adj = delta_adjust(&deltas, 1).unwrap();
    assert!(adj[&1].as_slice().iter().all(|v| *v == 0.0));
    for (c, d) in &adj {
        let h = heatmap(d, &codec, 1, *c).unwrap();
        assert_eq!(
            h.values.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            d.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    assert!(means.iter().all(|m| m.n_draws == 64));
    assert!(means[1].mean_squared_error < means[0].mean_squared_error);
}

#[test]
fn shared_draws_make_single_class_calls_consistent() {
    let s = schedule();
    let p = PrototypePredictor::new(3, (1, 4, 4), 4, &s);
    let img = noisy_copy(&p, 0, 0.1, 3);
    let codec = LatentCodec::Identity;
    let all = mean_error_tensors(&img, &[0, 1, 2], &p, &codec, &s, 40, 77).unwrap();
    let one = genclass::counterfactual::mean_error_tensor(&img, 2, &p, &codec, &s, 40, 77).unwrap();
    assert!(one.delta.max_abs_diff(&all[2].delta) < 1e-12);
}

/// Standard error over replications of a mean error tensor entry.
fn replication_se(p: &PrototypePredictor, img: &LatentTensor, n: usize, reps: u64) -> f64 {
    let s = schedule();
    let codec = LatentCodec::Identity;
    let samples: Vec<Vec<f64>> = (0..reps)
        .map(|r| {
            mean_error_tensors(img, &[0], p, &codec, &s, n, 1000 + r).unwrap()[0]
                .delta
                .as_slice()
                .to_vec()
        })
        .collect();
    let len = samples[0].len();
    let mut total = 0.0;
    for j in 0..len {
        let mean = samples.iter().map(|v| v[j]).sum::<f64>() / reps as f64;
        let var = samples.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        total += var.sqrt();
    }
    total / len as f64
}

#[test]
fn monte_carlo_error_scales_as_inverse_sqrt_n() {
    let s = schedule();
    let p = PrototypePredictor::new(2, (1, 4, 4), 9, &s);
    let img = p.protos[0].clone();
    let ratio = replication_se(&p, &img, 100, 10) / replication_se(&p, &img, 400, 10);
    assert!(ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5, "ratio {ratio}");
}

#[test]
fn grid_diagonal_holds_originals() {
    let s = schedule();
    let p = PrototypePredictor::new(3, (1, 4, 4), 2, &s);
    let images: Vec<LatentTensor> = (0..3).map(|c| noisy_copy(&p, c, 0.05, c as u64)).collect();
    let grid = heatmap_grid(&images, &p, &LatentCodec::Identity, &s, 32, 0).unwrap();
    assert_eq!(grid.size(), 3);
    for (c, img) in images.iter().enumerate() {
        assert_eq!(&grid.cells[c][c], img);
    }
    assert!(grid.cells[0][1].as_slice().iter().any(|v| *v != 0.0));
    let mosaic = grid.mosaic();
    assert_eq!(mosaic.shape(), (1, 12, 12));
    let mut max_off: f64 = 0.0;
    for r in 0..3 {
        for c in (0..3).filter(|c| *c != r) {
            for y in 0..4 {
                for x in 0..4 {
                    max_off = max_off.max(mosaic.data()[[0, 4 * r + y, 4 * c + x]].abs());
                }
            }
        }
    }
    assert!((max_off - 1.0).abs() < 1e-12);
}

#[test]
fn pca_heatmap_of_zero_delta_is_zero() {
    let images: Vec<LatentTensor> = (0..12)
        .map(|i| {
            LatentTensor::from_vec((1, 3, 3), (0..9).map(|j| ((i * j) % 7) as f64 / 7.0).collect(), Space::Pixel)
                .unwrap()
        })
        .collect();
    let codec = LatentCodec::Pca(PcaCodec::fit(&images, 3).unwrap());
    let zero = LatentTensor::zeros((3, 1, 1), Space::Latent);
    let h = heatmap(&zero, &codec, 0, 1).unwrap();
    assert_eq!(h.values.shape(), (1, 3, 3));
    assert!(h.values.as_slice().iter().all(|v| *v == 0.0));
}

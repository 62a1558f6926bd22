//! Training-curve probe on 10 Gaussian clusters (N=2000, D_in=64), M=4, K=16,
//! 20 epochs: L_aug strictly decreases over the first five epochs and the mean
//! quantization error decreases every epoch.

use hyperpq::data::gaussian_clusters;
use hyperpq::trainer::{train, TrainConfig};

#[test]
fn loss_and_quantization_error_fall() {
    let (x, _) = gaussian_clusters(2000, 64, 10, 5.0, 1).unwrap();
    // masking erases instance identity on this data, so views differ by noise only
    let cfg = TrainConfig {
        num_subspaces: 4,
        num_codewords: 16,
        epochs: 20,
        lr_start: 3e-3,
        lr_end: 3e-5,
        noise_std: 0.02,
        mask_prob: 0.0,
        ..TrainConfig::default()
    };
    let m = train(&x, &cfg).unwrap().metrics;
    assert_eq!(m.len(), 20);
    let aug: Vec<f64> = m.iter().map(|e| e.loss_aug).collect();
    let qe: Vec<f64> = m.iter().map(|e| e.mean_quant_error).collect();
    assert!(aug[..5].windows(2).all(|w| w[1] < w[0]), "L_aug {aug:?}");
    assert!(qe.windows(2).all(|w| w[1] < w[0]), "quantization error {qe:?}");
}

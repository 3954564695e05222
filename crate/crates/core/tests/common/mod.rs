//! Reference implementations used to check the production kernel. Kept
//! deliberately different in route: f64 scalar loops, no max-shift softmax,
//! multiplicative gating instead of additive log biases.

#![allow(dead_code)]

use stepweave::attention::FeatureBlock;

/// Scalar reference for the biased shared-attention kernel. `similarity` and
/// `mask` are the already-inflated length N·P vectors for `image`.
pub fn oracle_shared_attention(
    blocks: &FeatureBlock,
    similarity: &[f32],
    mask: &[f32],
    image: usize,
) -> Vec<Vec<f64>> {
    let n = blocks.image_count();
    let p = blocks.positions();
    let dk = blocks.key_dim();
    let dv = blocks.value_dim();
    assert_eq!(similarity.len(), n * p, "inflated similarity length");
    assert_eq!(mask.len(), n * p, "inflated mask length");
    let scale = (dk as f64).sqrt();

    let mut out = vec![vec![0.0f64; dv]; p];
    for r in 0..p {
        let mut weights = vec![0.0f64; n * p];
        let mut normalizer = 0.0f64;
        for j in 0..n {
            for c in 0..p {
                let col = j * p + c;
                let gate = similarity[col] as f64 * mask[col] as f64;
                if gate == 0.0 {
                    continue;
                }
                let mut logit = 0.0f64;
                for t in 0..dk {
                    logit += blocks.q(image).get(r, t) as f64 * blocks.k(j).get(c, t) as f64;
                }
                // exp(l + ln g) written as exp(l)·g: same math, different route.
                let w = (logit / scale).exp() * gate;
                weights[col] = w;
                normalizer += w;
            }
        }
        for (col, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let j = col / p;
            let c = col % p;
            let share = w / normalizer;
            for t in 0..dv {
                out[r][t] += share * blocks.v(j).get(c, t) as f64;
            }
        }
    }
    out
}

/// Largest elementwise |kernel − oracle| over a P×d_v output.
pub fn max_abs_diff_vs_oracle(kernel: &stepweave::Mat, oracle: &[Vec<f64>]) -> f64 {
    assert_eq!(kernel.rows(), oracle.len());
    let mut worst = 0.0f64;
    for r in 0..kernel.rows() {
        assert_eq!(kernel.cols(), oracle[r].len());
        for c in 0..kernel.cols() {
            let diff = (kernel.get(r, c) as f64 - oracle[r][c]).abs();
            if diff > worst {
                worst = diff;
            }
        }
    }
    worst
}

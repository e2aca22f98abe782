//! Exact t-SNE for small embedding tables (quadratic in the row count).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 100.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

fn affinities(points: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = points.len();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum();
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    let target = perplexity.min((n - 1) as f64).max(1.0).ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut dot = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let v = (-beta * d2[i * n + j]).exp();
                p[i * n + j] = v;
                sum += v;
                dot += v * d2[i * n + j];
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * dot / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    sym
}

/// Embeds `points` into two dimensions. Deterministic for a fixed seed.
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Vec<[f64; 2]> {
    let n = points.len();
    if n < 2 {
        return vec![[0.0, 0.0]; n];
    }
    let p = affinities(points, cfg.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                let q = 1.0 / (1.0 + d);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let mult = 4.0 * (exaggeration * p[i * n + j] - q / z) * q;
                grad[0] += mult * (y[i][0] - y[j][0]);
                grad[1] += mult * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let same_sign = (grad[d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = if same_sign { (gains[i][d] * 0.8f64).max(0.01) } else { gains[i][d] + 0.2 };
                velocity[i][d] = momentum * velocity[i][d] - cfg.learning_rate * gains[i][d] * grad[d];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        let mean = y.iter().fold([0.0, 0.0], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        for v in y.iter_mut() {
            v[0] -= mean[0] / n as f64;
            v[1] -= mean[1] / n as f64;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters() -> Vec<Vec<f64>> {
        (0..40)
            .map(|i| {
                let base = if i < 20 { 0.0 } else { 10.0 };
                vec![base + (i % 5) as f64 * 0.1, base - (i % 3) as f64 * 0.1, base]
            })
            .collect()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = TsneConfig { iterations: 200, perplexity: 5.0, ..TsneConfig::default() };
        assert_eq!(tsne(&clusters(), &cfg), tsne(&clusters(), &cfg));
    }

    #[test]
    fn separated_clusters_stay_separated() {
        let cfg = TsneConfig { iterations: 300, perplexity: 5.0, learning_rate: 10.0, ..TsneConfig::default() };
        let y = tsne(&clusters(), &cfg);
        let centroid = |r: std::ops::Range<usize>| {
            let n = r.len() as f64;
            r.fold([0.0, 0.0], |a, i| [a[0] + y[i][0] / n, a[1] + y[i][1] / n])
        };
        let (a, b) = (centroid(0..20), centroid(20..40));
        let dist = |p: [f64; 2], c: [f64; 2]| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
        for (i, p) in y.iter().enumerate() {
            let (own, other) = if i < 20 { (a, b) } else { (b, a) };
            assert!(dist(*p, own) < dist(*p, other), "point {i} sits nearer the other cluster");
        }
    }
}

//! Weight initializers: uniform for embeddings, He for convolutions,
//! Xavier for linear layers and orthogonal for recurrent kernels.

use crate::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// He-normal with fan-in = product of all axes but the last.
pub fn he(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| gaussian(rng) * std).collect())
}

/// Xavier-uniform for (fan_in, fan_out) matrices.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], -bound, bound)
}

/// Orthogonal (rows, cols) matrix via Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    // orthonormalize the longer side, then transpose back if needed
    let (m, n, transposed) = if rows >= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (j, col) in basis.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            if transposed {
                data[j * cols + i] = v;
            } else {
                data[i * cols + j] = v;
            }
        }
    }
    Tensor::new(vec![rows, cols], data)
}

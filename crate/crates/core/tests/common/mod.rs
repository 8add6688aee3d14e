//! Shared oracles for the integration suites.
//!
//! Everything in here solves the same problems as the library but by a
//! different route: dense vectors and explicit Gram matrices instead of
//! convolutions, coordinate descent instead of membrane dynamics. The
//! implementations are deliberately plain so they can be checked by eye.

#![allow(dead_code)] // each test binary uses a different subset

use sca_core::lca::Dictionary;
use sca_core::rng::Rng;
use sca_core::tensor::Tensor;

/// A dense sparse-coding problem: unit columns `cols[f]` over an H×W image
/// flattened to a vector. The equivalent convolutional formulation uses
/// whole-image atoms at stride (H, W), which makes the code a single 1×1
/// position per feature — exactly the dense problem.
pub struct DenseInstance {
    pub h: usize,
    pub w: usize,
    pub cols: Vec<Vec<f64>>,
    pub x: Vec<f64>,
}

impl DenseInstance {
    /// Random instance with `f` unit columns and a standard-normal target.
    pub fn random(h: usize, w: usize, f: usize, rng: &mut Rng) -> Self {
        let dict = {
            let mut atoms = Tensor::zeros(&[f, 1, h, w]);
            rng.fill_normal(atoms.data_mut(), 1.0);
            Dictionary::new(atoms, (h, w)).expect("random atoms are nonzero")
        };
        // Read the columns back from the dictionary so both solution routes
        // see bit-identical problem data.
        let cols = (0..f).map(|i| dict.atom(i).to_vec()).collect();
        let mut x = vec![0.0; h * w];
        for v in x.iter_mut() {
            *v = rng.normal();
        }
        DenseInstance { h, w, cols, x }
    }

    pub fn dictionary(&self) -> Dictionary {
        let f = self.cols.len();
        let flat: Vec<f64> = self.cols.iter().flatten().copied().collect();
        let atoms = Tensor::from_vec(&[f, 1, self.h, self.w], flat).unwrap();
        Dictionary::new(atoms, (self.h, self.w)).unwrap()
    }

    pub fn image(&self) -> Tensor {
        Tensor::from_vec(&[1, self.h, self.w], self.x.clone()).unwrap()
    }

    /// Code tensor shape for the convolutional formulation.
    pub fn code_shape(&self) -> [usize; 3] {
        [self.cols.len(), 1, 1]
    }
}

/// Gram matrix G[i][j] = ⟨cols[i], cols[j]⟩.
pub fn gram(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let f = cols.len();
    let mut g = vec![vec![0.0; f]; f];
    for i in 0..f {
        for j in 0..f {
            g[i][j] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
        }
    }
    g
}

/// Bottom-up drive Ψ_i = ⟨cols[i], x⟩.
pub fn dense_drive(cols: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    cols.iter()
        .map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Objective ½‖x − Σ r_i·cols[i]‖² + λ·Σ|r_i|.
pub fn lasso_objective(cols: &[Vec<f64>], x: &[f64], r: &[f64], lambda: f64) -> f64 {
    let mut resid = x.to_vec();
    for (ri, col) in r.iter().zip(cols) {
        for (res, c) in resid.iter_mut().zip(col) {
            *res -= ri * c;
        }
    }
    let fit: f64 = resid.iter().map(|v| v * v).sum::<f64>() * 0.5;
    fit + lambda * r.iter().map(|v| v.abs()).sum::<f64>()
}

/// Non-negative LASSO by cyclic coordinate descent. Each coordinate update
/// is the exact one-dimensional minimizer
///   r_i ← max(0, (⟨d_i, residual⟩ + G_ii·r_i − λ) / G_ii),
/// iterated until the largest coordinate move in a sweep drops below `tol`.
pub fn nonneg_lasso_cd(
    cols: &[Vec<f64>],
    x: &[f64],
    lambda: f64,
    max_sweeps: usize,
    tol: f64,
) -> Vec<f64> {
    let f = cols.len();
    let mut r = vec![0.0; f];
    let mut resid = x.to_vec();
    let sq_norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>())
        .collect();
    for _ in 0..max_sweeps {
        let mut max_move: f64 = 0.0;
        for i in 0..f {
            let corr: f64 = cols[i].iter().zip(&resid).map(|(a, b)| a * b).sum();
            let old = r[i];
            let new = ((corr + sq_norms[i] * old - lambda) / sq_norms[i]).max(0.0);
            if new != old {
                let delta = old - new;
                for (res, c) in resid.iter_mut().zip(&cols[i]) {
                    *res += delta * c;
                }
                r[i] = new;
                max_move = max_move.max(delta.abs());
            }
        }
        if max_move < tol {
            break;
        }
    }
    r
}

/// One explicit-Gram membrane step:
///   P ← P + rate·(Ψ − P − (G − I)·r),  r = max(0, P − λ).
/// Returns the new (P, r). This is the textbook dense update the library's
/// reconstruct-then-reencode formulation must reproduce exactly.
pub fn explicit_gram_step(
    p: &[f64],
    r: &[f64],
    psi: &[f64],
    g: &[Vec<f64>],
    lambda: f64,
    rate: f64,
) -> (Vec<f64>, Vec<f64>) {
    let f = p.len();
    let mut next_p = p.to_vec();
    for i in 0..f {
        let mut lateral = 0.0;
        for j in 0..f {
            let gij = if i == j { g[i][j] - 1.0 } else { g[i][j] };
            lateral += gij * r[j];
        }
        next_p[i] += rate * (psi[i] - p[i] - lateral);
    }
    let next_r = next_p.iter().map(|&v| (v - lambda).max(0.0)).collect();
    (next_p, next_r)
}

/// Extract the dense code vector from a convolutional state with 1×1 spatial
/// extent per feature.
pub fn dense_code(state: &sca_core::lca::SparseState) -> Vec<f64> {
    state.code.data().to_vec()
}

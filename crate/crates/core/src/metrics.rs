//! Reconstruction-quality and representation-analysis metrics.
//!
//! PSNR and SSIM compare image pairs; the Fréchet distance compares feature
//! distributions (fit as Gaussians) and backs `fid`; `cluster_separation`
//! scores how label-clustered a set of activations is (PCA to two components,
//! then mean silhouette). Everything here is pure math over tensors — no
//! global state, safe to call from anywhere.
//!
//! FID notes: features come from a small reference classifier shipped as a
//! checkpoint (see [`FeatureExtractor`]), so values are comparable between
//! runs of this codebase, not to numbers computed with other feature
//! networks. The matrix square root inside the Fréchet distance is done by
//! eigendecomposition of the symmetrized product with eigenvalues clamped at
//! zero — slow and exact beats fast and approximate at the sizes we run.

use std::collections::HashMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::tensor::Tensor;

/// Cap applied when the mean squared error is exactly zero; identical images
/// would otherwise be +inf dB.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB: 10·log10(max_val² / MSE).
pub fn psnr(x: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dims("psnr", x.shape(), y.shape()));
    }
    if !(max_val > 0.0) {
        return Err(Error::Parameter(format!(
            "psnr max_val must be > 0, got {max_val}"
        )));
    }
    let diff = x.sub(y)?;
    let mse = diff.dot(&diff)? / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let di = i as f64 - half;
            let dj = j as f64 - half;
            w.push((-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// One weighted SSIM window. `x`/`y` index through `at`, weights sum to 1.
fn ssim_window(
    x: &[f64],
    y: &[f64],
    weights: &[f64],
    at: impl Fn(usize) -> usize,
) -> f64 {
    let mut mx = 0.0;
    let mut my = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        mx += w * x[at(k)];
        my += w * y[at(k)];
    }
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        let dx = x[at(k)] - mx;
        let dy = y[at(k)] - my;
        vx += w * dx * dx;
        vy += w * dy * dy;
        cov += w * dx * dy;
    }
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Structural similarity for a pair of images in [0,1], rank [H,W] or
/// [C,H,W]; channels are scored independently and averaged. Images smaller
/// than the 11×11 window fall back to a single uniform window spanning the
/// whole image.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::dims("ssim", x.shape(), y.shape()));
    }
    let (c, h, w) = match *x.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dims("ssim image", x.shape(), &[3])),
    };
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let xs = &x.data()[ch * plane..(ch + 1) * plane];
        let ys = &y.data()[ch * plane..(ch + 1) * plane];
        if h < SSIM_WINDOW || w < SSIM_WINDOW {
            // Whole image as one uniform window.
            let weights = vec![1.0 / plane as f64; plane];
            total += ssim_window(xs, ys, &weights, |k| k);
        } else {
            let weights = gaussian_window();
            let mut acc = 0.0;
            let mut count = 0usize;
            for i in 0..=(h - SSIM_WINDOW) {
                for j in 0..=(w - SSIM_WINDOW) {
                    acc += ssim_window(xs, ys, &weights, |k| {
                        (i + k / SSIM_WINDOW) * w + j + k % SSIM_WINDOW
                    });
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
    }
    Ok(total / c as f64)
}

/// Mean and unbiased covariance of feature rows, symmetrized.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Tensor,  // [D]
    pub cov: Tensor,   // [D,D], symmetric
    pub count: usize,
}

pub fn fit_gaussian(features: &Tensor) -> Result<GaussianStats> {
    if features.rank() != 2 {
        return Err(Error::dims("fit_gaussian", features.shape(), &[2]));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < 2 {
        return Err(Error::Parameter(format!(
            "fit_gaussian needs at least 2 rows, got {n}"
        )));
    }
    let mut mean = Tensor::zeros(&[d]);
    for i in 0..n {
        for j in 0..d {
            mean.data_mut()[j] += features.data()[i * d + j];
        }
    }
    for v in mean.data_mut() {
        *v /= n as f64;
    }
    let mut cov = Tensor::zeros(&[d, d]);
    for i in 0..n {
        let row = &features.data()[i * d..(i + 1) * d];
        for a in 0..d {
            let da = row[a] - mean.data()[a];
            for b in a..d {
                let db = row[b] - mean.data()[b];
                cov.data_mut()[a * d + b] += da * db;
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov.data()[a * d + b] / denom;
            cov.data_mut()[a * d + b] = v;
            cov.data_mut()[b * d + a] = v;
        }
    }
    Ok(GaussianStats {
        mean,
        cov,
        count: n,
    })
}

const JACOBI_MAX_SWEEPS: usize = 128;

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method:
/// returns (eigenvalues, eigenvectors-as-columns) with A = V·diag(λ)·Vᵀ.
/// Not sorted. Fails only if the off-diagonal mass refuses to vanish, which
/// for symmetric input means something upstream produced NaN/inf.
fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::dims("symmetric_eigen", a.shape(), &[2]));
    }
    let d = a.shape()[0];
    let mut m = a.data().to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    if !a.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            context: "symmetric_eigen on non-finite matrix".into(),
        });
    }
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            let eig = (0..d).map(|i| m[i * d + i]).collect();
            return Ok((eig, Tensor::from_vec(&[d, d], v)?));
        }
        if sweep == JACOBI_MAX_SWEEPS - 1 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() <= tol / (d as f64) {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                // Smaller-root tangent for numerical stability.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Divergence {
        iteration: JACOBI_MAX_SWEEPS,
        context: "jacobi eigensolver did not converge".into(),
    })
}

/// PSD square root via eigendecomposition, clamping eigenvalues at zero
/// (tiny negatives appear from round-off in genuinely PSD matrices).
fn psd_sqrt(a: &Tensor) -> Result<Tensor> {
    let d = a.shape()[0];
    let (eig, vecs) = symmetric_eigen(a)?;
    let mut out = Tensor::zeros(&[d, d]);
    for (k, &lam) in eig.iter().enumerate() {
        let r = lam.max(0.0).sqrt();
        if r == 0.0 {
            continue;
        }
        for i in 0..d {
            let vi = vecs.data()[i * d + k] * r;
            for j in 0..d {
                out.data_mut()[i * d + j] += vi * vecs.data()[j * d + k];
            }
        }
    }
    Ok(out)
}

fn trace(a: &Tensor) -> f64 {
    let d = a.shape()[0];
    (0..d).map(|i| a.data()[i * d + i]).sum()
}

/// Fréchet distance between two Gaussians:
///   FID² = ‖μa − μb‖² + Tr(Ca + Cb − 2·sqrt(sqrt(Ca)·Cb·sqrt(Ca))).
/// Returns FID, i.e. the square root of that (clamped at zero against
/// round-off).
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != b.cov.shape() {
        return Err(Error::dims("frechet_distance", a.cov.shape(), b.cov.shape()));
    }
    let dmu = a.mean.sub(&b.mean)?;
    let mean_term = dmu.dot(&dmu)?;
    let sa = psd_sqrt(&a.cov)?;
    let inner = crate::tensor::matmul(&crate::tensor::matmul(&sa, &b.cov)?, &sa)?;
    // Symmetrize before the second root; the product is symmetric in exact
    // arithmetic but not in floating point.
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            let v = 0.5 * (inner.data()[i * d + j] + inner.data()[j * d + i]);
            sym.data_mut()[i * d + j] = v;
        }
    }
    let cross = psd_sqrt(&sym)?;
    let ta = trace(&a.cov);
    let tb = trace(&b.cov);
    let fid_sq = mean_term + ta + tb - 2.0 * trace(&cross);
    // The trace cancellation leaves round-off of order ε·Tr for identical
    // inputs, which the square root would amplify into ~1e-8 noise; snap
    // anything below that scale to a clean zero.
    let floor = 1e-10 * (mean_term + ta.abs() + tb.abs()).max(1.0);
    if fid_sq <= floor {
        return Ok(0.0);
    }
    Ok(fid_sq.sqrt())
}

/// A frozen classifier used as the FID feature space. The tap names its
/// penultimate layer; `provenance` records which seed/dataset produced the
/// checkpoint so reports can state what the numbers are relative to.
pub struct FeatureExtractor {
    model: Model,
    tap: String,
    provenance: String,
}

impl FeatureExtractor {
    pub fn new(model: Model, tap: &str, provenance: &str) -> Result<Self> {
        if model.spec.tap_index(tap).is_none() {
            return Err(Error::MissingTap(tap.to_string()));
        }
        Ok(FeatureExtractor {
            model,
            tap: tap.to_string(),
            provenance: provenance.to_string(),
        })
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn tap(&self) -> &str {
        &self.tap
    }

    /// Penultimate-layer features for a stack of images [N,C,H,W] → [N,D].
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut rows: Vec<Tensor> = Vec::new();
        let chunk = 256;
        let per: usize = images.shape()[1..].iter().product();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut shape = vec![end - start];
            shape.extend_from_slice(&images.shape()[1..]);
            let bx = Tensor::from_vec(
                &shape,
                images.data()[start * per..end * per].to_vec(),
            )?;
            let (_, mut taps) = self.model.forward(&bx, Mode::Eval)?;
            let t = taps
                .remove(&self.tap)
                .ok_or_else(|| Error::MissingTap(self.tap.clone()))?;
            let d: usize = t.shape()[1..].iter().product();
            rows.push(t.reshape(&[end - start, d])?);
            start = end;
        }
        let d = rows[0].shape()[1];
        let mut data = Vec::with_capacity(n * d);
        for r in &rows {
            data.extend_from_slice(r.data());
        }
        Tensor::from_vec(&[n, d], data)
    }
}

/// Fréchet distance between the feature distributions of two image sets.
pub fn fid(real: &Dataset, fake: &Dataset, fx: &FeatureExtractor) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::Parameter(
            "fid needs at least 2 images on each side".into(),
        ));
    }
    let fa = fit_gaussian(&fx.features(real.images())?)?;
    let fb = fit_gaussian(&fx.features(fake.images())?)?;
    frechet_distance(&fa, &fb)
}

/// How separated the label clusters are: project activations onto the top
/// two principal components (covariance eigenvectors), then return the mean
/// silhouette coefficient under Euclidean distance.
///
/// Edge policies: a point whose intra-cluster distance is 0 but whose
/// nearest other cluster is elsewhere scores 1; when intra and inter are
/// both 0 (all points identical) it scores 0.
pub fn cluster_separation(activations: &Tensor, labels: &[usize]) -> Result<f64> {
    if activations.rank() != 2 || activations.shape()[0] != labels.len() {
        return Err(Error::dims(
            "cluster_separation",
            activations.shape(),
            &[labels.len()],
        ));
    }
    let n = labels.len();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Parameter(
            "cluster_separation needs at least 2 classes".into(),
        ));
    }
    if counts.values().any(|&c| c < 2) {
        return Err(Error::Parameter(
            "cluster_separation needs at least 2 points per class".into(),
        ));
    }

    // PCA to (at most) two components.
    let stats = fit_gaussian(activations)?;
    let d = activations.shape()[1];
    let comps = d.min(2);
    let (eig, vecs) = symmetric_eigen(&stats.cov)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).unwrap());
    let mut proj = vec![[0.0f64; 2]; n];
    for (i, p) in proj.iter_mut().enumerate() {
        let row = &activations.data()[i * d..(i + 1) * d];
        for (c, pc) in p.iter_mut().enumerate().take(comps) {
            let col = order[c];
            *pc = row
                .iter()
                .enumerate()
                .map(|(j, &x)| (x - stats.mean.data()[j]) * vecs.data()[j * d + col])
                .sum();
        }
    }

    // Mean silhouette over all points.
    let dist = |i: usize, j: usize| -> f64 {
        let dx = proj[i][0] - proj[j][0];
        let dy = proj[i][1] - proj[j][1];
        (dx * dx + dy * dy).sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut per_class: HashMap<usize, (f64, usize)> = HashMap::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let e = per_class.entry(labels[j]).or_insert((0.0, 0));
            e.0 += dist(i, j);
            e.1 += 1;
        }
        let own = per_class[&labels[i]];
        let a = own.0 / own.1 as f64;
        let b = per_class
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, &(s, c))| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerKind, LayerSpec, ModelSpec};
    use crate::rng::Rng;
    use crate::{data, tensor};

    fn random_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform();
        }
        t
    }

    #[test]
    fn psnr_identical_hits_the_cap() {
        let x = random_image(&[1, 8, 8], 1);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_uniform_offset_closed_form() {
        let x = Tensor::filled(&[1, 10, 10], 0.4);
        let y = Tensor::filled(&[1, 10, 10], 0.5);
        // MSE = 0.01 on unit range → exactly 20 dB.
        let v = psnr(&x, &y, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn psnr_matches_scalar_loop_and_is_symmetric() {
        let x = random_image(&[2, 7, 5], 2);
        let y = random_image(&[2, 7, 5], 3);
        let mut se = 0.0;
        for (a, b) in x.data().iter().zip(y.data()) {
            se += (a - b) * (a - b);
        }
        let expect = 10.0 * (1.0 / (se / 70.0)).log10();
        let v = psnr(&x, &y, 1.0).unwrap();
        assert!((v - expect).abs() < 1e-10);
        assert_eq!(v, psnr(&y, &x, 1.0).unwrap());
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let x = Tensor::zeros(&[4]);
        let y = Tensor::zeros(&[5]);
        assert!(psnr(&x, &y, 1.0).is_err());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let x = random_image(&[16, 16], 4);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let small = random_image(&[1, 6, 6], 5);
        assert_eq!(ssim(&small, &small).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = 0.3;
        let b = 0.7;
        let x = Tensor::filled(&[12, 12], a);
        let y = Tensor::filled(&[12, 12], b);
        // Variances vanish, so only the luminance factor survives.
        let expect = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        let v = ssim(&x, &y).unwrap();
        assert!((v - expect).abs() < 1e-12, "got {v}, want {expect}");
    }

    #[test]
    fn ssim_matches_independent_window_loop() {
        // Reference implementation: recompute every window from scratch with
        // its own Gaussian weights.
        let h = 14;
        let w = 13;
        let x = random_image(&[h, w], 6);
        let y = {
            let mut y = x.clone();
            let mut rng = Rng::new(7);
            for v in y.data_mut() {
                *v = (*v + 0.1 * rng.normal()).clamp(0.0, 1.0);
            }
            y
        };
        let mut weights = Vec::new();
        for i in 0..11 {
            for j in 0..11 {
                let di = i as f64 - 5.0;
                let dj = j as f64 - 5.0;
                weights.push((-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp());
            }
        }
        let wsum: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let mut count = 0;
        for wi in 0..=(h - 11) {
            for wj in 0..=(w - 11) {
                let mut mx = 0.0;
                let mut my = 0.0;
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = weights[i * 11 + j] / wsum;
                        mx += wt * x.data()[(wi + i) * w + wj + j];
                        my += wt * y.data()[(wi + i) * w + wj + j];
                    }
                }
                let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = weights[i * 11 + j] / wsum;
                        let dx = x.data()[(wi + i) * w + wj + j] - mx;
                        let dy = y.data()[(wi + i) * w + wj + j] - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cv += wt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + 1e-4) * (2.0 * cv + 9e-4))
                    / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                count += 1;
            }
        }
        let expect = acc / count as f64;
        let got = ssim(&x, &y).unwrap();
        assert!(
            (got - expect).abs() < 1e-12,
            "got {got}, reference {expect}"
        );
        assert_eq!(got, ssim(&y, &x).unwrap());
    }

    #[test]
    fn fit_gaussian_hand_case() {
        let f = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let g = fit_gaussian(&f).unwrap();
        assert_eq!(g.mean.data(), &[1.0, 0.0]);
        assert_eq!(g.cov.data(), &[2.0, 0.0, 0.0, 0.0]);

        let same = Tensor::from_vec(&[3, 2], vec![0.5, 1.0, 0.5, 1.0, 0.5, 1.0]).unwrap();
        assert_eq!(fit_gaussian(&same).unwrap().cov.max_abs(), 0.0);
        assert!(fit_gaussian(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn fit_gaussian_matches_two_pass_reference() {
        let mut rng = Rng::new(8);
        let (n, d) = (40, 5);
        let mut f = Tensor::zeros(&[n, d]);
        rng.fill_normal(f.data_mut(), 2.0);
        let g = fit_gaussian(&f).unwrap();
        for a in 0..d {
            let ma: f64 = (0..n).map(|i| f.data()[i * d + a]).sum::<f64>() / n as f64;
            assert!((g.mean.data()[a] - ma).abs() < 1e-12);
            for b in 0..d {
                let mb: f64 = (0..n).map(|i| f.data()[i * d + b]).sum::<f64>() / n as f64;
                let c: f64 = (0..n)
                    .map(|i| (f.data()[i * d + a] - ma) * (f.data()[i * d + b] - mb))
                    .sum::<f64>()
                    / (n - 1) as f64;
                assert!((g.cov.data()[a * d + b] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigensolver_reconstructs_symmetric_matrices() {
        // Hand case: [[2,1],[1,2]] has eigenvalues {1,3}.
        let m = Tensor::from_vec(&[2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (mut eig, _) = symmetric_eigen(&m).unwrap();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-12 && (eig[1] - 3.0).abs() < 1e-12);

        // Random symmetric: A = V diag(λ) Vᵀ and VᵀV = I.
        let d = 7;
        let mut rng = Rng::new(9);
        let mut m = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in i..d {
                let v = rng.normal();
                m.data_mut()[i * d + j] = v;
                m.data_mut()[j * d + i] = v;
            }
        }
        let (eig, vecs) = symmetric_eigen(&m).unwrap();
        let vt = tensor::transpose(&vecs).unwrap();
        let mut lam = Tensor::zeros(&[d, d]);
        for i in 0..d {
            lam.data_mut()[i * d + i] = eig[i];
        }
        let recon =
            tensor::matmul(&tensor::matmul(&vecs, &lam).unwrap(), &vt).unwrap();
        assert!(recon.sub(&m).unwrap().max_abs() < 1e-10);
        let identity = tensor::matmul(&vt, &vecs).unwrap();
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((identity.data()[i * d + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn frechet_zero_for_identical_stats() {
        let mut rng = Rng::new(10);
        let mut f = Tensor::zeros(&[30, 4]);
        rng.fill_normal(f.data_mut(), 1.0);
        let g = fit_gaussian(&f).unwrap();
        let v = frechet_distance(&g, &g).unwrap();
        assert!(v < 1e-8, "identical stats gave {v}");
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let a = GaussianStats {
            mean: Tensor::from_vec(&[1], vec![0.0]).unwrap(),
            cov: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            count: 10,
        };
        let b = GaussianStats {
            mean: Tensor::from_vec(&[1], vec![1.0]).unwrap(),
            cov: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            count: 10,
        };
        // FID² = 1 + (1 + 1 − 2·1) = 1.
        let v = frechet_distance(&a, &b).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn frechet_diagonal_closed_form() {
        let a = GaussianStats {
            mean: Tensor::zeros(&[2]),
            cov: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 4.0]).unwrap(),
            count: 10,
        };
        let b = GaussianStats {
            mean: Tensor::zeros(&[2]),
            cov: Tensor::from_vec(&[2, 2], vec![4.0, 0.0, 0.0, 1.0]).unwrap(),
            count: 10,
        };
        // Tr(diag(5,5)) − 2·Tr(sqrt(diag(4,4))) = 10 − 8 = 2 → FID = √2.
        let v = frechet_distance(&a, &b).unwrap();
        assert!((v - 2.0f64.sqrt()).abs() < 1e-6, "got {v}");
        let w = frechet_distance(&b, &a).unwrap();
        assert!((v - w).abs() < 1e-9, "should be symmetric: {v} vs {w}");
    }

    fn tiny_extractor(seed: u64) -> FeatureExtractor {
        let spec = ModelSpec {
            input_shape: vec![1, 4, 4],
            layers: vec![
                LayerSpec::new(LayerKind::Flatten),
                LayerSpec::new(LayerKind::Linear {
                    inputs: 16,
                    outputs: 6,
                }),
                LayerSpec::tapped(LayerKind::Relu, "features"),
                LayerSpec::new(LayerKind::Linear {
                    inputs: 6,
                    outputs: 2,
                }),
            ],
            classes: 2,
            seed,
        };
        FeatureExtractor::new(Model::init(spec).unwrap(), "features", "test seed").unwrap()
    }

    #[test]
    fn fid_identical_sets_vanish_and_ordering_holds() {
        let fx = tiny_extractor(11);
        let real = data::synth_gaussian_blobs(2, 20, 4, 21).unwrap();
        assert!(fid(&real, &real, &fx).unwrap() < 1e-8);

        // Mild blur stays closer than pure noise.
        let mut blurred = real.images().clone();
        let (n, hw) = (real.len(), 4);
        for img in 0..n {
            let src: Vec<f64> =
                real.images().data()[img * 16..(img + 1) * 16].to_vec();
            for i in 0..hw {
                for j in 0..hw {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let (ii, jj) = (i as i64 + di, j as i64 + dj);
                            if ii >= 0 && ii < hw as i64 && jj >= 0 && jj < hw as i64 {
                                acc += src[(ii * hw as i64 + jj) as usize];
                                cnt += 1.0;
                            }
                        }
                    }
                    blurred.data_mut()[img * 16 + i * hw + j] = acc / cnt;
                }
            }
        }
        let blur_ds = data::Dataset::new(
            blurred,
            real.labels().to_vec(),
            data::DatasetMeta {
                name: "blur".into(),
                classes: 2,
                dims: [1, 4, 4],
            },
        )
        .unwrap();
        let noise_ds = {
            let mut t = Tensor::zeros(&[n, 1, 4, 4]);
            let mut rng = Rng::new(5);
            for v in t.data_mut() {
                *v = rng.uniform();
            }
            data::Dataset::new(
                t,
                real.labels().to_vec(),
                data::DatasetMeta {
                    name: "noise".into(),
                    classes: 2,
                    dims: [1, 4, 4],
                },
            )
            .unwrap()
        };
        let d_blur = fid(&real, &blur_ds, &fx).unwrap();
        let d_noise = fid(&real, &noise_ds, &fx).unwrap();
        assert!(
            d_noise > d_blur,
            "noise ({d_noise}) should be farther than blur ({d_blur})"
        );
    }

    #[test]
    fn fid_is_order_invariant() {
        let fx = tiny_extractor(13);
        let real = data::synth_gaussian_blobs(2, 15, 4, 31).unwrap();
        let fake = data::synth_gaussian_blobs(2, 15, 4, 32).unwrap();
        let fwd = fid(&real, &fake, &fx).unwrap();
        // Reverse the row order on both sides.
        let rev: Vec<usize> = (0..real.len()).rev().collect();
        let real_r = real.subset(&rev);
        let fake_r = fake.subset(&rev);
        let bwd = fid(&real_r, &fake_r, &fx).unwrap();
        assert!((fwd - bwd).abs() < 1e-10);
    }

    #[test]
    fn cluster_separation_tight_blobs_score_high() {
        // Two clusters at (±10, 0) with tiny spread; brute-force silhouette
        // on the raw 2-D points is the oracle (PCA of 2-D data is a rigid
        // rotation and silhouette is distance-based, so they must agree).
        let mut rng = Rng::new(14);
        let n = 20;
        let mut pts = Tensor::zeros(&[n, 2]);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let side = if i % 2 == 0 { -10.0 } else { 10.0 };
            pts.data_mut()[i * 2] = side + 0.01 * rng.normal();
            pts.data_mut()[i * 2 + 1] = 0.01 * rng.normal();
            labels.push(i % 2);
        }
        let got = cluster_separation(&pts, &labels).unwrap();
        assert!(got > 0.9, "tight blobs got {got}");

        let dist = |i: usize, j: usize| {
            let dx = pts.data()[i * 2] - pts.data()[j * 2];
            let dy = pts.data()[i * 2 + 1] - pts.data()[j * 2 + 1];
            (dx * dx + dy * dy).sqrt()
        };
        let mut expect = 0.0;
        for i in 0..n {
            let (mut sa, mut ca, mut sb, mut cb) = (0.0, 0, 0.0, 0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                if labels[j] == labels[i] {
                    sa += dist(i, j);
                    ca += 1;
                } else {
                    sb += dist(i, j);
                    cb += 1;
                }
            }
            let a = sa / ca as f64;
            let b = sb / cb as f64;
            expect += (b - a) / a.max(b);
        }
        expect /= n as f64;
        assert!(
            (got - expect).abs() < 1e-9,
            "pipeline {got} vs brute force {expect}"
        );
    }

    #[test]
    fn cluster_separation_shuffled_labels_near_zero() {
        let mut rng = Rng::new(15);
        let n = 200;
        let mut pts = Tensor::zeros(&[n, 3]);
        rng.fill_normal(pts.data_mut(), 1.0);
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        rng.shuffle(&mut labels);
        let v = cluster_separation(&pts, &labels).unwrap();
        assert!(v.abs() < 0.05, "random labels scored {v}");
    }

    #[test]
    fn cluster_separation_degenerate_policies() {
        // Duplicated point per class, classes apart → intra 0, inter > 0 → 1.
        let pts = Tensor::from_vec(
            &[4, 2],
            vec![0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0],
        )
        .unwrap();
        assert_eq!(cluster_separation(&pts, &[0, 0, 1, 1]).unwrap(), 1.0);

        // Everything identical → intra and inter both 0 → 0.
        let same = Tensor::zeros(&[4, 2]);
        assert_eq!(cluster_separation(&same, &[0, 0, 1, 1]).unwrap(), 0.0);

        // One class or a singleton class is an error.
        assert!(cluster_separation(&pts, &[0, 0, 0, 0]).is_err());
        assert!(cluster_separation(&pts, &[0, 0, 1, 2]).is_err());
    }
}

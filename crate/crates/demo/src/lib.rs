//! Browser playground for the sparse-coding building blocks: pick a digit
//! and watch the thresholded dynamics settle, learn a dictionary live from
//! random batches, and preview how output noise degrades an image.
//!
//! The crate compiles two ways. Natively it is an ordinary rlib whose guts
//! are covered by `cargo test --workspace` (the wasm-bindgen attributes are
//! inert off-wasm); for the browser, `wasm-pack build --target web` produces
//! the module `www/index.html` imports. The digit fixtures are compiled in
//! with `include_bytes!` so the page works from a plain static file server
//! with no data fetches.

use wasm_bindgen::prelude::*;

use sca_core::data::{self, Dataset};
use sca_core::lca::{self, Dictionary, LcaConfig};
use sca_core::metrics;
use sca_core::rng::Rng;
use sca_core::tensor::Tensor;

const IMAGES: &[u8] = include_bytes!("../../core/fixtures/digits-images-idx3-ubyte");
const LABELS: &[u8] = include_bytes!("../../core/fixtures/digits-labels-idx1-ubyte");

/// Same geometry as the defended stack's first sparse layer.
const ATOMS: usize = 8;
const KERNEL: usize = 5;

/// PSNR of identical images is infinite; JSON has no spelling for that, so
/// the demo reports this ceiling instead.
const PSNR_CEILING: f64 = 99.0;

fn json_numbers(xs: &[f64]) -> String {
    let body: Vec<String> = xs.iter().map(|v| format!("{v:.6}")).collect();
    format!("[{}]", body.join(","))
}

fn json_bytes(xs: &[u8]) -> String {
    let body: Vec<String> = xs.iter().map(|v| v.to_string()).collect();
    format!("[{}]", body.join(","))
}

fn to_gray(data: &[f64]) -> Vec<u8> {
    data.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    data: Dataset,
    dict: Dictionary,
    rng: Rng,
}

impl Default for Demo {
    fn default() -> Self {
        Self::new()
    }
}

#[wasm_bindgen]
impl Demo {
    /// Build the playground: embedded digits plus a fresh random dictionary.
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        let data = data::parse_idx(IMAGES, LABELS, "digits-images", "digits-labels")
            .expect("embedded fixtures are valid IDX");
        let mut rng = Rng::new(7);
        let dict = Dictionary::random(ATOMS, 1, KERNEL, KERNEL, (1, 1), &mut rng)
            .expect("demo dictionary geometry is valid");
        Demo { data, dict, rng }
    }

    pub fn image_count(&self) -> usize {
        self.data.len()
    }

    pub fn side(&self) -> usize {
        self.data.image_dims()[1]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.data.labels()[i % self.data.len()] as u32
    }

    /// Pixels of image `i`, row-major grayscale 0–255.
    pub fn image(&self, i: usize) -> Vec<u8> {
        to_gray(self.data.image(i % self.data.len()).data())
    }

    /// Run the sparse solve on image `i` and report the trajectory:
    /// `{"recon":[u8…],"energy":[f…],"active":f,"psnr":f}`.
    /// Inputs are clamped into sane demo ranges rather than rejected.
    pub fn solve(&self, i: usize, lambda: f64, tau: f64, iterations: usize) -> String {
        let (recon, energy, active, psnr) = self.solve_parts(i, lambda, tau, iterations);
        format!(
            "{{\"recon\":{},\"energy\":{},\"active\":{:.6},\"psnr\":{:.4}}}",
            json_bytes(&recon),
            json_numbers(&energy),
            active,
            psnr
        )
    }

    /// Current atoms as 0–255 tiles (each min–max stretched on its own),
    /// concatenated in atom order.
    pub fn atoms(&self) -> Vec<u8> {
        let len = KERNEL * KERNEL;
        let mut out = Vec::with_capacity(ATOMS * len);
        for f in 0..ATOMS {
            let a = self.dict.atom(f);
            let lo = a.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            out.extend(a.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8));
        }
        out
    }

    /// Take `steps` dictionary-learning steps on random 8-image batches and
    /// report the mean reconstruction error after each:
    /// `{"errors":[f…],"coherence":f}`. The atoms move in place; call
    /// [`Demo::atoms`] afterwards to repaint them.
    pub fn learn(&mut self, steps: usize, eta: f64, lambda: f64) -> String {
        let steps = steps.clamp(1, 200);
        let eta = eta.clamp(0.0, 1.0);
        let cfg = demo_config(lambda, 25.0, 250);
        let mut errors = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx: Vec<usize> = (0..8).map(|_| self.rng.below(self.data.len())).collect();
            let images: Vec<Tensor> = idx.iter().map(|&i| self.data.image(i)).collect();
            let states: Vec<lca::SparseState> = images
                .iter()
                .map(|x| lca::lca_solve(x, &self.dict, &cfg).expect("demo solve"))
                .collect();
            let pairs: Vec<(&Tensor, &lca::SparseState)> =
                images.iter().zip(states.iter()).collect();
            self.dict = lca::dict_update_batch(&self.dict, &pairs, eta, &mut self.rng)
                .expect("demo dictionary update");
            let hw = (images[0].shape()[1], images[0].shape()[2]);
            let mut err = 0.0;
            for (x, s) in &pairs {
                let recon = self.dict.reconstruct(&s.code, hw).expect("demo recon");
                let d = recon.sub(x).expect("shapes match");
                err += d.data().iter().map(|v| v * v).sum::<f64>() / d.data().len() as f64;
            }
            errors.push(err / pairs.len() as f64);
        }
        format!(
            "{{\"errors\":{},\"coherence\":{:.4}}}",
            json_numbers(&errors),
            self.max_coherence()
        )
    }

    /// Throw the atoms back to a fresh random draw.
    pub fn reset_dictionary(&mut self, seed: u64) {
        let mut rng = Rng::new(seed);
        self.dict = Dictionary::random(ATOMS, 1, KERNEL, KERNEL, (1, 1), &mut rng)
            .expect("demo dictionary geometry is valid");
    }

    /// Add Laplace(b) pixel noise to image `i` — the same noise family the
    /// output-perturbation defense uses — and report what survives:
    /// `{"noisy":[u8…],"psnr":f}`.
    pub fn noise_preview(&mut self, i: usize, b: f64) -> String {
        let x = self.data.image(i % self.data.len());
        let b = b.clamp(0.0, 4.0);
        let noisy_data: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| (v + self.rng.laplace(b)).clamp(0.0, 1.0))
            .collect();
        let noisy = Tensor::from_vec(x.shape(), noisy_data).expect("same shape");
        let psnr = metrics::psnr(&noisy, &x, 1.0)
            .expect("same shape")
            .min(PSNR_CEILING);
        format!(
            "{{\"noisy\":{},\"psnr\":{:.4}}}",
            json_bytes(&to_gray(noisy.data())),
            psnr
        )
    }
}

impl Demo {
    fn solve_parts(
        &self,
        i: usize,
        lambda: f64,
        tau: f64,
        iterations: usize,
    ) -> (Vec<u8>, Vec<f64>, f64, f64) {
        let x = self.data.image(i % self.data.len());
        let cfg = demo_config(lambda, tau, iterations);
        let (state, energy) =
            lca::lca_solve_traced(&x, &self.dict, &cfg, true).expect("demo solve");
        let hw = (x.shape()[1], x.shape()[2]);
        let recon = self.dict.reconstruct(&state.code, hw).expect("demo recon");
        let active = state.code.data().iter().filter(|&&v| v > 0.0).count() as f64
            / state.code.data().len() as f64;
        let psnr = metrics::psnr(&recon, &x, 1.0)
            .expect("same shape")
            .min(PSNR_CEILING);
        (to_gray(recon.data()), energy, active, psnr)
    }

    fn max_coherence(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dict.num_atoms() {
            for j in 0..i {
                let dot: f64 = self
                    .dict
                    .atom(i)
                    .iter()
                    .zip(self.dict.atom(j))
                    .map(|(a, b)| a * b)
                    .sum();
                worst = worst.max(dot.abs());
            }
        }
        worst
    }
}

/// Sliders can ask for anything; keep the dynamics in ranges where the demo
/// stays responsive and the integrator stays finite.
fn demo_config(lambda: f64, tau: f64, iterations: usize) -> LcaConfig {
    LcaConfig {
        lambda: lambda.clamp(0.0, 2.0),
        tau: tau.clamp(1.0, 10_000.0),
        iterations: iterations.clamp(1, 5_000),
        step: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_fixtures_load() {
        let demo = Demo::new();
        assert_eq!(demo.side(), 8);
        assert!(demo.image_count() > 1000);
        assert!(demo.label(0) < 10);
        assert_eq!(demo.image(0).len(), 64);
    }

    #[test]
    fn solve_settles_and_reports_a_finite_trajectory() {
        let demo = Demo::new();
        let (recon, energy, active, psnr) = demo.solve_parts(3, 0.3, 50.0, 200);
        assert_eq!(recon.len(), 64);
        assert_eq!(energy.len(), 200);
        assert!(energy.iter().all(|e| e.is_finite()));
        // The objective must actually drop, and the tail must have settled:
        // the last stretch moves a small fraction of the total descent.
        // (The first few iterations are flat — nothing clears the threshold
        // until the potentials charge up — so compare against the total.)
        let drop = energy[0] - energy[199];
        assert!(drop > 0.0, "energy should descend, drop {drop:.2e}");
        let tail = (energy[180] - energy[199]).abs();
        assert!(
            tail < 0.1 * drop,
            "tail movement {tail:.2e} vs drop {drop:.2e}"
        );
        assert!((0.0..=1.0).contains(&active));
        assert!(psnr.is_finite());
    }

    #[test]
    fn learning_reduces_reconstruction_error() {
        let mut demo = Demo::new();
        let out = demo.learn(30, 0.05, 0.3);
        let body = out
            .split("\"errors\":[")
            .nth(1)
            .and_then(|s| s.split(']').next())
            .expect("errors array present");
        let errs: Vec<f64> = body.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(errs.len(), 30);
        let head: f64 = errs[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = errs[25..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "mean recon error should fall: head {head:.5} tail {tail:.5}"
        );
    }

    #[test]
    fn more_noise_means_a_worse_image() {
        let mut demo = Demo::new();
        let psnr_of = |s: &str| -> f64 {
            s.split("\"psnr\":")
                .nth(1)
                .and_then(|t| t.trim_end_matches('}').parse().ok())
                .expect("psnr field present")
        };
        let quiet = psnr_of(&demo.noise_preview(5, 0.05));
        let loud = psnr_of(&demo.noise_preview(5, 1.5));
        assert!(
            loud < quiet,
            "psnr should drop with the noise scale: {quiet:.2} -> {loud:.2}"
        );
    }

    #[test]
    fn inputs_are_clamped_not_rejected() {
        let mut demo = Demo::new();
        // Absurd settings must not panic or return non-finite output.
        let (_, energy, _, psnr) = demo.solve_parts(usize::MAX, -3.0, 0.0, 0);
        assert_eq!(energy.len(), 1);
        assert!(psnr.is_finite());
        let out = demo.noise_preview(usize::MAX, f64::INFINITY);
        assert!(out.contains("\"psnr\""));
        demo.reset_dictionary(42);
        assert_eq!(demo.atoms().len(), ATOMS * KERNEL * KERNEL);
    }
}

//! Surrogate-model inversion attack. The adversary queries a deployed model,
//! records the activation leaking at a chosen tap, trains an inversion
//! network mapping leaked activations back to images, and then reconstructs
//! the victim images from their leaks alone.
//!
//! The attack never touches the target's weights — everything flows through
//! `forward_hooked`, with the leak transform applied at the tap exactly as a
//! wire-tapping observer would see it. The same noisy activation continues
//! downstream, so the reported target accuracy reflects what the deployment
//! actually pays for its noise defense.

use std::collections::HashMap;

use crate::data::Dataset;
use crate::defenses::{apply_leak, LeakTransform, ThreatArch};
use crate::error::{Error, Result};
use crate::metrics::{self, FeatureExtractor};
use crate::nn::{self, LayerKind, LayerSpec, Mode, Model, ModelSpec, TrainConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Where the adversary listens. `arch` names the deployment setting, and
/// `tap_label` the tap whose activations leak; the label must exist in the
/// target's spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreatModel {
    pub arch: ThreatArch,
    pub tap_label: String,
}

impl ThreatModel {
    /// The canonical leak point for an architecture: the last hidden
    /// activation end-to-end, the first linear output in the split setting.
    pub fn new(arch: ThreatArch) -> Self {
        ThreatModel {
            arch,
            tap_label: arch.tap_label().to_string(),
        }
    }

    pub fn with_tap(arch: ThreatArch, tap_label: &str) -> Self {
        ThreatModel {
            arch,
            tap_label: tap_label.to_string(),
        }
    }

    fn require_tap(&self, target: &Model) -> Result<()> {
        if target.spec.tap_index(&self.tap_label).is_none() {
            return Err(Error::MissingTap(self.tap_label.clone()));
        }
        Ok(())
    }
}

/// Which example set the adversary queries with. The runner resolves this
/// into an actual dataset; the worst-case informed attacker uses the held-out
/// split, the ablation variant a fraction of the training data itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackerData {
    Holdout,
    TrainFraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Hidden widths of the inversion network.
    pub surrogate_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub attacker_data: AttackerData,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            surrogate_hidden: vec![512, 512],
            epochs: 30,
            batch_size: 16,
            // Plain SGD on the summed-per-sample squared error bounces at
            // learning rates much past this; 0.3 with small batches
            // converges steadily on every leak geometry tried.
            learning_rate: 0.3,
            attacker_data: AttackerData::Holdout,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("attack batch_size must be > 0".into()));
        }
        if self.surrogate_hidden.iter().any(|&w| w == 0) {
            return Err(Error::Parameter(
                "surrogate hidden widths must be > 0".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Parameter(format!(
                "attack learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if let AttackerData::TrainFraction(f) = self.attacker_data {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Parameter(format!(
                    "attacker train fraction must be in (0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// What a harvesting run produces: one leaked activation per query image,
/// activations flattened to [N, A], images kept as [N, C, H, W].
#[derive(Debug, Clone, PartialEq)]
pub struct LeakPairs {
    pub activations: Tensor,
    pub images: Tensor,
}

impl LeakPairs {
    pub fn len(&self) -> usize {
        self.activations.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeds that fully determine an experiment cell. `master` is the one the
/// result row reports; the others are the streams derived from it (or
/// overridden individually).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub master: u64,
    pub model: u64,
    pub attack: u64,
    pub split: u64,
}

impl Seeds {
    /// Derive the three working streams from one master seed.
    pub fn from_master(master: u64) -> Self {
        let base = Rng::new(master);
        Seeds {
            master,
            model: base.split(1).next_u64(),
            attack: base.split(2).next_u64(),
            split: base.split(3).next_u64(),
        }
    }
}

/// Everything a report needs beyond the attack itself: the frozen feature
/// space for the distributional metric, and the identifiers the result row
/// carries.
pub struct ReportContext<'a> {
    pub features: &'a FeatureExtractor,
    pub defense: String,
    pub seeds: Seeds,
}

/// The full outcome of one reconstruction run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    /// Reconstructed images, [N, C, H, W], same order as the victim set.
    pub reconstructions: Tensor,
    /// Per-image reconstruction quality, parallel to the victim set.
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// Aggregates — always the plain means of the per-image lists.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Feature-space distance between the victim set and its reconstruction.
    pub fid: f64,
    /// Target accuracy on the victims, measured through the leaked (possibly
    /// noisy) path — the utility the deployment actually delivers.
    pub accuracy: f64,
    pub dataset: String,
    pub defense: String,
    pub threat_model: String,
    pub seeds: Seeds,
}

/// Run one batch through the target with the leak transform applied at the
/// tap. Returns the logits (computed downstream of the transformed
/// activation) and the leaked activation flattened to [n, A].
fn leak_batch(
    target: &Model,
    transform: &LeakTransform,
    tm: &ThreatModel,
    batch: &Tensor,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let mut hook = |label: &str, t: Tensor| -> Result<Tensor> {
        if label == tm.tap_label {
            apply_leak(transform, &t, rng)
        } else {
            Ok(t)
        }
    };
    let (logits, mut taps): (Tensor, HashMap<String, Tensor>) =
        target.forward_hooked(batch, Mode::Eval, &mut hook)?;
    let act = taps
        .remove(&tm.tap_label)
        .ok_or_else(|| Error::MissingTap(tm.tap_label.clone()))?;
    let n = act.shape()[0];
    let a: usize = act.shape()[1..].iter().product();
    Ok((logits, act.reshape(&[n, a])?))
}

/// Query the target once per image in `queries` and record what leaks.
pub fn harvest(
    target: &Model,
    transform: &LeakTransform,
    tm: &ThreatModel,
    queries: &Dataset,
    rng: &mut Rng,
) -> Result<LeakPairs> {
    tm.require_tap(target)?;
    if queries.is_empty() {
        return Err(Error::Parameter("harvest needs at least one query".into()));
    }
    let indices: Vec<usize> = (0..queries.len()).collect();
    let mut acts: Vec<f64> = Vec::new();
    let mut a = 0usize;
    for chunk in indices.chunks(256) {
        let (bx, _) = queries.batch(chunk);
        let (_, act) = leak_batch(target, transform, tm, &bx, rng)?;
        a = act.shape()[1];
        acts.extend_from_slice(act.data());
    }
    Ok(LeakPairs {
        activations: Tensor::from_vec(&[queries.len(), a], acts)?,
        images: queries.images().clone(),
    })
}

/// Train the inversion network: flattened activation in, flattened image
/// out, hidden relu layers, sigmoid keeping pixels in [0, 1], mean-squared
/// error against the query images.
pub fn train_inverter(pairs: &LeakPairs, cfg: &AttackConfig, rng: &mut Rng) -> Result<Model> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Parameter(
            "train_inverter needs at least one pair".into(),
        ));
    }
    let act_dim = pairs.activations.shape()[1];
    let image_dim: usize = pairs.images.shape()[1..].iter().product();
    let mut layers = Vec::new();
    let mut inputs = act_dim;
    for &width in &cfg.surrogate_hidden {
        layers.push(LayerSpec::new(LayerKind::Linear {
            inputs,
            outputs: width,
        }));
        layers.push(LayerSpec::new(LayerKind::Relu));
        inputs = width;
    }
    layers.push(LayerSpec::new(LayerKind::Linear {
        inputs,
        outputs: image_dim,
    }));
    layers.push(LayerSpec::new(LayerKind::Sigmoid));
    let spec = ModelSpec {
        input_shape: vec![act_dim],
        layers,
        classes: image_dim,
        seed: rng.next_u64(),
    };
    let mut model = Model::init(spec)?;
    let targets = pairs.images.reshape(&[pairs.len(), image_dim])?;
    let one_epoch = TrainConfig {
        epochs: 1,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        // The surrogate has no sparse layers, so the dictionary rate is moot.
        dict_eta: 0.0,
        lca_backprop: false,
        dp: None,
    };
    for epoch in 0..cfg.epochs {
        nn::train_epoch_mse(&mut model, &pairs.activations, &targets, &one_epoch, rng).map_err(
            |e| match e {
                Error::Divergence { .. } => Error::Divergence {
                    iteration: epoch,
                    context: "inverter training loss went non-finite".into(),
                },
                other => other,
            },
        )?;
    }
    Ok(model)
}

/// Leak every victim image, invert the leak, and score the reconstructions.
pub fn reconstruct(
    inverter: &Model,
    target: &Model,
    transform: &LeakTransform,
    tm: &ThreatModel,
    victims: &Dataset,
    ctx: &ReportContext,
    rng: &mut Rng,
) -> Result<AttackReport> {
    tm.require_tap(target)?;
    if victims.is_empty() {
        return Err(Error::Parameter(
            "reconstruct needs at least one victim image".into(),
        ));
    }
    let [c, h, w] = victims.meta.dims;
    let image_dim = c * h * w;
    let mut recon_data: Vec<f64> = Vec::with_capacity(victims.len() * image_dim);
    let mut psnrs = Vec::with_capacity(victims.len());
    let mut ssims = Vec::with_capacity(victims.len());
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..victims.len()).collect();
    for chunk in indices.chunks(256) {
        let (bx, by) = victims.batch(chunk);
        let (logits, act) = leak_batch(target, transform, tm, &bx, rng)?;
        let (recon, _) = inverter.forward(&act, Mode::Eval)?;
        if recon.shape() != [chunk.len(), image_dim] {
            return Err(Error::dims(
                "inverter output",
                recon.shape(),
                &[chunk.len(), image_dim],
            ));
        }
        let k = logits.shape()[1];
        for (i, &label) in by.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0;
            if pred == label {
                correct += 1;
            }
            let orig = Tensor::from_vec(
                &[c, h, w],
                bx.data()[i * image_dim..(i + 1) * image_dim].to_vec(),
            )?;
            let rec = Tensor::from_vec(
                &[c, h, w],
                recon.data()[i * image_dim..(i + 1) * image_dim].to_vec(),
            )?;
            psnrs.push(metrics::psnr(&rec, &orig, 1.0)?);
            ssims.push(metrics::ssim(&rec, &orig)?);
        }
        recon_data.extend_from_slice(recon.data());
    }
    let reconstructions = Tensor::from_vec(&[victims.len(), c, h, w], recon_data)?;
    let fake = Dataset::new(
        reconstructions.clone(),
        victims.labels().to_vec(),
        victims.meta.clone(),
    )?;
    let fid = metrics::fid(victims, &fake, ctx.features)?;
    let mean_psnr = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let mean_ssim = ssims.iter().sum::<f64>() / ssims.len() as f64;
    Ok(AttackReport {
        reconstructions,
        psnr: psnrs,
        ssim: ssims,
        mean_psnr,
        mean_ssim,
        fid,
        accuracy: correct as f64 / victims.len() as f64,
        dataset: victims.meta.name.clone(),
        defense: ctx.defense.clone(),
        threat_model: tm.arch.as_str().to_string(),
        seeds: ctx.seeds,
    })
}

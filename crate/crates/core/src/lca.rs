//! Sparse coding by lateral competition.
//!
//! Given an image `x` and a bank of unit-norm atoms Ω, find a non-negative
//! sparse code r minimizing ½‖x − r⊛Ω‖² + λ‖r‖₁ (⊛ is the transpose
//! convolution that synthesizes an image from a code). Instead of a generic
//! LASSO solver, codes are computed by integrating leaky integrate-and-fire
//! dynamics over membrane potentials P:
//!
//!   P ← P + (step/τ)·(Ψ − P − lateral(r)),   r = max(0, P − λ)
//!
//! where Ψ = conv2d(x, Ω) is the bottom-up drive and the lateral inhibition
//! is conv2d(conv2d_transpose(r, Ω), Ω) − r, i.e. neurons with overlapping
//! receptive fields suppress each other, minus the self-interaction. At a
//! fixed point the active coordinates satisfy the stationarity conditions of
//! the objective above, so the dynamics are a solver, not a heuristic.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Feature bank Ω with shape [F, C, Kh, Kw] and the stride the codes live at.
/// Atoms are kept at unit L2 norm; the sparsity penalty is meaningless
/// without that (atoms could grow to make codes arbitrarily small).
#[derive(Debug, Clone)]
pub struct Dictionary {
    atoms: Tensor,
    stride: (usize, usize),
}

impl Dictionary {
    /// Wrap an atom bank, normalizing every atom to unit L2 norm.
    /// Fails on a zero atom or a non-rank-4 tensor.
    pub fn new(atoms: Tensor, stride: (usize, usize)) -> Result<Self> {
        if atoms.rank() != 4 {
            return Err(Error::dims("Dictionary::new", atoms.shape(), &[4]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Parameter("dictionary stride must be >= 1".into()));
        }
        let mut d = Dictionary { atoms, stride };
        d.normalize_atoms(None)?;
        Ok(d)
    }

    /// Wrap an atom bank that is already unit-normalized, without touching
    /// the values. Checkpoint loading needs this: re-normalizing would
    /// perturb the stored atoms by an ulp and break bit-exact round trips.
    /// Atom norms are checked to be within 1e-6 of 1.
    pub fn from_normalized(atoms: Tensor, stride: (usize, usize)) -> Result<Self> {
        if atoms.rank() != 4 {
            return Err(Error::dims("Dictionary::from_normalized", atoms.shape(), &[4]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Parameter("dictionary stride must be >= 1".into()));
        }
        let d = Dictionary { atoms, stride };
        for f in 0..d.num_atoms() {
            let norm: f64 = d.atom(f).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Parameter(format!(
                    "atom {f} has norm {norm}, expected unit norm"
                )));
            }
        }
        Ok(d)
    }

    /// Random unit-norm atoms, standard-normal before normalization.
    pub fn random(
        f: usize,
        c: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        rng: &mut Rng,
    ) -> Result<Self> {
        if f == 0 || c == 0 || kh == 0 || kw == 0 {
            return Err(Error::Parameter(
                "dictionary extents must all be >= 1".into(),
            ));
        }
        let mut atoms = Tensor::zeros(&[f, c, kh, kw]);
        rng.fill_normal(atoms.data_mut(), 1.0);
        Dictionary::new(atoms, stride)
    }

    pub fn atoms(&self) -> &Tensor {
        &self.atoms
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.shape()[0]
    }

    pub fn atom_len(&self) -> usize {
        self.atoms.len() / self.num_atoms()
    }

    /// Flat view of one atom.
    pub fn atom(&self, f: usize) -> &[f64] {
        let n = self.atom_len();
        &self.atoms.data()[f * n..(f + 1) * n]
    }

    /// Synthesize an image of spatial shape `out_hw` from a code.
    pub fn reconstruct(&self, code: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
        tensor::conv2d_transpose(code, &self.atoms, self.stride, out_hw)
    }

    /// Rescale every atom to unit norm. A zero atom is an error unless an rng
    /// is supplied, in which case it is reinitialized at random (and logged);
    /// dead atoms happen when a feature never activates and its gradient
    /// pushes it to zero.
    fn normalize_atoms(&mut self, mut reinit: Option<&mut Rng>) -> Result<()> {
        let n = self.atom_len();
        let f = self.num_atoms();
        for i in 0..f {
            let slice = &mut self.atoms.data_mut()[i * n..(i + 1) * n];
            let mut norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                match reinit.as_deref_mut() {
                    Some(rng) => {
                        log::warn!("atom {i} collapsed to zero norm; reinitializing at random");
                        for v in slice.iter_mut() {
                            *v = rng.normal();
                        }
                        norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
                    }
                    None => {
                        return Err(Error::Parameter(format!(
                            "atom {i} has zero norm and cannot be normalized"
                        )))
                    }
                }
            }
            for v in slice.iter_mut() {
                *v /= norm;
            }
        }
        Ok(())
    }
}

/// Solver knobs. `step` is a dimensionless multiplier on the 1/τ Euler step;
/// the defaults mirror the reference configuration (λ=0.5, τ=1000, 500
/// iterations) and are deliberately conservative — smaller τ converges in
/// fewer iterations and is what the integration tests use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcaConfig {
    pub lambda: f64,
    pub tau: f64,
    pub iterations: usize,
    pub step: f64,
}

impl Default for LcaConfig {
    fn default() -> Self {
        LcaConfig {
            lambda: 0.5,
            tau: 1000.0,
            iterations: 500,
            step: 1.0,
        }
    }
}

impl LcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Parameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Parameter("iterations must be >= 1".into()));
        }
        if !(self.step > 0.0) {
            return Err(Error::Parameter(format!(
                "step must be > 0, got {}",
                self.step
            )));
        }
        Ok(())
    }
}

/// Membrane potentials and the code derived from them. The code is always
/// exactly `soft_threshold(potentials, lambda)`, hence non-negative.
#[derive(Debug, Clone)]
pub struct SparseState {
    pub potentials: Tensor,
    pub code: Tensor,
}

/// One-sided soft threshold: out[i] = max(0, p[i] − lambda).
pub fn soft_threshold(p: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::Parameter(format!(
            "soft_threshold lambda must be >= 0, got {lambda}"
        )));
    }
    Ok(p.map(|v| (v - lambda).max(0.0)))
}

/// Bottom-up drive Ψ = conv2d(x, Ω).
pub fn drive(x: &Tensor, dict: &Dictionary) -> Result<Tensor> {
    tensor::conv2d(x, &dict.atoms, dict.stride)
}

/// One Euler step of the membrane dynamics. The lateral term is computed as
/// reconstruct-then-reencode minus the self term, which equals the Gram
/// interaction without ever materializing an F×F (or bigger) matrix.
pub fn lca_step(
    state: &SparseState,
    psi: &Tensor,
    dict: &Dictionary,
    cfg: &LcaConfig,
    out_hw: (usize, usize),
) -> Result<SparseState> {
    cfg.validate()?;
    let recon = dict.reconstruct(&state.code, out_hw)?;
    let reencoded = tensor::conv2d(&recon, &dict.atoms, dict.stride)?;
    let lateral = reencoded.sub(&state.code)?;
    let rate = cfg.step / cfg.tau;
    let mut potentials = state.potentials.clone();
    {
        let p = potentials.data_mut();
        let psi = psi.data();
        let lat = lateral.data();
        for i in 0..p.len() {
            p[i] += rate * (psi[i] - p[i] - lat[i]);
        }
    }
    let code = soft_threshold(&potentials, cfg.lambda)?;
    Ok(SparseState { potentials, code })
}

/// Run the dynamics from P = 0 for `cfg.iterations` steps.
pub fn lca_solve(x: &Tensor, dict: &Dictionary, cfg: &LcaConfig) -> Result<SparseState> {
    lca_solve_traced(x, dict, cfg, false).map(|(s, _)| s)
}

/// Like `lca_solve`, but optionally records the objective value after every
/// step (used by the descent tests; the trace is empty when not requested).
pub fn lca_solve_traced(
    x: &Tensor,
    dict: &Dictionary,
    cfg: &LcaConfig,
    trace_energy: bool,
) -> Result<(SparseState, Vec<f64>)> {
    cfg.validate()?;
    if x.rank() != 3 {
        return Err(Error::dims("lca_solve input", x.shape(), &[3]));
    }
    if !x.is_finite() {
        return Err(Error::Parameter("lca_solve input contains non-finite values".into()));
    }
    let out_hw = (x.shape()[1], x.shape()[2]);
    let psi = drive(x, dict)?;
    let mut state = SparseState {
        potentials: Tensor::zeros(psi.shape()),
        code: Tensor::zeros(psi.shape()),
    };
    let mut energies = Vec::new();
    if trace_energy {
        energies.reserve(cfg.iterations);
    }
    for it in 0..cfg.iterations {
        state = lca_step(&state, &psi, dict, cfg, out_hw)?;
        if !state.potentials.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                context: "membrane potentials went non-finite".into(),
            });
        }
        if trace_energy {
            energies.push(energy(x, &state, dict, cfg.lambda)?);
        }
    }
    Ok((state, energies))
}

/// Solve a batch of inputs against a shared dictionary. Order of results
/// matches order of inputs; with the `parallel` feature the solves fan out
/// over the rayon pool (each solve is pure, the dictionary is read-only).
pub fn lca_solve_batch(
    xs: &[Tensor],
    dict: &Dictionary,
    cfg: &LcaConfig,
) -> Result<Vec<SparseState>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        xs.par_iter().map(|x| lca_solve(x, dict, cfg)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        xs.iter().map(|x| lca_solve(x, dict, cfg)).collect()
    }
}

/// Objective value ½‖x − reconstruct(code)‖² + λ‖code‖₁.
pub fn energy(x: &Tensor, state: &SparseState, dict: &Dictionary, lambda: f64) -> Result<f64> {
    let recon = dict.reconstruct(&state.code, (x.shape()[1], x.shape()[2]))?;
    let resid = x.sub(&recon)?;
    Ok(0.5 * resid.dot(&resid)? + lambda * state.code.l1_norm())
}

/// Gradient of the reconstruction term ½‖x − code⊛Ω‖² with respect to the
/// atoms, with the code held fixed. Shape matches the atom bank.
pub fn reconstruction_grad(dict: &Dictionary, x: &Tensor, state: &SparseState) -> Result<Tensor> {
    let out_hw = (x.shape()[1], x.shape()[2]);
    let recon = dict.reconstruct(&state.code, out_hw)?;
    let resid = x.sub(&recon)?;
    let kh = dict.atoms.shape()[2];
    let kw = dict.atoms.shape()[3];
    // d/dΩ ½‖resid‖² = −patch-correlation of the residual with the code.
    Ok(tensor::conv2d_kernel_grad(&resid, &state.code, dict.stride, (kh, kw))?.scale(-1.0))
}

/// One learning step on the atoms: gradient descent on the reconstruction
/// term at rate `eta`, then renormalization to unit atoms. An atom that lands
/// on zero norm is reinitialized from `rng` (logged) rather than erroring.
pub fn dict_update(
    dict: &Dictionary,
    x: &Tensor,
    state: &SparseState,
    eta: f64,
    rng: &mut Rng,
) -> Result<Dictionary> {
    let grad = reconstruction_grad(dict, x, state)?;
    let mut atoms = dict.atoms.clone();
    atoms.axpy(-eta, &grad)?;
    let mut next = Dictionary {
        atoms,
        stride: dict.stride,
    };
    next.normalize_atoms(Some(rng))?;
    Ok(next)
}

/// Batch variant: average the reconstruction gradients over `batch` in fixed
/// order, apply once, renormalize once.
pub fn dict_update_batch(
    dict: &Dictionary,
    batch: &[(&Tensor, &SparseState)],
    eta: f64,
    rng: &mut Rng,
) -> Result<Dictionary> {
    if batch.is_empty() {
        return Ok(dict.clone());
    }
    let mut grad = Tensor::zeros(dict.atoms.shape());
    for (x, state) in batch {
        grad.axpy(1.0, &reconstruction_grad(dict, x, state)?)?;
    }
    let mut atoms = dict.atoms.clone();
    atoms.axpy(-eta / batch.len() as f64, &grad)?;
    let mut next = Dictionary {
        atoms,
        stride: dict.stride,
    };
    next.normalize_atoms(Some(rng))?;
    Ok(next)
}

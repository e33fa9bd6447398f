//! Two-step unsupervised restoration: an initialization phase that pins the
//! deformers to the identity while the generator fits the input stack, then
//! a joint phase that optimizes deformers, generator, and blur coefficients
//! under a three-term consistency loss. Also hosts the warm-start anytime
//! mode that attaches fresh per-frame modules to a converged state.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::forward::{ForwardError, FrameStack};
use crate::nets::{BlurModule, GridDeformer, ImageGenerator};
use crate::optics::{
    build_psf_basis, OpticsError, PsfBasis, TurbulenceParams, DEFAULT_BASIS_SAMPLES,
    DEFAULT_CONTROL_SPACING, DEFAULT_K_PRIME, DEFAULT_N_MODES,
};
use crate::real::Real;
use crate::warp::uniform_grid;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite loss at epoch {epoch} (total {total}); aborting")]
    NonFinite { epoch: usize, total: f64 },
    #[error(
        "loss diverged at epoch {epoch}: total {total} exceeds 10x the initial {initial} \
         after a learning-rate halving; aborting"
    )]
    Diverged { epoch: usize, total: f64, initial: f64 },
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
}

/// Resolved hyperparameters for one restoration run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RestorationConfig {
    pub d_over_r0: f64,
    pub corr: f64,
    pub psf_kernel_size: usize,
    pub epochs_init: usize,
    pub epochs_main: usize,
    pub learning_rate: f64,
    pub n_frames: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
    pub loss_weights: [f64; 3],
    pub max_displacement: f64,
    pub pe_bands: usize,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self::air()
    }
}

impl RestorationConfig {
    /// Atmospheric preset.
    pub fn air() -> Self {
        Self {
            d_over_r0: 5.0,
            corr: -5.0,
            psf_kernel_size: 11,
            epochs_init: 1000,
            epochs_main: 1000,
            learning_rate: 1e-4,
            n_frames: 20,
            image_size: (256, 256),
            seed: 0,
            loss_weights: [1.0, 1.0, 1.0],
            max_displacement: 0.05,
            pe_bands: 6,
        }
    }

    /// Water preset.
    pub fn water() -> Self {
        Self { d_over_r0: 0.1, corr: -5.0, psf_kernel_size: 5, ..Self::air() }
    }

    pub fn turbulence(&self) -> TurbulenceParams {
        TurbulenceParams {
            d_over_r0: self.d_over_r0,
            corr: self.corr,
            kernel_size: self.psf_kernel_size,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.turbulence().validate().map_err(TrainError::from)?;
        let (m, n) = self.image_size;
        if m < 2 || n < 2 {
            return Err(TrainError::Domain(format!("image size {m}x{n} is too small")));
        }
        if m % DEFAULT_CONTROL_SPACING != 0 || n % DEFAULT_CONTROL_SPACING != 0 {
            return Err(TrainError::Domain(format!(
                "image size {m}x{n} must be a multiple of the control spacing \
                 {DEFAULT_CONTROL_SPACING}"
            )));
        }
        if self.n_frames < 2 {
            return Err(TrainError::Domain("need at least two frames".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Domain("learning rate must be positive".into()));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainError::Domain("loss weights must be nonnegative".into()));
        }
        if !(self.max_displacement.is_finite() && self.max_displacement >= 0.0) {
            return Err(TrainError::Domain("max displacement must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One epoch's recorded loss terms (sums over frames of per-pixel means).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub term_a: f64,
    pub term_b: f64,
    pub term_c: f64,
    pub total: f64,
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone)]
pub struct AdamGroup<T: Real> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub t: u64,
}

impl<T: Real> AdamGroup<T> {
    pub fn new_like(ws: &[&Array2<T>]) -> Self {
        Self {
            m: ws.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v: ws.iter().map(|w| Array2::zeros(w.dim())).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update over the group's arrays.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Array2<T>], grads: &[Array2<T>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let (b1, b2, eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));
        self.t += 1;
        let bc1 = T::of(1.0 - 0.9f64.powi(self.t as i32));
        let bc2 = T::of(1.0 - 0.999f64.powi(self.t as i32));
        let lr = T::of(lr);
        let one = T::one();
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            azip_update(p, g, m, v, b1, b2, eps, bc1, bc2, lr, one);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update<T: Real>(
    p: &mut Array2<T>,
    g: &Array2<T>,
    m: &mut Array2<T>,
    v: &mut Array2<T>,
    b1: T,
    b2: T,
    eps: T,
    bc1: T,
    bc2: T,
    lr: T,
    one: T,
) {
    ndarray::Zip::from(&mut *p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p = *p - lr * mh / (vh.sqrt() + eps);
    });
}

/// Full training state: the three module families, their optimizer moments,
/// the frozen PSF basis, the loss history, and the current frame window.
#[derive(Debug, Clone)]
pub struct RestorationState<T: Real> {
    pub config: RestorationConfig,
    pub generator: ImageGenerator<T>,
    pub deformers: Vec<GridDeformer<T>>,
    pub blurs: Vec<BlurModule<T>>,
    pub basis: Option<Arc<PsfBasis>>,
    pub history: Vec<LossRecord>,
    pub epochs_init_done: usize,
    pub epochs_main_done: usize,
    /// Monotonic counter of frames ever attached; seeds fresh modules.
    pub frame_counter: usize,
    /// Current frame window, one flattened (h*w, 3) array per frame.
    pub frames: Vec<Array2<T>>,
    pub opt_gen: AdamGroup<T>,
    pub opt_def: Vec<AdamGroup<T>>,
    pub opt_alpha: Vec<AdamGroup<T>>,
    /// Current learning rate (may have been halved by the divergence guard).
    pub lr: f64,
}

impl<T: Real> RestorationState<T> {
    /// The restored image from the shared generator on the uniform grid.
    pub fn restored(&self) -> Array3<f64> {
        let (m, n) = self.config.image_size;
        let gu = uniform_grid::<T>(m, n).expect("validated size");
        self.generator.generate(&gu).mapv(|v| v.f64())
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }
}

fn flatten_stack<T: Real>(
    frames: &FrameStack,
    size: (usize, usize),
) -> Result<Vec<Array2<T>>, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::Domain("empty frame stack".into()));
    }
    let mut out = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        let (m, n, c) = f.dim();
        if (m, n) != size || c != 3 {
            return Err(TrainError::Domain(format!(
                "frame {k} is {m}x{n}x{c}, expected {}x{}x3",
                size.0, size.1
            )));
        }
        out.push(Array2::from_shape_fn((m * n, 3), |(r, ch)| T::of(f[(r / n, r % n, ch)])));
    }
    Ok(out)
}

fn deformer_seed(config_seed: u64, frame_id: usize) -> u64 {
    config_seed.wrapping_add(1).wrapping_add(2 * frame_id as u64)
}

fn alpha_seed(config_seed: u64, frame_id: usize) -> u64 {
    config_seed.wrapping_add(2).wrapping_add(2 * frame_id as u64)
}

/// Initialization phase: deformers learn the identity grid while the shared
/// generator fits the stack; blur modules are not created yet.
pub fn phase1_init<T: Real>(
    frames: &FrameStack,
    config: &RestorationConfig,
) -> Result<RestorationState<T>, TrainError> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(TrainError::Domain("need at least two frames".into()));
    }
    let flat = flatten_stack::<T>(frames, config.image_size)?;
    let generator = ImageGenerator::<T>::new(config.pe_bands, config.seed);
    let deformers: Vec<GridDeformer<T>> = (0..flat.len())
        .map(|k| GridDeformer::new(T::of(config.max_displacement), deformer_seed(config.seed, k)))
        .collect();
    let opt_gen = AdamGroup::new_like(&generator.weights.iter().collect::<Vec<_>>());
    let opt_def = deformers
        .iter()
        .map(|d| AdamGroup::new_like(&d.weights.iter().collect::<Vec<_>>()))
        .collect();
    let mut state = RestorationState {
        config: config.clone(),
        generator,
        deformers,
        blurs: Vec::new(),
        basis: None,
        history: Vec::new(),
        epochs_init_done: 0,
        epochs_main_done: 0,
        frame_counter: flat.len(),
        frames: flat,
        opt_gen,
        opt_def,
        opt_alpha: Vec::new(),
        lr: config.learning_rate,
    };
    let (m, n) = config.image_size;
    let gu_rows = uniform_grid::<T>(m, n).expect("validated size").flat().to_owned();

    while state.epochs_init_done < config.epochs_init {
        let mut term_a = 0.0;
        let mut term_b = 0.0;
        // Deformer identity terms, one small graph per frame.
        for k in 0..state.frames.len() {
            let mut tape = Tape::<T>::new();
            let vars = state.deformers[k].register(&mut tape);
            let gu = tape.constant(gu_rows.clone());
            let deformed = state.deformers[k].forward(&mut tape, &vars, gu, m, n);
            let target = tape.constant(gu_rows.clone());
            let loss = tape.l1_mean(deformed, target);
            term_a += tape.scalar(loss).f64();
            tape.backward(loss);
            let grads: Vec<_> = vars.iter().map(|&v| tape.take_grad(v).unwrap()).collect();
            let mut params: Vec<&mut Array2<T>> = state.deformers[k].weights.iter_mut().collect();
            state.opt_def[k].step(state.lr, &mut params, &grads);
        }
        // Photometric terms share one generator graph.
        {
            let mut tape = Tape::<T>::new();
            let vars = state.generator.register(&mut tape);
            let gu = tape.constant(gu_rows.clone());
            let gen = state.generator.forward(&mut tape, &vars, gu);
            let mut total = None;
            for f in &state.frames {
                let fv = tape.constant(f.clone());
                let l = tape.l1_mean(gen, fv);
                term_b += tape.scalar(l).f64();
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l),
                });
            }
            let total = total.expect("at least one frame");
            tape.backward(total);
            let grads: Vec<_> = vars.iter().map(|&v| tape.take_grad(v).unwrap()).collect();
            let mut params: Vec<&mut Array2<T>> = state.generator.weights.iter_mut().collect();
            state.opt_gen.step(state.lr, &mut params, &grads);
        }
        let total = term_a + term_b;
        state.epochs_init_done += 1;
        let epoch = state.history.len() + 1;
        state.history.push(LossRecord { epoch, term_a, term_b, term_c: 0.0, total });
        if !total.is_finite() {
            return Err(TrainError::NonFinite { epoch, total });
        }
    }
    Ok(state)
}

fn ensure_blurs<T: Real>(state: &mut RestorationState<T>) -> Result<(), TrainError> {
    if state.basis.is_none() {
        let params = state.config.turbulence();
        let p = state.config.psf_kernel_size;
        let k_prime = DEFAULT_K_PRIME.min(p * p);
        let basis =
            build_psf_basis(params, DEFAULT_N_MODES, DEFAULT_BASIS_SAMPLES, k_prime, state.config.seed)?
                .quantized();
        state.basis = Some(Arc::new(basis));
    }
    let basis = state.basis.clone().expect("just built");
    while state.blurs.len() < state.frames.len() {
        let k = state.blurs.len();
        let frame_id = state.frame_counter - state.frames.len() + k;
        let module = BlurModule::<T>::new(
            basis.clone(),
            state.config.image_size,
            DEFAULT_CONTROL_SPACING,
            state.config.turbulence(),
            alpha_seed(state.config.seed, frame_id),
        )?;
        state.opt_alpha.push(AdamGroup::new_like(&[&module.alpha]));
        state.blurs.push(module);
    }
    Ok(())
}

/// What the divergence guard does after observing an epoch total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardAction {
    Continue,
    HalveRate,
    Abort,
}

/// More than 10x the initial loss halves the rate once, then aborts.
pub fn divergence_action(total: f64, initial: f64, already_halved: bool) -> GuardAction {
    if total <= 10.0 * initial {
        GuardAction::Continue
    } else if already_halved {
        GuardAction::Abort
    } else {
        GuardAction::HalveRate
    }
}

/// Runs joint optimization epochs until `target_epochs` main-phase epochs
/// have accumulated in the state.
fn optimize_main<T: Real>(
    state: &mut RestorationState<T>,
    target_epochs: usize,
) -> Result<(), TrainError> {
    ensure_blurs(state)?;
    let (m, n) = state.config.image_size;
    let hw = m * n;
    let gu_rows = uniform_grid::<T>(m, n).expect("validated size").flat().to_owned();
    let [wa, wb, wc] = state.config.loss_weights;
    let mut initial: Option<f64> = None;
    let mut halved = false;

    while state.epochs_main_done < target_epochs {
        // Shared clean-image graph, kept alive for the seeded backward pass.
        let mut tape_j = Tape::<T>::new();
        let gen_vars_j = state.generator.register(&mut tape_j);
        let gu_j = tape_j.constant(gu_rows.clone());
        let j_var = state.generator.forward(&mut tape_j, &gen_vars_j, gu_j);
        let j_val = tape_j.value(j_var).to_owned();

        let mut gen_grads: Vec<Array2<T>> =
            state.generator.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
        let mut j_bar = Array2::<T>::zeros((hw, 3));
        let (mut term_a, mut term_b, mut term_c) = (0.0f64, 0.0f64, 0.0f64);

        for k in 0..state.frames.len() {
            let mut tape = Tape::<T>::new();
            let gen_vars = state.generator.register(&mut tape);
            let def_vars = state.deformers[k].register(&mut tape);
            let alpha_var = state.blurs[k].register(&mut tape);
            let j_leaf = tape.param(&j_val);
            let gu = tape.constant(gu_rows.clone());
            let frame = tape.constant(state.frames[k].clone());

            let deformed = state.deformers[k].forward(&mut tape, &def_vars, gu, m, n);
            let gen_tilted = state.generator.forward(&mut tape, &gen_vars, deformed);
            let blur_a = state.blurs[k].forward(&mut tape, alpha_var, gen_tilted);
            let resampled = tape.grid_sample(j_leaf, deformed, m, n);
            let blur_b = state.blurs[k].forward(&mut tape, alpha_var, resampled);

            let ta = tape.l1_mean(blur_a, frame);
            let tb = tape.l1_mean(blur_b, frame);
            let tc = tape.l1_mean(blur_a, blur_b);
            term_a += tape.scalar(ta).f64();
            term_b += tape.scalar(tb).f64();
            term_c += tape.scalar(tc).f64();
            let sa = tape.scale(ta, T::of(wa));
            let sb = tape.scale(tb, T::of(wb));
            let sc = tape.scale(tc, T::of(wc));
            let ab = tape.add(sa, sb);
            let loss = tape.add(ab, sc);
            tape.backward(loss);

            for (acc, &v) in gen_grads.iter_mut().zip(&gen_vars) {
                *acc += &tape.take_grad(v).unwrap();
            }
            j_bar += &tape.take_grad(j_leaf).unwrap();
            let def_grads: Vec<_> =
                def_vars.iter().map(|&v| tape.take_grad(v).unwrap()).collect();
            let alpha_grad = tape.take_grad(alpha_var).unwrap();
            let mut params: Vec<&mut Array2<T>> = state.deformers[k].weights.iter_mut().collect();
            state.opt_def[k].step(state.lr, &mut params, &def_grads);
            state.opt_alpha[k].step(
                state.lr,
                &mut [&mut state.blurs[k].alpha],
                std::slice::from_ref(&alpha_grad),
            );
        }

        // Pull the shared-image gradient back into the generator.
        tape_j.backward_seeded(j_var, j_bar);
        for (acc, &v) in gen_grads.iter_mut().zip(&gen_vars_j) {
            if let Some(g) = tape_j.take_grad(v) {
                *acc += &g;
            }
        }
        let mut params: Vec<&mut Array2<T>> = state.generator.weights.iter_mut().collect();
        state.opt_gen.step(state.lr, &mut params, &gen_grads);

        let total = wa * term_a + wb * term_b + wc * term_c;
        state.epochs_main_done += 1;
        let epoch = state.history.len() + 1;
        state.history.push(LossRecord { epoch, term_a, term_b, term_c, total });
        if !total.is_finite() {
            return Err(TrainError::NonFinite { epoch, total });
        }
        let init = *initial.get_or_insert(total);
        match divergence_action(total, init, halved) {
            GuardAction::Continue => {}
            GuardAction::HalveRate => {
                state.lr /= 2.0;
                halved = true;
            }
            GuardAction::Abort => {
                return Err(TrainError::Diverged { epoch, total, initial: init });
            }
        }
    }
    Ok(())
}

/// Joint phase: optimizes all three module families under the three-term
/// loss for the configured number of main epochs, resuming from however many
/// the state has already completed. Returns the restored image.
pub fn phase2_optimize<T: Real>(
    state: &mut RestorationState<T>,
    frames: &FrameStack,
) -> Result<Array3<f64>, TrainError> {
    let flat = flatten_stack::<T>(frames, state.config.image_size)?;
    if flat.len() != state.deformers.len() {
        return Err(TrainError::Domain(format!(
            "stack has {} frames but the state carries {} deformers",
            flat.len(),
            state.deformers.len()
        )));
    }
    state.frames = flat;
    let target = state.config.epochs_main;
    optimize_main(state, target)?;
    Ok(state.restored())
}

/// Warm-start update: attach a fresh deformer and blur module for the new
/// frame, evict the oldest frame beyond the window, and run a short joint
/// optimization. Returns the refreshed restored image.
pub fn anytime_update<T: Real>(
    state: &mut RestorationState<T>,
    new_frame: &Array3<f64>,
    epochs_warm: usize,
) -> Result<Array3<f64>, TrainError> {
    let (m, n, c) = new_frame.dim();
    if (m, n) != state.config.image_size || c != 3 {
        return Err(TrainError::Domain(format!(
            "new frame is {m}x{n}x{c}, expected {}x{}x3",
            state.config.image_size.0, state.config.image_size.1
        )));
    }
    if state.blurs.len() != state.frames.len() {
        return Err(TrainError::Domain(
            "anytime mode needs a state that finished joint optimization".into(),
        ));
    }
    let flat =
        Array2::from_shape_fn((m * n, 3), |(r, ch)| T::of(new_frame[(r / n, r % n, ch)]));
    state.frames.push(flat);
    let frame_id = state.frame_counter;
    state.frame_counter += 1;
    state.deformers.push(GridDeformer::new(
        T::of(state.config.max_displacement),
        deformer_seed(state.config.seed, frame_id),
    ));
    state
        .opt_def
        .push(AdamGroup::new_like(&state.deformers.last().unwrap().weights.iter().collect::<Vec<_>>()));
    ensure_blurs(state)?;
    while state.frames.len() > state.config.n_frames {
        state.frames.remove(0);
        state.deformers.remove(0);
        state.blurs.remove(0);
        state.opt_def.remove(0);
        state.opt_alpha.remove(0);
    }
    let target = state.epochs_main_done + epochs_warm;
    optimize_main(state, target)?;
    Ok(state.restored())
}

/// End-to-end convenience entry point: both phases on one stack.
pub fn restore<T: Real>(
    frames: &FrameStack,
    config: &RestorationConfig,
) -> Result<(Array3<f64>, RestorationState<T>), TrainError> {
    let mut state = phase1_init::<T>(frames, config)?;
    let image = phase2_optimize(&mut state, frames)?;
    Ok((image, state))
}

/// Window-50 trailing mean of the total loss at `epoch` (1-based).
pub fn smoothed_total(history: &[LossRecord], epoch: usize) -> f64 {
    assert!(epoch >= 1 && epoch <= history.len());
    let lo = epoch.saturating_sub(50);
    let window = &history[lo..epoch];
    window.iter().map(|r| r.total).sum::<f64>() / window.len() as f64
}

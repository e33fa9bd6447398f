//! Learnable components: per-frame grid deformers, the shared coordinate
//! image generator, and per-frame blur coefficient fields over a frozen PSF
//! basis.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{BlurTables, Tape, Var};
use crate::forward::ForwardError;
use crate::optics::{FieldSampler, OpticsError, PsfBasis, TurbulenceParams, ZernikeField};
use crate::real::Real;
use crate::warp::{unflatten, CoordGrid, UpsampleMap};

const HIDDEN: usize = 256;

/// He-style normal init: N(0, 2/fan_in), biases zero.
fn he_matrix<T: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// Shared coordinate-based generator: positional encoding into five fully
/// connected layers of width 256 with ReLU activations and a final sigmoid.
#[derive(Debug, Clone)]
pub struct ImageGenerator<T: Real> {
    /// Interleaved [weight, bias] pairs for the five layers.
    pub weights: Vec<Array2<T>>,
    pe_bands: usize,
}

impl<T: Real> ImageGenerator<T> {
    pub fn new(pe_bands: usize, seed: u64) -> Self {
        let input_dim = 4 * pe_bands + 2;
        let dims = [
            (input_dim, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, HIDDEN),
            (HIDDEN, 3),
        ];
        let mut weights = Vec::with_capacity(10);
        for (layer, &(fi, fo)) in dims.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(layer as u64);
            weights.push(he_matrix(fi, fo, fi, &mut rng));
            weights.push(Array2::zeros((1, fo)));
        }
        Self { weights, pe_bands }
    }

    pub fn pe_bands(&self) -> usize {
        self.pe_bands
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// Registers every weight as a differentiable tape parameter.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.weights.iter().map(|w| tape.param(w)).collect()
    }

    /// Graph from grid rows (r, 2) to colors (r, 3) in [0, 1].
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], grid: Var) -> Var {
        assert_eq!(vars.len(), self.weights.len(), "generator var count");
        let mut x = tape.positional_encoding(grid, self.pe_bands);
        for layer in 0..5 {
            let z = tape.matmul(x, vars[2 * layer]);
            x = tape.add_row(z, vars[2 * layer + 1]);
            if layer < 4 {
                x = tape.relu(x);
            }
        }
        tape.sigmoid(x)
    }

    /// Convenience evaluation without gradient tracking.
    pub fn generate(&self, grid: &CoordGrid<T>) -> Array3<T> {
        let (h, w) = grid.shape();
        let mut tape = Tape::<T>::new();
        let vars: Vec<Var> = self.weights.iter().map(|p| tape.constant(p.clone())).collect();
        let g = tape.constant(grid.flat().to_owned());
        let out = self.forward(&mut tape, &vars, g);
        unflatten(&tape.value(out), h, w)
    }
}

/// Per-frame grid deformer: four 3x3 same-padded convolutions with 256
/// channels and ReLU activations; the output is a tanh-bounded residual on
/// the input grid, scaled by the maximum displacement.
#[derive(Debug, Clone)]
pub struct GridDeformer<T: Real> {
    /// Interleaved [weight, bias] pairs for the four layers.
    pub weights: Vec<Array2<T>>,
    max_displacement: T,
}

impl<T: Real> GridDeformer<T> {
    pub fn new(max_displacement: T, seed: u64) -> Self {
        let dims = [(2usize, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, 2)];
        let mut weights = Vec::with_capacity(8);
        for (layer, &(ci, co)) in dims.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(layer as u64);
            weights.push(he_matrix(9 * ci, co, 9 * ci, &mut rng));
            weights.push(Array2::zeros((1, co)));
        }
        Self { weights, max_displacement }
    }

    pub fn max_displacement(&self) -> T {
        self.max_displacement
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.weights.iter().map(|w| tape.param(w)).collect()
    }

    /// Graph from uniform grid rows (h*w, 2) to deformed grid rows.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], gu: Var, h: usize, w: usize) -> Var {
        assert_eq!(vars.len(), self.weights.len(), "deformer var count");
        let mut x = gu;
        for layer in 0..4 {
            let z = tape.conv3x3(x, vars[2 * layer], h, w);
            x = tape.add_row(z, vars[2 * layer + 1]);
            if layer < 3 {
                x = tape.relu(x);
            }
        }
        let bounded = tape.tanh(x);
        let residual = tape.scale(bounded, self.max_displacement);
        tape.add(gu, residual)
    }

    /// Convenience evaluation without gradient tracking.
    pub fn deform(&self, gu: &CoordGrid<T>) -> CoordGrid<T> {
        let (h, w) = gu.shape();
        let mut tape = Tape::<T>::new();
        let vars: Vec<Var> = self.weights.iter().map(|p| tape.constant(p.clone())).collect();
        let g = tape.constant(gu.flat().to_owned());
        let out = self.forward(&mut tape, &vars, g, h, w);
        let data = tape.value(out).to_owned().into_shape_with_order((h, w, 2)).unwrap();
        CoordGrid { data }
    }
}

/// Per-frame shift-varying blur: a learnable coefficient field on the
/// control grid, pushed through the frozen basis coefficient map.
#[derive(Debug, Clone)]
pub struct BlurModule<T: Real> {
    /// Control-grid coefficients, shape (m_c * n_c, K), row-major.
    pub alpha: Array2<T>,
    basis: Arc<PsfBasis>,
    tables: Arc<BlurTables<T>>,
    wmap: Array2<T>,
    bvec: Array2<T>,
    control: (usize, usize),
    image: (usize, usize),
    control_spacing: usize,
    upmap: Arc<UpsampleMap>,
}

impl<T: Real> BlurModule<T> {
    /// Draws the initial coefficient field from the turbulence law of
    /// `params`; zero strength gives exactly zero coefficients.
    pub fn new(
        basis: Arc<PsfBasis>,
        image_shape: (usize, usize),
        control_spacing: usize,
        params: TurbulenceParams,
        seed: u64,
    ) -> Result<Self, OpticsError> {
        let sampler = FieldSampler::new(params, image_shape, basis.n_modes, control_spacing)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (field, _) = sampler.sample(&mut rng);
        let (mc, nc, k) = field.coeffs.dim();
        let alpha = Array2::from_shape_fn((mc * nc, k), |(r, c)| {
            T::of(field.coeffs[(r / nc, r % nc, c)])
        });
        let wmap = basis.coeff_w.mapv(T::of);
        let bvec = Array2::from_shape_fn((1, basis.k_prime()), |(_, c)| T::of(basis.coeff_b[c]));
        let tables = Arc::new(basis.blur_tables::<T>());
        let upmap = Arc::new(UpsampleMap::new(mc, nc, image_shape.0, image_shape.1));
        Ok(Self {
            alpha,
            basis,
            tables,
            wmap,
            bvec,
            control: (mc, nc),
            image: image_shape,
            control_spacing,
            upmap,
        })
    }

    pub fn n_params(&self) -> usize {
        self.alpha.len()
    }

    pub fn kernel_size(&self) -> usize {
        self.basis.kernel_size()
    }

    /// Registers the coefficient field as a differentiable tape parameter.
    pub fn register(&self, tape: &mut Tape<T>) -> Var {
        tape.param(&self.alpha)
    }

    /// Graph from image rows (h*w, c) to blurred rows, driven by `alpha_var`.
    pub fn forward(&self, tape: &mut Tape<T>, alpha_var: Var, img: Var) -> Var {
        let per_pixel = tape.upsample(alpha_var, self.upmap.clone());
        let wv = tape.constant(self.wmap.clone());
        let bv = tape.constant(self.bvec.clone());
        let proj = tape.matmul(per_pixel, wv);
        let beta = tape.add_row(proj, bv);
        tape.psf_blur(img, beta, self.tables.clone(), self.image.0, self.image.1)
    }

    /// The current coefficients as a field for the non-graph blur path.
    pub fn field(&self) -> ZernikeField {
        let (mc, nc) = self.control;
        let k = self.alpha.dim().1;
        let coeffs =
            Array3::from_shape_fn((mc, nc, k), |(i, j, c)| self.alpha[(i * nc + j, c)].f64());
        ZernikeField { coeffs, control_spacing: self.control_spacing }
    }

    /// Convenience blur without gradient tracking.
    pub fn blur(&self, tilted: &Array3<f64>) -> Result<Array3<f64>, ForwardError> {
        crate::forward::apply_spatially_varying_blur(tilted, &self.field(), &self.basis)
    }
}

//! Tape-based reverse-mode differentiation over 2-D arrays.
//!
//! Values are computed eagerly; each recorded op hand-codes its adjoint.
//! Images and coordinate grids are stored flat as (h*w, channels) matrices
//! so every dense step lowers to a gemm. The op set is exactly what the
//! restoration pipeline needs, nothing more.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::real::Real;
use crate::warp::{sample_bilinear, sample_bilinear_grad, UpsampleMap};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Frozen blur synthesis tables: per-pixel PSF = clip(mean + beta . comps) / sum.
#[derive(Debug, Clone)]
pub struct BlurTables<T> {
    /// Flattened mean kernel, length p*p, sums to 1.
    pub mean: Array1<T>,
    /// (k', p*p) orthonormal component rows.
    pub comps: Array2<T>,
    pub kernel_size: usize,
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    PosEnc {
        x: usize,
        bands: usize,
    },
    Conv3x3 {
        x: usize,
        w: usize,
        h: usize,
        wd: usize,
    },
    GridSample {
        img: usize,
        grid: usize,
        h: usize,
        w: usize,
    },
    Upsample {
        x: usize,
        map: Arc<UpsampleMap>,
    },
    PsfBlur {
        img: usize,
        beta: usize,
        tab: Arc<BlurTables<T>>,
        h: usize,
        w: usize,
        qn: Array2<T>,
        s: Array1<T>,
    },
    L1 {
        a: usize,
        b: usize,
    },
}

/// Reverse-mode tape. Build the graph forward, then call [`Tape::backward`].
pub struct Tape<T: Real> {
    vals: Vec<Array2<T>>,
    ops: Vec<Op<T>>,
    needs: Vec<bool>,
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, val: Array2<T>, needs: bool) -> Var {
        self.vals.push(val);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        Var(self.vals.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, v: &Array2<T>) -> Var {
        self.push(Op::Leaf, v.clone(), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, v: Array2<T>) -> Var {
        self.push(Op::Leaf, v, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.vals[v.0]
    }

    /// Accumulated gradient, present after backward for needed nodes.
    pub fn grad(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads[v.0].take()
    }

    /// Value of a (1,1) node.
    pub fn scalar(&self, v: Var) -> T {
        let a = &self.vals[v.0];
        assert_eq!(a.dim(), (1, 1), "scalar() on non-scalar node");
        a[(0, 0)]
    }

    fn needs_of(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.needs[v])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim());
        let val = &self.vals[a.0] + &self.vals[b.0];
        let needs = self.needs_of(&[a.0, b.0]);
        self.push(Op::Add(a.0, b.0), val, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim());
        let val = &self.vals[a.0] - &self.vals[b.0];
        let needs = self.needs_of(&[a.0, b.0]);
        self.push(Op::Sub(a.0, b.0), val, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim());
        let val = &self.vals[a.0] * &self.vals[b.0];
        let needs = self.needs_of(&[a.0, b.0]);
        self.push(Op::Mul(a.0, b.0), val, needs)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let val = self.vals[a.0].mapv(|v| v * c);
        let needs = self.needs[a.0];
        self.push(Op::Scale(a.0, c), val, needs)
    }

    /// (r, c) + (1, c), broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, c) = self.vals[a.0].dim();
        assert_eq!(self.vals[bias.0].dim(), (1, c));
        let val = &self.vals[a.0] + &self.vals[bias.0];
        let needs = self.needs_of(&[a.0, bias.0]);
        self.push(Op::AddRow(a.0, bias.0), val, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.vals[a.0].dim();
        let (k2, c) = self.vals[b.0].dim();
        assert_eq!(k, k2, "matmul inner dims");
        let mut val = Array2::zeros((r, c));
        general_mat_mul(
            T::one(),
            &self.vals[a.0],
            &self.vals[b.0],
            T::zero(),
            &mut val,
        );
        let needs = self.needs_of(&[a.0, b.0]);
        self.push(Op::MatMul(a.0, b.0), val, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs[a.0];
        self.push(Op::Relu(a.0), val, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|v| T::one() / (T::one() + (-v).exp()));
        let needs = self.needs[a.0];
        self.push(Op::Sigmoid(a.0), val, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|v| v.tanh());
        let needs = self.needs[a.0];
        self.push(Op::Tanh(a.0), val, needs)
    }

    /// [x, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...]; input (r, 2),
    /// output (r, 4*bands + 2).
    pub fn positional_encoding(&mut self, x: Var, bands: usize) -> Var {
        let (r, d) = self.vals[x.0].dim();
        assert_eq!(d, 2, "positional encoding expects (r, 2) coordinates");
        let mut val = Array2::zeros((r, 4 * bands + 2));
        val.slice_mut(s![.., 0..2]).assign(&self.vals[x.0]);
        for b in 0..bands {
            let sb = T::of(std::f64::consts::PI * (1u64 << b) as f64);
            let base = 2 + 4 * b;
            for i in 0..r {
                for j in 0..2 {
                    let v = self.vals[x.0][(i, j)] * sb;
                    val[(i, base + j)] = v.sin();
                    val[(i, base + 2 + j)] = v.cos();
                }
            }
        }
        let needs = self.needs[x.0];
        self.push(Op::PosEnc { x: x.0, bands }, val, needs)
    }

    /// 3x3 stride-1 zero-padded convolution. Input (h*wd, cin) row-major,
    /// weights (9*cin, cout) in tap-major blocks, taps scanned row-major.
    pub fn conv3x3(&mut self, x: Var, w: Var, h: usize, wd: usize) -> Var {
        let (hw, cin) = self.vals[x.0].dim();
        assert_eq!(hw, h * wd, "conv input shape");
        let (wrows, cout) = self.vals[w.0].dim();
        assert_eq!(wrows, 9 * cin, "conv weight shape");
        let mut out = Array2::zeros((hw, cout));
        let mut buf = Array2::zeros((hw, cin));
        for (t, (dy, dx)) in taps(3).enumerate() {
            gather_shift_zero(&self.vals[x.0].view(), &mut buf, h, wd, dy, dx);
            let wt = self.vals[w.0].slice(s![t * cin..(t + 1) * cin, ..]);
            let beta = if t == 0 { T::zero() } else { T::one() };
            general_mat_mul(T::one(), &buf, &wt, beta, &mut out);
        }
        let needs = self.needs_of(&[x.0, w.0]);
        self.push(
            Op::Conv3x3 {
                x: x.0,
                w: w.0,
                h,
                wd,
            },
            out,
            needs,
        )
    }

    /// Bilinear sampling of img (h*w, c) at grid rows (n, 2).
    pub fn grid_sample(&mut self, img: Var, grid: Var, h: usize, w: usize) -> Var {
        assert_eq!(self.vals[img.0].dim().0, h * w, "grid_sample image shape");
        assert_eq!(self.vals[grid.0].dim().1, 2, "grid_sample grid shape");
        let out = sample_bilinear(&self.vals[img.0].view(), &self.vals[grid.0].view(), h, w);
        let needs = self.needs_of(&[img.0, grid.0]);
        self.push(
            Op::GridSample {
                img: img.0,
                grid: grid.0,
                h,
                w,
            },
            out,
            needs,
        )
    }

    /// Control-grid values to per-pixel values through a fixed bilinear map.
    pub(crate) fn upsample(&mut self, x: Var, map: Arc<UpsampleMap>) -> Var {
        assert_eq!(self.vals[x.0].dim().0, map.ch * map.cw, "upsample control shape");
        let out = map.apply(&self.vals[x.0].view());
        let needs = self.needs[x.0];
        self.push(Op::Upsample { x: x.0, map }, out, needs)
    }

    /// Spatially varying blur: per-pixel PSF synthesized from basis
    /// coefficients beta (h*w, k'), clipped at zero and renormalized, then
    /// applied to img (h*w, c) with border clamp.
    pub fn psf_blur(&mut self, img: Var, beta: Var, tab: Arc<BlurTables<T>>, h: usize, w: usize) -> Var {
        let (hw, _c) = self.vals[img.0].dim();
        assert_eq!(hw, h * w, "psf_blur image shape");
        assert_eq!(
            self.vals[beta.0].dim(),
            (hw, tab.comps.dim().0),
            "psf_blur beta shape"
        );
        let fwd = blur_forward(
            &self.vals[img.0].view(),
            &self.vals[beta.0].view(),
            &tab,
            h,
            w,
        );
        let needs = self.needs_of(&[img.0, beta.0]);
        self.push(
            Op::PsfBlur {
                img: img.0,
                beta: beta.0,
                tab,
                h,
                w,
                qn: fwd.qn,
                s: fwd.s,
            },
            fwd.out,
            needs,
        )
    }

    /// Mean absolute difference, a (1,1) node.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim());
        let n = T::of(self.vals[a.0].len() as f64);
        let sum: T = self.vals[a.0]
            .iter()
            .zip(self.vals[b.0].iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let val = Array2::from_elem((1, 1), sum / n);
        let needs = self.needs_of(&[a.0, b.0]);
        self.push(Op::L1 { a: a.0, b: b.0 }, val, needs)
    }

    /// Backward from a scalar loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.vals[loss.0].dim(), (1, 1), "backward from non-scalar");
        self.backward_seeded(loss, Array2::from_elem((1, 1), T::one()));
    }

    /// Backward from any node with an explicit output gradient.
    pub fn backward_seeded(&mut self, var: Var, seed: Array2<T>) {
        assert_eq!(self.vals[var.0].dim(), seed.dim(), "seed shape");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.needs[var.0] {
            return;
        }
        self.grads[var.0] = Some(seed);
        let Tape {
            vals,
            ops,
            needs,
            grads,
        } = self;
        for i in (0..=var.0).rev() {
            if grads[i].is_none() || matches!(ops[i], Op::Leaf) {
                continue;
            }
            let g = grads[i].take().unwrap();
            match &ops[i] {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(grads, needs, *a, || g.clone());
                    acc(grads, needs, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    acc(grads, needs, *a, || g.clone());
                    acc(grads, needs, *b, || g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(grads, needs, *a, || &g * &vals[*b]);
                    acc(grads, needs, *b, || &g * &vals[*a]);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(grads, needs, *a, || g.mapv(|v| v * c));
                }
                Op::AddRow(a, bias) => {
                    acc(grads, needs, *a, || g.clone());
                    acc(grads, needs, *bias, || {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0))
                    });
                }
                Op::MatMul(a, b) => {
                    if needs[*a] {
                        let mut ga = Array2::zeros(vals[*a].dim());
                        general_mat_mul(T::one(), &g, &vals[*b].t(), T::zero(), &mut ga);
                        acc(grads, needs, *a, || ga);
                    }
                    if needs[*b] {
                        let mut gb = Array2::zeros(vals[*b].dim());
                        general_mat_mul(T::one(), &vals[*a].t(), &g, T::zero(), &mut gb);
                        acc(grads, needs, *b, || gb);
                    }
                }
                Op::Relu(a) => {
                    let y = &vals[i];
                    acc(grads, needs, *a, || {
                        let mut ga = g.clone();
                        ga.zip_mut_with(y, |gv, &yv| {
                            if yv <= T::zero() {
                                *gv = T::zero();
                            }
                        });
                        ga
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &vals[i];
                    acc(grads, needs, *a, || {
                        let mut ga = g.clone();
                        ga.zip_mut_with(y, |gv, &yv| *gv = *gv * yv * (T::one() - yv));
                        ga
                    });
                }
                Op::Tanh(a) => {
                    let y = &vals[i];
                    acc(grads, needs, *a, || {
                        let mut ga = g.clone();
                        ga.zip_mut_with(y, |gv, &yv| *gv = *gv * (T::one() - yv * yv));
                        ga
                    });
                }
                Op::PosEnc { x, bands } => {
                    let y = &vals[i];
                    let r = y.dim().0;
                    let bands = *bands;
                    acc(grads, needs, *x, || {
                        let mut gx = g.slice(s![.., 0..2]).to_owned();
                        for b in 0..bands {
                            let sb = T::of(std::f64::consts::PI * (1u64 << b) as f64);
                            let base = 2 + 4 * b;
                            for i2 in 0..r {
                                for j in 0..2 {
                                    let sin_v = y[(i2, base + j)];
                                    let cos_v = y[(i2, base + 2 + j)];
                                    gx[(i2, j)] = gx[(i2, j)]
                                        + sb * (g[(i2, base + j)] * cos_v
                                            - g[(i2, base + 2 + j)] * sin_v);
                                }
                            }
                        }
                        gx
                    });
                }
                Op::Conv3x3 { x, w, h, wd } => {
                    let (hw, cin) = vals[*x].dim();
                    let cout = vals[*w].dim().1;
                    let (h, wd) = (*h, *wd);
                    let need_x = needs[*x];
                    let need_w = needs[*w];
                    let mut gx = need_x.then(|| Array2::<T>::zeros((hw, cin)));
                    let mut gw = need_w.then(|| Array2::<T>::zeros((9 * cin, cout)));
                    let mut buf = Array2::<T>::zeros((hw, cin));
                    for (t, (dy, dx)) in taps(3).enumerate() {
                        if let Some(gw) = gw.as_mut() {
                            gather_shift_zero(&vals[*x].view(), &mut buf, h, wd, dy, dx);
                            let mut blk = gw.slice_mut(s![t * cin..(t + 1) * cin, ..]);
                            general_mat_mul(T::one(), &buf.t(), &g, T::one(), &mut blk);
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wt = vals[*w].slice(s![t * cin..(t + 1) * cin, ..]);
                            let mut tmp = Array2::<T>::zeros((hw, cin));
                            general_mat_mul(T::one(), &g, &wt.t(), T::zero(), &mut tmp);
                            scatter_shift_zero_add(&tmp.view(), gx, h, wd, dy, dx);
                        }
                    }
                    if let Some(gx) = gx {
                        acc(grads, needs, *x, || gx);
                    }
                    if let Some(gw) = gw {
                        acc(grads, needs, *w, || gw);
                    }
                }
                Op::GridSample { img, grid, h, w } => {
                    let (gimg, ggrid) = sample_bilinear_grad(
                        &vals[*img].view(),
                        &vals[*grid].view(),
                        *h,
                        *w,
                        &g.view(),
                    );
                    acc(grads, needs, *img, || gimg);
                    acc(grads, needs, *grid, || ggrid);
                }
                Op::Upsample { x, map } => {
                    let gx = map.scatter(&g.view());
                    acc(grads, needs, *x, || gx);
                }
                Op::PsfBlur {
                    img,
                    beta,
                    tab,
                    h,
                    w,
                    qn,
                    s,
                } => {
                    let (gimg, gbeta) = blur_backward(
                        &vals[*img].view(),
                        &vals[i].view(),
                        qn,
                        s,
                        tab,
                        *h,
                        *w,
                        &g.view(),
                        needs[*img],
                        needs[*beta],
                    );
                    if let Some(gimg) = gimg {
                        acc(grads, needs, *img, || gimg);
                    }
                    if let Some(gbeta) = gbeta {
                        acc(grads, needs, *beta, || gbeta);
                    }
                }
                Op::L1 { a, b } => {
                    let coef = g[(0, 0)] / T::of(vals[*a].len() as f64);
                    let mut ga = Array2::zeros(vals[*a].dim());
                    ga.zip_mut_with(&(&vals[*a] - &vals[*b]), |o, &d| {
                        *o = if d > T::zero() {
                            coef
                        } else if d < T::zero() {
                            -coef
                        } else {
                            T::zero()
                        }
                    });
                    let gb = ga.mapv(|v| -v);
                    acc(grads, needs, *a, || ga);
                    acc(grads, needs, *b, || gb);
                }
            }
        }
    }
}

fn acc<T: Real>(
    grads: &mut [Option<Array2<T>>],
    needs: &[bool],
    j: usize,
    make: impl FnOnce() -> Array2<T>,
) {
    if !needs[j] {
        return;
    }
    let delta = make();
    match &mut grads[j] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Taps of a p x p kernel, scanned row-major, offsets relative to center.
pub(crate) fn taps(p: usize) -> impl Iterator<Item = (isize, isize)> {
    let c = (p / 2) as isize;
    (0..p * p).map(move |k| ((k / p) as isize - c, (k % p) as isize - c))
}

/// dst[y*w+x] = src[(y+dy)*w + (x+dx)] where in bounds, else 0.
pub(crate) fn gather_shift_zero<T: Real>(
    src: &ArrayView2<T>,
    dst: &mut Array2<T>,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) {
    dst.fill(T::zero());
    let ylo = (-dy).max(0) as usize;
    let yhi = ((h as isize - dy.max(0)).max(0)) as usize;
    let xlo = (-dx).max(0) as usize;
    let xhi = ((w as isize - dx.max(0)).max(0)) as usize;
    if xlo >= xhi {
        return;
    }
    for y in ylo..yhi {
        let sy = (y as isize + dy) as usize;
        let src_rows = src.slice(s![
            sy * w + (xlo as isize + dx) as usize..sy * w + (xhi as isize + dx) as usize,
            ..
        ]);
        dst.slice_mut(s![y * w + xlo..y * w + xhi, ..]).assign(&src_rows);
    }
}

/// dst[(y+dy)*w + (x+dx)] += src[y*w+x] for in-bounds targets.
pub(crate) fn scatter_shift_zero_add<T: Real>(
    src: &ArrayView2<T>,
    dst: &mut Array2<T>,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) {
    let ylo = (-dy).max(0) as usize;
    let yhi = ((h as isize - dy.max(0)).max(0)) as usize;
    let xlo = (-dx).max(0) as usize;
    let xhi = ((w as isize - dx.max(0)).max(0)) as usize;
    if xlo >= xhi {
        return;
    }
    for y in ylo..yhi {
        let ty = (y as isize + dy) as usize;
        let mut dst_rows = dst.slice_mut(s![
            ty * w + (xlo as isize + dx) as usize..ty * w + (xhi as isize + dx) as usize,
            ..
        ]);
        dst_rows += &src.slice(s![y * w + xlo..y * w + xhi, ..]);
    }
}

/// dst[y*w+x] = src[clamp(y+dy)*w + clamp(x+dx)] (border replicate).
pub(crate) fn gather_shift_clamp<T: Real>(
    src: &ArrayView2<T>,
    dst: &mut Array2<T>,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) {
    let c = src.dim().1;
    let xlo = (-dx).max(0) as usize;
    let xhi = ((w as isize - dx.max(0)).max(0)) as usize;
    for y in 0..h {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        if xlo < xhi {
            let src_rows = src.slice(s![
                sy * w + (xlo as isize + dx) as usize..sy * w + (xhi as isize + dx) as usize,
                ..
            ]);
            dst.slice_mut(s![y * w + xlo..y * w + xhi, ..]).assign(&src_rows);
        }
        for x in 0..xlo.min(w) {
            for ch in 0..c {
                dst[(y * w + x, ch)] = src[(sy * w, ch)];
            }
        }
        for x in xhi.max(xlo.min(w))..w {
            for ch in 0..c {
                dst[(y * w + x, ch)] = src[(sy * w + w - 1, ch)];
            }
        }
    }
}

/// dst[clamp(y+dy)*w + clamp(x+dx)] += src[y*w+x].
pub(crate) fn scatter_shift_clamp_add<T: Real>(
    src: &ArrayView2<T>,
    dst: &mut Array2<T>,
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) {
    let c = src.dim().1;
    for y in 0..h {
        let ty = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        for x in 0..w {
            let tx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
            for ch in 0..c {
                dst[(ty * w + tx, ch)] = dst[(ty * w + tx, ch)] + src[(y * w + x, ch)];
            }
        }
    }
}

pub(crate) struct BlurForwardOut<T> {
    pub out: Array2<T>,
    /// Per-pixel normalized PSF rows, (h*w, p*p).
    pub qn: Array2<T>,
    /// Pre-normalization sums of the clipped PSFs.
    pub s: Array1<T>,
}

/// Synthesize per-pixel PSFs from basis coefficients and apply them.
pub(crate) fn blur_forward<T: Real>(
    img: &ArrayView2<T>,
    beta: &ArrayView2<T>,
    tab: &BlurTables<T>,
    h: usize,
    w: usize,
) -> BlurForwardOut<T> {
    let hw = img.dim().0;
    let c = img.dim().1;
    let p = tab.kernel_size;
    let p2 = p * p;
    let mut q = Array2::zeros((hw, p2));
    general_mat_mul(T::one(), beta, &tab.comps, T::zero(), &mut q);
    let tiny = T::of(1e-12);
    let mut s = Array1::zeros(hw);
    for r in 0..hw {
        let mut sum = T::zero();
        for t in 0..p2 {
            let v = q[(r, t)] + tab.mean[t];
            let v = if v > T::zero() { v } else { T::zero() };
            q[(r, t)] = v;
            sum = sum + v;
        }
        s[r] = sum;
        let inv = T::one() / sum.max(tiny);
        for t in 0..p2 {
            q[(r, t)] = q[(r, t)] * inv;
        }
    }
    let qn = q;
    let mut out = Array2::zeros((hw, c));
    let mut buf = Array2::zeros((hw, c));
    for (t, (dy, dx)) in taps(p).enumerate() {
        gather_shift_clamp(img, &mut buf, h, w, dy, dx);
        for r in 0..hw {
            let wgt = qn[(r, t)];
            for ch in 0..c {
                out[(r, ch)] = out[(r, ch)] + wgt * buf[(r, ch)];
            }
        }
    }
    BlurForwardOut { out, qn, s }
}

/// Adjoint of [`blur_forward`] w.r.t. image and beta.
#[allow(clippy::too_many_arguments)]
pub(crate) fn blur_backward<T: Real>(
    img: &ArrayView2<T>,
    out: &ArrayView2<T>,
    qn: &Array2<T>,
    s: &Array1<T>,
    tab: &BlurTables<T>,
    h: usize,
    w: usize,
    gout: &ArrayView2<T>,
    need_img: bool,
    need_beta: bool,
) -> (Option<Array2<T>>, Option<Array2<T>>) {
    let hw = img.dim().0;
    let c = img.dim().1;
    let p = tab.kernel_size;
    let p2 = p * p;
    let mut gimg = need_img.then(|| Array2::<T>::zeros((hw, c)));
    let mut dq = need_beta.then(|| Array2::<T>::zeros((hw, p2)));
    let mut buf = Array2::<T>::zeros((hw, c));
    let mut sbuf = Array2::<T>::zeros((hw, c));
    for (t, (dy, dx)) in taps(p).enumerate() {
        if let Some(dq) = dq.as_mut() {
            gather_shift_clamp(img, &mut buf, h, w, dy, dx);
            for r in 0..hw {
                // clipped entries and degenerate rows carry no coefficient grad
                if qn[(r, t)] > T::zero() && s[r] > T::zero() {
                    let mut a = T::zero();
                    for ch in 0..c {
                        a = a + gout[(r, ch)] * (buf[(r, ch)] - out[(r, ch)]);
                    }
                    dq[(r, t)] = a / s[r];
                }
            }
        }
        if let Some(gimg) = gimg.as_mut() {
            for r in 0..hw {
                let wgt = qn[(r, t)];
                for ch in 0..c {
                    sbuf[(r, ch)] = wgt * gout[(r, ch)];
                }
            }
            scatter_shift_clamp_add(&sbuf.view(), gimg, h, w, dy, dx);
        }
    }
    let gbeta = dq.map(|dq| {
        let mut gbeta = Array2::zeros((hw, tab.comps.dim().0));
        general_mat_mul(T::one(), &dq, &tab.comps.t(), T::zero(), &mut gbeta);
        gbeta
    });
    (gimg, gbeta)
}

//! Coordinate grids and bilinear resampling.
//!
//! Grids use normalized align-corner coordinates: x = -1 is the center of
//! the first column, x = +1 the center of the last, and likewise for y.
//! Tilt fields are per-pixel displacements in pixel units; converting one
//! to a grid adds 2*t/(n-1) per axis to the uniform grid.

use ndarray::{Array2, Array3, ArrayView2};
use thiserror::Error;

use crate::real::Real;

/// Per-pixel displacement field in pixels, shape (h, w, 2), x then y.
pub type TiltField<T> = Array3<T>;

#[derive(Debug, Error)]
pub enum WarpError {
    #[error("grid dimensions must be at least 2x2, got {m}x{n}")]
    GridTooSmall { m: usize, n: usize },
    #[error("image dimensions must be at least 2x2, got {m}x{n}")]
    ImageTooSmall { m: usize, n: usize },
}

/// Sampling grid of normalized coordinates, shape (h, w, 2), x then y.
#[derive(Debug, Clone)]
pub struct CoordGrid<T> {
    pub data: Array3<T>,
}

impl<T: Real> CoordGrid<T> {
    pub fn shape(&self) -> (usize, usize) {
        (self.data.shape()[0], self.data.shape()[1])
    }

    /// View as (h*w, 2) rows for the flat sampling kernels.
    pub fn flat(&self) -> ArrayView2<'_, T> {
        let (h, w) = self.shape();
        self.data.view().into_shape_with_order((h * w, 2)).unwrap()
    }
}

/// Identity grid: pixel (i, j) maps to (-1 + 2j/(n-1), -1 + 2i/(m-1)).
pub fn uniform_grid<T: Real>(m: usize, n: usize) -> Result<CoordGrid<T>, WarpError> {
    if m < 2 || n < 2 {
        return Err(WarpError::GridTooSmall { m, n });
    }
    let mut data = Array3::zeros((m, n, 2));
    for i in 0..m {
        let y = T::of(-1.0 + 2.0 * i as f64 / (m as f64 - 1.0));
        for j in 0..n {
            let x = T::of(-1.0 + 2.0 * j as f64 / (n as f64 - 1.0));
            data[(i, j, 0)] = x;
            data[(i, j, 1)] = y;
        }
    }
    Ok(CoordGrid { data })
}

/// Displacements in pixels -> sampling grid over the same raster.
pub fn tilt_field_to_grid<T: Real>(tilt: &TiltField<T>) -> Result<CoordGrid<T>, WarpError> {
    let (m, n) = (tilt.shape()[0], tilt.shape()[1]);
    let mut grid = uniform_grid::<T>(m, n)?;
    let sx = T::of(2.0 / (n as f64 - 1.0));
    let sy = T::of(2.0 / (m as f64 - 1.0));
    for i in 0..m {
        for j in 0..n {
            grid.data[(i, j, 0)] = grid.data[(i, j, 0)] + tilt[(i, j, 0)] * sx;
            grid.data[(i, j, 1)] = grid.data[(i, j, 1)] + tilt[(i, j, 1)] * sy;
        }
    }
    Ok(grid)
}

/// Inverse of [`tilt_field_to_grid`]: recover pixel displacements.
pub fn grid_to_tilt_field<T: Real>(grid: &CoordGrid<T>) -> Result<TiltField<T>, WarpError> {
    let (m, n) = grid.shape();
    let base = uniform_grid::<T>(m, n)?;
    let sx = T::of((n as f64 - 1.0) / 2.0);
    let sy = T::of((m as f64 - 1.0) / 2.0);
    let mut tilt = Array3::zeros((m, n, 2));
    for i in 0..m {
        for j in 0..n {
            tilt[(i, j, 0)] = (grid.data[(i, j, 0)] - base.data[(i, j, 0)]) * sx;
            tilt[(i, j, 1)] = (grid.data[(i, j, 1)] - base.data[(i, j, 1)]) * sy;
        }
    }
    Ok(tilt)
}

/// Bilinear resample with border clamp. Output takes the grid's shape.
pub fn resample<T: Real>(
    image: &Array3<T>,
    grid: &CoordGrid<T>,
) -> Result<Array3<T>, WarpError> {
    let (hi, wi, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if hi < 2 || wi < 2 {
        return Err(WarpError::ImageTooSmall { m: hi, n: wi });
    }
    let (h, w) = grid.shape();
    let flat_img = image.view().into_shape_with_order((hi * wi, c)).unwrap();
    let out = sample_bilinear(&flat_img, &grid.flat(), hi, wi);
    Ok(out.into_shape_with_order((h, w, c)).unwrap())
}

/// Snap tolerance scaled so integer-coordinate sampling is exact at either
/// float width without disturbing finite-difference checks.
#[inline]
fn snap_eps<T: Real>(dim: usize) -> T {
    T::of(dim as f64 * 4.0) * T::epsilon()
}

/// Map a normalized coordinate to a clamped pixel position.
#[inline]
fn to_pixel<T: Real>(g: T, dim: usize) -> (T, bool) {
    let last = T::of(dim as f64 - 1.0);
    let half = T::of(0.5);
    let mut p = (g + T::one()) * half * last;
    let r = p.round();
    if (p - r).abs() <= snap_eps::<T>(dim) {
        p = r;
    }
    if p < T::zero() {
        (T::zero(), true)
    } else if p > last {
        (last, true)
    } else {
        (p, false)
    }
}

#[inline]
fn cell<T: Real>(p: T, dim: usize) -> (usize, T) {
    let i0 = (p.to_usize().unwrap_or(0)).min(dim - 2);
    (i0, p - T::of(i0 as f64))
}

/// Flat bilinear sampling kernel: image rows are (hi*wi, c) row-major,
/// grid rows are (n, 2) normalized coordinates.
pub(crate) fn sample_bilinear<T: Real>(
    image: &ArrayView2<T>,
    grid: &ArrayView2<T>,
    hi: usize,
    wi: usize,
) -> Array2<T> {
    let n = grid.shape()[0];
    let c = image.shape()[1];
    let mut out = Array2::zeros((n, c));
    for r in 0..n {
        let (px, _) = to_pixel(grid[(r, 0)], wi);
        let (py, _) = to_pixel(grid[(r, 1)], hi);
        let (x0, fx) = cell(px, wi);
        let (y0, fy) = cell(py, hi);
        let base0 = y0 * wi + x0;
        let base1 = base0 + wi;
        let one = T::one();
        let w00 = (one - fy) * (one - fx);
        let w01 = (one - fy) * fx;
        let w10 = fy * (one - fx);
        let w11 = fy * fx;
        for ch in 0..c {
            out[(r, ch)] = w00 * image[(base0, ch)]
                + w01 * image[(base0 + 1, ch)]
                + w10 * image[(base1, ch)]
                + w11 * image[(base1 + 1, ch)];
        }
    }
    out
}

/// Adjoint of [`sample_bilinear`]: gradients w.r.t. image and grid.
/// Clamped coordinates get zero grid gradient.
pub(crate) fn sample_bilinear_grad<T: Real>(
    image: &ArrayView2<T>,
    grid: &ArrayView2<T>,
    hi: usize,
    wi: usize,
    gout: &ArrayView2<T>,
) -> (Array2<T>, Array2<T>) {
    let n = grid.shape()[0];
    let c = image.shape()[1];
    let mut gimg = Array2::zeros((hi * wi, c));
    let mut ggrid = Array2::zeros((n, 2));
    let sx = T::of((wi as f64 - 1.0) / 2.0);
    let sy = T::of((hi as f64 - 1.0) / 2.0);
    for r in 0..n {
        let (px, cx) = to_pixel(grid[(r, 0)], wi);
        let (py, cy) = to_pixel(grid[(r, 1)], hi);
        let (x0, fx) = cell(px, wi);
        let (y0, fy) = cell(py, hi);
        let base0 = y0 * wi + x0;
        let base1 = base0 + wi;
        let one = T::one();
        let mut dpx = T::zero();
        let mut dpy = T::zero();
        for ch in 0..c {
            let g = gout[(r, ch)];
            let v00 = image[(base0, ch)];
            let v01 = image[(base0 + 1, ch)];
            let v10 = image[(base1, ch)];
            let v11 = image[(base1 + 1, ch)];
            gimg[(base0, ch)] = gimg[(base0, ch)] + g * (one - fy) * (one - fx);
            gimg[(base0 + 1, ch)] = gimg[(base0 + 1, ch)] + g * (one - fy) * fx;
            gimg[(base1, ch)] = gimg[(base1, ch)] + g * fy * (one - fx);
            gimg[(base1 + 1, ch)] = gimg[(base1 + 1, ch)] + g * fy * fx;
            dpx = dpx + g * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
            dpy = dpy + g * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        if !cx {
            ggrid[(r, 0)] = dpx * sx;
        }
        if !cy {
            ggrid[(r, 1)] = dpy * sy;
        }
    }
    (gimg, ggrid)
}

/// Precomputed bilinear weights for upsampling a control grid of values
/// (one per control cell center) to per-pixel resolution with edge clamp.
#[derive(Debug, Clone)]
pub(crate) struct UpsampleMap {
    pub rows: Vec<(usize, usize, f64)>,
    pub cols: Vec<(usize, usize, f64)>,
    pub ch: usize,
    pub cw: usize,
}

impl UpsampleMap {
    /// Control points sit at the centers of s x s tiles, s = h/ch = w/cw.
    pub fn new(ch: usize, cw: usize, h: usize, w: usize) -> Self {
        let axis = |c: usize, d: usize| -> Vec<(usize, usize, f64)> {
            let s = d as f64 / c as f64;
            (0..d)
                .map(|i| {
                    let u = (i as f64 + 0.5) / s - 0.5;
                    let u = u.clamp(0.0, c as f64 - 1.0);
                    let i0 = (u.floor() as usize).min(c.saturating_sub(2).max(0));
                    if c == 1 {
                        (0, 0, 0.0)
                    } else {
                        (i0, i0 + 1, u - i0 as f64)
                    }
                })
                .collect()
        };
        UpsampleMap {
            rows: axis(ch, h),
            cols: axis(cw, w),
            ch,
            cw,
        }
    }

    /// (ch*cw, k) control values -> (h*w, k) per-pixel values.
    pub fn apply<T: Real>(&self, control: &ArrayView2<T>) -> Array2<T> {
        let k = control.shape()[1];
        let (h, w) = (self.rows.len(), self.cols.len());
        let mut out = Array2::zeros((h * w, k));
        for (i, &(i0, i1, fi)) in self.rows.iter().enumerate() {
            for (j, &(j0, j1, fj)) in self.cols.iter().enumerate() {
                let r = i * w + j;
                let (fi, fj) = (T::of(fi), T::of(fj));
                let one = T::one();
                let c00 = i0 * self.cw + j0;
                let c01 = i0 * self.cw + j1;
                let c10 = i1 * self.cw + j0;
                let c11 = i1 * self.cw + j1;
                for q in 0..k {
                    out[(r, q)] = (one - fi) * (one - fj) * control[(c00, q)]
                        + (one - fi) * fj * control[(c01, q)]
                        + fi * (one - fj) * control[(c10, q)]
                        + fi * fj * control[(c11, q)];
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::apply`].
    pub fn scatter<T: Real>(&self, gout: &ArrayView2<T>) -> Array2<T> {
        let k = gout.shape()[1];
        let w = self.cols.len();
        let mut gctl = Array2::zeros((self.ch * self.cw, k));
        for (i, &(i0, i1, fi)) in self.rows.iter().enumerate() {
            for (j, &(j0, j1, fj)) in self.cols.iter().enumerate() {
                let r = i * w + j;
                let (fi, fj) = (T::of(fi), T::of(fj));
                let one = T::one();
                let c00 = i0 * self.cw + j0;
                let c01 = i0 * self.cw + j1;
                let c10 = i1 * self.cw + j0;
                let c11 = i1 * self.cw + j1;
                for q in 0..k {
                    let g = gout[(r, q)];
                    gctl[(c00, q)] = gctl[(c00, q)] + (one - fi) * (one - fj) * g;
                    gctl[(c01, q)] = gctl[(c01, q)] + (one - fi) * fj * g;
                    gctl[(c10, q)] = gctl[(c10, q)] + fi * (one - fj) * g;
                    gctl[(c11, q)] = gctl[(c11, q)] + fi * fj * g;
                }
            }
        }
        gctl
    }
}

/// Flatten an (h, w, c) image to the (h*w, c) layout used by the kernels.
pub fn flatten<T: Real>(image: &Array3<T>) -> Array2<T> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    image
        .view()
        .into_shape_with_order((h * w, c))
        .unwrap()
        .to_owned()
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Real>(flat: &Array2<T>, h: usize, w: usize) -> Array3<T> {
    let c = flat.shape()[1];
    flat.view()
        .into_shape_with_order((h, w, c))
        .unwrap()
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, c), |_| rng.gen::<f64>())
    }

    #[test]
    fn uniform_grid_corners_and_center() {
        let g = uniform_grid::<f64>(3, 3).unwrap();
        assert_eq!(g.data[(0, 0, 0)], -1.0);
        assert_eq!(g.data[(0, 0, 1)], -1.0);
        assert_eq!(g.data[(2, 2, 0)], 1.0);
        assert_eq!(g.data[(2, 2, 1)], 1.0);
        assert_eq!(g.data[(1, 1, 0)], 0.0);
        assert_eq!(g.data[(1, 1, 1)], 0.0);

        let g2 = uniform_grid::<f64>(2, 2).unwrap();
        for (i, j, want) in [(0usize, 0usize, (-1.0, -1.0)), (1, 1, (1.0, 1.0))] {
            assert_eq!(g2.data[(i, j, 0)], want.0);
            assert_eq!(g2.data[(i, j, 1)], want.1);
        }
    }

    #[test]
    fn uniform_grid_pitch_256() {
        let g = uniform_grid::<f64>(256, 256).unwrap();
        let pitch = g.data[(0, 1, 0)] - g.data[(0, 0, 0)];
        assert_relative_eq!(pitch, 2.0 / 255.0, max_relative = 1e-15);
    }

    #[test]
    fn uniform_grid_rejects_degenerate() {
        assert!(uniform_grid::<f64>(1, 8).is_err());
        assert!(uniform_grid::<f64>(8, 1).is_err());
    }

    #[test]
    fn identity_resample_is_bit_exact() {
        let img = rand_image(9, 7, 3, 1);
        let g = uniform_grid::<f64>(9, 7).unwrap();
        let out = resample(&img, &g).unwrap();
        assert_eq!(img, out);

        let img32 = img.mapv(|v| v as f32);
        let g32 = uniform_grid::<f32>(9, 7).unwrap();
        let out32 = resample(&img32, &g32).unwrap();
        assert_eq!(img32, out32);
    }

    #[test]
    fn one_pixel_shift_is_bit_exact_interior() {
        let img = rand_image(8, 8, 2, 2);
        let tilt = Array3::from_elem((8, 8, 2), 0.0)
            + &Array3::from_shape_fn((8, 8, 2), |(_, _, k)| if k == 0 { 1.0 } else { 0.0 });
        let grid = tilt_field_to_grid(&tilt).unwrap();
        let out = resample(&img, &grid).unwrap();
        // sampling position x+1 pulls the next column; last column clamps
        for i in 0..8 {
            for j in 0..7 {
                for ch in 0..2 {
                    assert_eq!(out[(i, j, ch)], img[(i, j + 1, ch)]);
                }
            }
        }
    }

    #[test]
    fn constant_tilt_conversion_matches_pitch() {
        let tilt = Array3::from_shape_fn((4, 256, 2), |(_, _, k)| if k == 0 { 1.0 } else { 0.0 });
        let grid = tilt_field_to_grid(&tilt).unwrap();
        let base = uniform_grid::<f64>(4, 256).unwrap();
        for i in 0..4 {
            for j in 0..256 {
                assert_relative_eq!(
                    grid.data[(i, j, 0)] - base.data[(i, j, 0)],
                    2.0 / 255.0,
                    max_relative = 1e-14
                );
                assert_eq!(grid.data[(i, j, 1)], base.data[(i, j, 1)]);
            }
        }
    }

    #[test]
    fn tilt_grid_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tilt = Array3::from_shape_fn((12, 10, 2), |_| rng.gen::<f64>() * 4.0 - 2.0);
        let grid = tilt_field_to_grid(&tilt).unwrap();
        let back = grid_to_tilt_field(&grid).unwrap();
        for (a, b) in tilt.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_is_linear_in_image() {
        let a = rand_image(6, 6, 3, 4);
        let b = rand_image(6, 6, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = CoordGrid {
            data: Array3::from_shape_fn((5, 4, 2), |_| rng.gen::<f64>() * 2.2 - 1.1),
        };
        let lhs = resample(&(&a * 0.3 + &b * 1.7), &grid).unwrap();
        let rhs = resample(&a, &grid).unwrap() * 0.3 + &(resample(&b, &grid).unwrap() * 1.7);
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_coordinates_clamp_to_border() {
        let img = rand_image(4, 4, 1, 7);
        let mut grid = uniform_grid::<f64>(2, 2).unwrap();
        grid.data[(0, 0, 0)] = -3.5;
        grid.data[(0, 0, 1)] = -9.0;
        grid.data[(1, 1, 0)] = 2.0;
        grid.data[(1, 1, 1)] = 55.0;
        let out = resample(&img, &grid).unwrap();
        assert_eq!(out[(0, 0, 0)], img[(0, 0, 0)]);
        assert_eq!(out[(1, 1, 0)], img[(3, 3, 0)]);
    }

    #[test]
    fn bilinear_grad_matches_finite_differences() {
        let hi = 6;
        let wi = 5;
        let img = rand_image(hi, wi, 2, 8);
        let flat = flatten(&img);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // keep coordinates strictly interior and off-lattice
        let grid = Array2::from_shape_fn((7, 2), |_| rng.gen::<f64>() * 1.5 - 0.75 + 0.013);
        let gout = Array2::from_shape_fn((7, 2), |_| rng.gen::<f64>() - 0.5);

        let (gimg, ggrid) =
            sample_bilinear_grad(&flat.view(), &grid.view(), hi, wi, &gout.view());

        let loss = |f: &Array2<f64>, g: &Array2<f64>| -> f64 {
            let out = sample_bilinear(&f.view(), &g.view(), hi, wi);
            (&out * &gout).sum()
        };
        let h = 1e-6;
        for idx in [(0usize, 0usize), (3, 1), (14, 0), (29, 1)] {
            let mut fp = flat.clone();
            fp[idx] += h;
            let mut fm = flat.clone();
            fm[idx] -= h;
            let fd = (loss(&fp, &grid) - loss(&fm, &grid)) / (2.0 * h);
            assert_relative_eq!(gimg[idx], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
        for idx in [(0usize, 0usize), (2, 1), (6, 0)] {
            let mut gp = grid.clone();
            gp[idx] += h;
            let mut gm = grid.clone();
            gm[idx] -= h;
            let fd = (loss(&flat, &gp) - loss(&flat, &gm)) / (2.0 * h);
            assert_relative_eq!(ggrid[idx], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn upsample_map_is_constant_preserving() {
        let map = UpsampleMap::new(4, 4, 64, 64);
        let ctl = Array2::from_elem((16, 3), 2.5f64);
        let up = map.apply(&ctl.view());
        assert_eq!(up.shape(), &[64 * 64, 3]);
        for v in up.iter() {
            assert_relative_eq!(*v, 2.5, max_relative = 1e-14);
        }
    }

    #[test]
    fn upsample_scatter_is_adjoint() {
        let map = UpsampleMap::new(3, 4, 12, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ctl = Array2::from_shape_fn((12, 2), |_| rng.gen::<f64>());
        let gout = Array2::from_shape_fn((12 * 16, 2), |_| rng.gen::<f64>());
        let up = map.apply(&ctl.view());
        let gctl = map.scatter(&gout.view());
        // <A c, g> == <c, A^T g>
        let lhs = (&up * &gout).sum();
        let rhs = (&ctl * &gctl).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }
}

//! Deterministic synthetic test scenes with natural-image statistics:
//! smooth shading, sparse sharp edges, and a high-frequency texture band.
//! Everything is closed-form so fixtures need no bundled binary assets.

use ndarray::Array3;

fn clamp01(v: f64) -> f64 {
    v.clamp(0.02, 0.98)
}

/// Piecewise-smooth scene with step edges and fine texture, (size, size, 3).
///
/// Contains: low-frequency shading, a rectangle and a disk with sharp
/// boundaries, a high-contrast vertical bar, and a sinusoidal texture band
/// at a fixed 0.23 cycles/px so high-frequency content survives any size.
pub fn test_scene(size: usize) -> Array3<f64> {
    assert!(size >= 8, "scene needs at least 8 px");
    let s = size as f64;
    let mut img = Array3::<f64>::zeros((size, size, 3));
    for i in 0..size {
        for j in 0..size {
            let y = i as f64 / s;
            let x = j as f64 / s;
            // Smooth background shading, slightly different per channel.
            let mut px = [
                0.38 + 0.22 * (2.0 * std::f64::consts::PI * (1.3 * x + 0.7 * y)).sin() * 0.8,
                0.42 + 0.20 * (2.0 * std::f64::consts::PI * (0.9 * x - 1.1 * y) + 0.5).cos(),
                0.35 + 0.24 * (2.0 * std::f64::consts::PI * (1.1 * x + 1.4 * y) + 1.1).sin(),
            ];
            // Rectangle with hard edges.
            if (0.14..0.46).contains(&y) && (0.18..0.52).contains(&x) {
                px = [0.85, 0.25, 0.2];
            }
            // Disk with a hard boundary.
            let (dy, dx) = (y - 0.66, x - 0.32);
            if (dy * dy + dx * dx).sqrt() < 0.17 {
                px = [0.15, 0.7, 0.85];
            }
            // High-contrast vertical bar.
            if (0.72..0.78).contains(&x) && (0.1..0.9).contains(&y) {
                px = [0.92, 0.9, 0.25];
            }
            // Texture band at fixed cycles-per-pixel frequency.
            if (0.55..0.92).contains(&y) && (0.45..0.68).contains(&x) {
                let t = 0.5 + 0.35 * (2.0 * std::f64::consts::PI * 0.23 * j as f64).sin();
                px = [t, 0.5 * t + 0.25, 0.9 - 0.5 * t];
            }
            for (c, v) in px.iter().enumerate() {
                img[(i, j, c)] = clamp01(*v);
            }
        }
    }
    img
}

/// Photo-like scene with heavy-tailed gradient statistics, (size, size, 3).
///
/// Mimics an outdoor photograph: a very gently shaded sky, flat building
/// faces with hard outlines, small window rectangles, and a flat ground
/// band. Nearly all gradient energy sits on a sparse set of edges, matching
/// the sparse-derivative prior of natural images.
pub fn natural_scene(size: usize) -> Array3<f64> {
    assert!(size >= 16, "scene needs at least 16 px");
    let s = size as f64;
    let mut img = Array3::<f64>::zeros((size, size, 3));
    for i in 0..size {
        for j in 0..size {
            let y = i as f64 / s;
            let x = j as f64 / s;
            // Sky: constant, like a clear overexposed sky.
            let mut px = [0.66, 0.73, 0.80];
            // Left building: tall flat face with an angled roof line.
            if x < 0.38 && y > 0.22 + 0.25 * x {
                px = [0.52, 0.34, 0.28];
            }
            // Right building: lighter face, different height.
            if x > 0.55 && y > 0.34 {
                px = [0.72, 0.68, 0.58];
            }
            // A few windows and a door: flat dark rectangles.
            let rects: [(f64, f64, f64, f64); 5] = [
                (0.10, 0.17, 0.48, 0.60),
                (0.22, 0.29, 0.48, 0.60),
                (0.10, 0.17, 0.70, 0.82),
                (0.62, 0.74, 0.50, 0.64),
                (0.80, 0.88, 0.76, 0.93),
            ];
            for (x0, x1, y0, y1) in rects {
                if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                    px = [0.12, 0.13, 0.18];
                }
            }
            // Ground: flat dark band.
            if y > 0.93 {
                px = [0.30, 0.29, 0.27];
            }
            for (c, v) in px.iter().enumerate() {
                img[(i, j, c)] = clamp01(*v);
            }
        }
    }
    img
}

/// Purely low-frequency scene for tolerance-sensitive near-identity checks.
pub fn smooth_scene(size: usize) -> Array3<f64> {
    assert!(size >= 8, "scene needs at least 8 px");
    let s = size as f64;
    let mut img = Array3::<f64>::zeros((size, size, 3));
    for i in 0..size {
        for j in 0..size {
            let y = i as f64 / s;
            let x = j as f64 / s;
            img[(i, j, 0)] = clamp01(0.5 + 0.3 * (2.0 * std::f64::consts::PI * (x + 0.5 * y)).sin());
            img[(i, j, 1)] = clamp01(0.5 + 0.3 * (2.0 * std::f64::consts::PI * (0.7 * x - y) + 0.4).cos());
            img[(i, j, 2)] = clamp01(0.45 + 0.25 * (2.0 * std::f64::consts::PI * (0.5 * x + y) + 1.0).sin());
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = test_scene(32);
        let b = test_scene(32);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let sm = smooth_scene(24);
        assert!(sm.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn test_scene_has_sharp_edges_and_texture() {
        let img = test_scene(64);
        // Horizontal gradient magnitude: the scene must contain strong edges.
        let mut max_step = 0.0f64;
        for i in 0..64 {
            for j in 0..63 {
                let d: f64 =
                    (0..3).map(|c| (img[(i, j + 1, c)] - img[(i, j, c)]).abs()).sum();
                max_step = max_step.max(d);
            }
        }
        assert!(max_step > 0.5, "no sharp edge found (max step {max_step})");
        // And most of the image should be smooth (sparse gradients).
        let mut strong = 0usize;
        for i in 0..64 {
            for j in 0..63 {
                let d: f64 =
                    (0..3).map(|c| (img[(i, j + 1, c)] - img[(i, j, c)]).abs()).sum();
                if d > 0.3 {
                    strong += 1;
                }
            }
        }
        assert!(strong < 64 * 64 / 4, "gradients are not sparse ({strong} strong steps)");
    }
}

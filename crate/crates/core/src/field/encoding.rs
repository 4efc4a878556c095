//! Positional plane-grid encoding and spherical-harmonic direction encoding.

use crate::geometry::{Aabb, Vec3};

/// Plane index → the two world axes it spans (xy, xz, yz).
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three axis-aligned feature planes sampled bilinearly and concatenated.
///
/// Grid values are stored plane-major as `[plane][v][u][channel]`, with node
/// `(0, 0)` at the box minimum and node `(R-1, R-1)` at the box maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneGridEncoder {
    pub resolution: usize,
    pub channels: usize,
    pub bounds: Aabb,
}

/// Bilinear cell lookup recorded for the backward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlaneCell {
    /// Grid index of the `(u0, v0)` corner, channel 0.
    pub base: usize,
    pub fu: f64,
    pub fv: f64,
    /// d(grid coordinate)/d(world coordinate); zero where clamped.
    pub su: f64,
    pub sv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPosition {
    pub features: Vec<f64>,
    /// The point was outside the box and got clamped to its boundary.
    pub clamped: bool,
}

impl PlaneGridEncoder {
    pub fn param_count(&self) -> usize {
        3 * self.resolution * self.resolution * self.channels
    }

    pub fn output_dim(&self) -> usize {
        3 * self.channels
    }

    pub fn node_index(&self, plane: usize, u: usize, v: usize) -> usize {
        ((plane * self.resolution + v) * self.resolution + u) * self.channels
    }

    /// World position of grid node `(u, v)` along the plane's two axes.
    pub fn node_position(&self, plane: usize, u: usize, v: usize) -> (f64, f64) {
        let (a, b) = PLANE_AXES[plane];
        let step = |axis: usize, k: usize| {
            self.bounds.min[axis]
                + (self.bounds.max[axis] - self.bounds.min[axis]) * k as f64
                    / (self.resolution - 1) as f64
        };
        (step(a, u), step(b, v))
    }

    fn grid_coord(&self, p: &Vec3, axis: usize) -> (usize, f64, f64, bool) {
        let r = self.resolution;
        let extent = self.bounds.max[axis] - self.bounds.min[axis];
        let scale = (r - 1) as f64 / extent;
        let g = (p[axis] - self.bounds.min[axis]) * scale;
        let (g, s, clamped) = if g < 0.0 {
            (0.0, 0.0, true)
        } else if g > (r - 1) as f64 {
            ((r - 1) as f64, 0.0, true)
        } else {
            (g, scale, false)
        };
        let i = (g.floor() as usize).min(r - 2);
        (i, g - i as f64, s, clamped)
    }

    /// Writes the `3C` features into `out` and records the cells. Returns
    /// whether the point was clamped.
    pub(crate) fn encode_into(
        &self,
        grid: &[f64],
        p: &Vec3,
        out: &mut [f64],
        cells: &mut [PlaneCell; 3],
    ) -> bool {
        let c = self.channels;
        let r = self.resolution;
        let mut clamped = false;
        for (plane, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let (iu, fu, su, ca) = self.grid_coord(p, a);
            let (iv, fv, sv, cb) = self.grid_coord(p, b);
            clamped |= ca | cb;
            let base = self.node_index(plane, iu, iv);
            cells[plane] = PlaneCell {
                base,
                fu,
                fv,
                su,
                sv,
            };
            let w00 = (1.0 - fu) * (1.0 - fv);
            let w10 = fu * (1.0 - fv);
            let w01 = (1.0 - fu) * fv;
            let w11 = fu * fv;
            let g00 = &grid[base..base + c];
            let g10 = &grid[base + c..base + 2 * c];
            let g01 = &grid[base + r * c..base + r * c + c];
            let g11 = &grid[base + r * c + c..base + r * c + 2 * c];
            let o = &mut out[plane * c..(plane + 1) * c];
            for k in 0..c {
                o[k] = w00 * g00[k] + w10 * g10[k] + w01 * g01[k] + w11 * g11[k];
            }
        }
        clamped
    }

    pub fn encode(&self, grid: &[f64], p: &Vec3) -> EncodedPosition {
        let mut features = vec![0.0; self.output_dim()];
        let mut cells = [PlaneCell::default(); 3];
        let clamped = self.encode_into(grid, p, &mut features, &mut cells);
        EncodedPosition { features, clamped }
    }

    /// Scatters the feature gradient into `grid_grad` and returns d/dp.
    pub(crate) fn backward(
        &self,
        grid: &[f64],
        cells: &[PlaneCell; 3],
        grad_features: &[f64],
        grid_grad: &mut [f64],
    ) -> Vec3 {
        let c = self.channels;
        let rc = self.resolution * c;
        let mut gp = Vec3::zeros();
        for (plane, cell) in cells.iter().enumerate() {
            let (a, b) = PLANE_AXES[plane];
            let PlaneCell {
                base, fu, fv, su, sv,
            } = *cell;
            let gf = &grad_features[plane * c..(plane + 1) * c];
            let w = [
                (1.0 - fu) * (1.0 - fv),
                fu * (1.0 - fv),
                (1.0 - fu) * fv,
                fu * fv,
            ];
            let offs = [base, base + c, base + rc, base + rc + c];
            for (wk, &off) in w.iter().zip(&offs) {
                for (g, &d) in grid_grad[off..off + c].iter_mut().zip(gf) {
                    *g += wk * d;
                }
            }
            if su != 0.0 || sv != 0.0 {
                let mut dfu = 0.0;
                let mut dfv = 0.0;
                for k in 0..c {
                    let g00 = grid[offs[0] + k];
                    let g10 = grid[offs[1] + k];
                    let g01 = grid[offs[2] + k];
                    let g11 = grid[offs[3] + k];
                    dfu += gf[k] * ((1.0 - fv) * (g10 - g00) + fv * (g11 - g01));
                    dfv += gf[k] * ((1.0 - fu) * (g01 - g00) + fu * (g11 - g10));
                }
                gp[a] += su * dfu;
                gp[b] += sv * dfv;
            }
        }
        gp
    }
}

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Real spherical-harmonic basis up to degree 3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionEncoder {
    pub degree: usize,
}

impl DirectionEncoder {
    pub const MAX_DEGREE: usize = 3;

    pub fn output_dim(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }

    pub fn encode_angles(&self, theta: f64, phi: f64) -> Vec<f64> {
        self.encode(&crate::geometry::direction_from_angles(theta, phi))
    }

    pub fn encode(&self, d: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(d, &mut out);
        out
    }

    pub(crate) fn encode_into(&self, d: &Vec3, out: &mut [f64]) {
        let (x, y, z) = (d.x, d.y, d.z);
        out[0] = C0;
        if self.degree >= 1 {
            out[1] = -C1 * y;
            out[2] = C1 * z;
            out[3] = -C1 * x;
        }
        if self.degree >= 2 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            out[4] = C2[0] * x * y;
            out[5] = C2[1] * y * z;
            out[6] = C2[2] * (2.0 * zz - xx - yy);
            out[7] = C2[3] * x * z;
            out[8] = C2[4] * (xx - yy);
        }
        if self.degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            out[9] = C3[0] * y * (3.0 * xx - yy);
            out[10] = C3[1] * x * y * z;
            out[11] = C3[2] * y * (4.0 * zz - xx - yy);
            out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            out[13] = C3[4] * x * (4.0 * zz - xx - yy);
            out[14] = C3[5] * z * (xx - yy);
            out[15] = C3[6] * x * (xx - 3.0 * yy);
        }
    }

    /// Gradient of `Σ_k g_k·Y_k(d)` with respect to the direction vector.
    pub(crate) fn backward(&self, d: &Vec3, g: &[f64]) -> Vec3 {
        let (x, y, z) = (d.x, d.y, d.z);
        let mut gd = Vec3::zeros();
        if self.degree >= 1 {
            gd.y += -C1 * g[1];
            gd.z += C1 * g[2];
            gd.x += -C1 * g[3];
        }
        if self.degree >= 2 {
            gd.x += C2[0] * y * g[4];
            gd.y += C2[0] * x * g[4];
            gd.y += C2[1] * z * g[5];
            gd.z += C2[1] * y * g[5];
            gd.x += C2[2] * -2.0 * x * g[6];
            gd.y += C2[2] * -2.0 * y * g[6];
            gd.z += C2[2] * 4.0 * z * g[6];
            gd.x += C2[3] * z * g[7];
            gd.z += C2[3] * x * g[7];
            gd.x += C2[4] * 2.0 * x * g[8];
            gd.y += C2[4] * -2.0 * y * g[8];
        }
        if self.degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            // y(3x² - y²)
            gd.x += C3[0] * 6.0 * x * y * g[9];
            gd.y += C3[0] * (3.0 * xx - 3.0 * yy) * g[9];
            // xyz
            gd.x += C3[1] * y * z * g[10];
            gd.y += C3[1] * x * z * g[10];
            gd.z += C3[1] * x * y * g[10];
            // y(4z² - x² - y²)
            gd.x += C3[2] * -2.0 * x * y * g[11];
            gd.y += C3[2] * (4.0 * zz - xx - 3.0 * yy) * g[11];
            gd.z += C3[2] * 8.0 * y * z * g[11];
            // z(2z² - 3x² - 3y²)
            gd.x += C3[3] * -6.0 * x * z * g[12];
            gd.y += C3[3] * -6.0 * y * z * g[12];
            gd.z += C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy) * g[12];
            // x(4z² - x² - y²)
            gd.x += C3[4] * (4.0 * zz - 3.0 * xx - yy) * g[13];
            gd.y += C3[4] * -2.0 * x * y * g[13];
            gd.z += C3[4] * 8.0 * x * z * g[13];
            // z(x² - y²)
            gd.x += C3[5] * 2.0 * x * z * g[14];
            gd.y += C3[5] * -2.0 * y * z * g[14];
            gd.z += C3[5] * (xx - yy) * g[14];
            // x(x² - 3y²)
            gd.x += C3[6] * (3.0 * xx - 3.0 * yy) * g[15];
            gd.y += C3[6] * -6.0 * x * y * g[15];
        }
        gd
    }

    /// Analytic bound `sqrt((2l+1)/4π)` on `|Y_l^m|` for basis index `k`.
    pub fn band_bound(k: usize) -> f64 {
        let l = (k as f64).sqrt().floor();
        ((2.0 * l + 1.0) / (4.0 * std::f64::consts::PI)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn encoder(r: usize, c: usize) -> PlaneGridEncoder {
        PlaneGridEncoder {
            resolution: r,
            channels: c,
            bounds: Aabb::new([-1.0, -2.0, 0.0], [1.0, 2.0, 3.0]).unwrap(),
        }
    }

    fn random_grid(enc: &PlaneGridEncoder, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..enc.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_grid_encodes_to_zero() {
        let enc = encoder(5, 3);
        let grid = vec![0.0; enc.param_count()];
        let e = enc.encode(&grid, &Vec3::new(0.3, -1.1, 2.2));
        assert!(e.features.iter().all(|&v| v == 0.0));
        assert!(!e.clamped);
    }

    #[test]
    fn grid_nodes_reproduce_stored_features() {
        let enc = encoder(5, 3);
        let grid = random_grid(&enc, 1);
        // node (u=1, v=3) on every plane: x = -0.5, y = 1.0, z = 2.25
        let p = Vec3::new(-0.5, 1.0, 2.25);
        let e = enc.encode(&grid, &p);
        let nodes = [(1, 3), (1, 3), (3, 3)];
        for (plane, &(u, v)) in nodes.iter().enumerate() {
            let idx = enc.node_index(plane, u, v);
            assert_eq!(&e.features[plane * 3..plane * 3 + 3], &grid[idx..idx + 3]);
        }
        // last node
        let e = enc.encode(&grid, &Vec3::new(1.0, 2.0, 3.0));
        let idx = enc.node_index(0, 4, 4);
        assert_eq!(&e.features[0..3], &grid[idx..idx + 3]);
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let enc = encoder(5, 2);
        let grid = random_grid(&enc, 2);
        // center of cell (u=2, v=0) in each plane
        let p = Vec3::new(0.25, -1.5, 0.375);
        let e = enc.encode(&grid, &p);
        let cells = [(2, 0), (2, 0), (0, 0)];
        for (plane, &(u, v)) in cells.iter().enumerate() {
            for ch in 0..2 {
                let mean = [(u, v), (u + 1, v), (u, v + 1), (u + 1, v + 1)]
                    .iter()
                    .map(|&(a, b)| grid[enc.node_index(plane, a, b) + ch])
                    .sum::<f64>()
                    / 4.0;
                assert!((e.features[plane * 2 + ch] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn outside_points_are_clamped_and_flagged() {
        let enc = encoder(4, 1);
        let grid = random_grid(&enc, 3);
        let inside = enc.encode(&grid, &Vec3::new(1.0, 0.2, 3.0));
        let outside = enc.encode(&grid, &Vec3::new(5.0, 0.2, 9.0));
        assert!(outside.clamped);
        assert!(!inside.clamped);
        assert_eq!(inside.features, outside.features);
    }

    #[test]
    fn encoding_backward_matches_finite_differences() {
        let enc = encoder(6, 3);
        let grid = random_grid(&enc, 4);
        let p = Vec3::new(0.13, -0.71, 1.37);
        let gf: Vec<f64> = (0..9).map(|k| (k as f64 * 0.37).sin()).collect();
        let f = |g: &[f64], p: &Vec3| {
            let e = enc.encode(g, p);
            e.features.iter().zip(&gf).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut cells = [PlaneCell::default(); 3];
        let mut feats = vec![0.0; 9];
        enc.encode_into(&grid, &p, &mut feats, &mut cells);
        let mut gg = vec![0.0; grid.len()];
        let gp = enc.backward(&grid, &cells, &gf, &mut gg);
        let h = 1e-6;
        for a in 0..3 {
            let mut pp = p;
            pp[a] += h;
            let mut pm = p;
            pm[a] -= h;
            let fd = (f(&grid, &pp) - f(&grid, &pm)) / (2.0 * h);
            assert!((fd - gp[a]).abs() < 1e-7);
        }
        for k in (0..grid.len()).step_by(7) {
            let mut gp_ = grid.clone();
            gp_[k] += h;
            let mut gm = grid.clone();
            gm[k] -= h;
            let fd = (f(&gp_, &p) - f(&gm, &p)) / (2.0 * h);
            assert!((fd - gg[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn sh_degree_zero_is_constant() {
        let enc = DirectionEncoder { degree: 0 };
        for (t, p) in [(0.0, 0.0), (1.0, 2.0), (PI, -PI)] {
            let v = enc.encode_angles(t, p);
            assert_eq!(v.len(), 1);
            assert!((v[0] - 1.0 / (2.0 * PI.sqrt())).abs() < 1e-15);
        }
    }

    #[test]
    fn sh_degree_one_at_pole() {
        let enc = DirectionEncoder { degree: 1 };
        let v = enc.encode_angles(0.0, 0.0);
        assert!((v[2] - (3.0 / (4.0 * PI)).sqrt()).abs() < 1e-15);
        assert!(v[1].abs() < 1e-15 && v[3].abs() < 1e-15);
    }

    #[test]
    fn sh_lengths_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for degree in 0..=3 {
            let enc = DirectionEncoder { degree };
            for _ in 0..500 {
                let d = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                let v = enc.encode(&d);
                assert_eq!(v.len(), (degree + 1) * (degree + 1));
                for (k, y) in v.iter().enumerate() {
                    assert!(y.abs() <= DirectionEncoder::band_bound(k) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sh_backward_matches_finite_differences() {
        let enc = DirectionEncoder { degree: 3 };
        let d = Vec3::new(0.3, -0.5, 0.8);
        let g: Vec<f64> = (0..16).map(|k| ((k + 1) as f64).cos()).collect();
        let f = |d: &Vec3| enc.encode(d).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let gd = enc.backward(&d, &g);
        let h = 1e-6;
        for a in 0..3 {
            let mut dp = d;
            dp[a] += h;
            let mut dm = d;
            dm[a] -= h;
            assert!(((f(&dp) - f(&dm)) / (2.0 * h) - gd[a]).abs() < 1e-8);
        }
    }
}

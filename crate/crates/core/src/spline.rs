//! Periodic interpolation on the Brillouin grid: cubic B-splines (d = 1, 2) and
//! quintic Hermite from values with two derivatives (d = 1).

use std::f64::consts::PI;

const PREFILTER_TERMS: i64 = 40;

/// Several scalar channels sharing one periodic grid over `[−π, π)^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSpline {
    dim: usize,
    m: usize,
    h: f64,
    channels: usize,
    coeffs: Vec<f64>,
}

/// B-spline weights and their first two derivatives in `u` for nodes −1..2.
fn bspline_weights(u: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    (
        [v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0, (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0],
        [-v * v / 2.0, (3.0 * u2 - 4.0 * u) / 2.0, (-3.0 * u2 + 2.0 * u + 1.0) / 2.0, u2 / 2.0],
        [v, 3.0 * u - 2.0, -3.0 * u + 1.0, u],
    )
}

fn prefilter_line(values: &[f64]) -> Vec<f64> {
    let m = values.len() as i64;
    let z = 3f64.sqrt() - 2.0;
    let gains: Vec<f64> = (0..=PREFILTER_TERMS).map(|k| 3f64.sqrt() * z.powi(k as i32)).collect();
    (0..m)
        .map(|j| {
            (-PREFILTER_TERMS..=PREFILTER_TERMS)
                .map(|k| gains[k.unsigned_abs() as usize] * values[(j + k).rem_euclid(m) as usize])
                .sum()
        })
        .collect()
}

impl PeriodicSpline {
    /// `channels[c]` holds node values in row-major grid order.
    pub fn new(dim: usize, nodes_per_axis: usize, channels: &[Vec<f64>]) -> Self {
        let m = nodes_per_axis;
        let len = m.pow(dim as u32);
        let mut coeffs = Vec::with_capacity(len * channels.len());
        for ch in channels {
            assert_eq!(ch.len(), len, "channel length does not match grid");
            if dim == 1 {
                coeffs.extend(prefilter_line(ch));
            } else {
                let mut rows = vec![0.0; len];
                for i0 in 0..m {
                    let f = prefilter_line(&ch[i0 * m..(i0 + 1) * m]);
                    rows[i0 * m..(i0 + 1) * m].copy_from_slice(&f);
                }
                let mut out = vec![0.0; len];
                for i1 in 0..m {
                    let col: Vec<f64> = (0..m).map(|i0| rows[i0 * m + i1]).collect();
                    for (i0, v) in prefilter_line(&col).into_iter().enumerate() {
                        out[i0 * m + i1] = v;
                    }
                }
                coeffs.extend(out);
            }
        }
        Self { dim, m, h: 2.0 * PI / m as f64, channels: channels.len(), coeffs }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn locate(&self, x: f64) -> (i64, f64) {
        let s = (x + PI) / self.h;
        let j = s.floor();
        (j as i64, s - j)
    }

    fn coeff(&self, channel: usize, i0: i64, i1: i64) -> f64 {
        let m = self.m as i64;
        let len = self.m.pow(self.dim as u32);
        let r0 = i0.rem_euclid(m) as usize;
        let idx = if self.dim == 1 { r0 } else { r0 * self.m + i1.rem_euclid(m) as usize };
        self.coeffs[channel * len + idx]
    }

    /// Values of every channel at `xi`.
    pub fn eval(&self, xi: &[f64], out: &mut [f64]) {
        let (j0, u0) = self.locate(xi[0]);
        let (w0, _, _) = bspline_weights(u0);
        if self.dim == 1 {
            for (c, o) in out.iter_mut().enumerate().take(self.channels) {
                *o = (0..4).map(|a| w0[a] * self.coeff(c, j0 + a as i64 - 1, 0)).sum();
            }
        } else {
            let (j1, u1) = self.locate(xi[1]);
            let (w1, _, _) = bspline_weights(u1);
            for (c, o) in out.iter_mut().enumerate().take(self.channels) {
                let mut acc = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        acc += w0[a] * w1[b] * self.coeff(c, j0 + a as i64 - 1, j1 + b as i64 - 1);
                    }
                }
                *o = acc;
            }
        }
    }

    /// Value, gradient and Hessian (row-major `d×d`) of one channel.
    pub fn eval_derivatives(&self, channel: usize, xi: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let inv = 1.0 / self.h;
        let (j0, u0) = self.locate(xi[0]);
        let (w0, d0, s0) = bspline_weights(u0);
        if self.dim == 1 {
            let mut v = 0.0;
            let mut g = 0.0;
            let mut hh = 0.0;
            for a in 0..4 {
                let c = self.coeff(channel, j0 + a as i64 - 1, 0);
                v += w0[a] * c;
                g += d0[a] * c;
                hh += s0[a] * c;
            }
            return (v, vec![g * inv], vec![hh * inv * inv]);
        }
        let (j1, u1) = self.locate(xi[1]);
        let (w1, d1, s1) = bspline_weights(u1);
        let mut v = 0.0;
        let mut g = [0.0; 2];
        let mut hs = [0.0; 4];
        for a in 0..4 {
            for b in 0..4 {
                let c = self.coeff(channel, j0 + a as i64 - 1, j1 + b as i64 - 1);
                v += w0[a] * w1[b] * c;
                g[0] += d0[a] * w1[b] * c;
                g[1] += w0[a] * d1[b] * c;
                hs[0] += s0[a] * w1[b] * c;
                hs[1] += d0[a] * d1[b] * c;
                hs[3] += w0[a] * s1[b] * c;
            }
        }
        hs[2] = hs[1];
        (v, vec![g[0] * inv, g[1] * inv], hs.iter().map(|x| x * inv * inv).collect())
    }
}

/// Periodic quintic Hermite interpolant of `f` on `[−π, π)` from node values of `f`, `f'`, `f''`.
///
/// The returned derivatives are those of the interpolant itself, so a flow driven by
/// them conserves the interpolated function exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteLine {
    h: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
    curvatures: Vec<f64>,
}

impl HermiteLine {
    pub fn new(values: Vec<f64>, slopes: Vec<f64>, curvatures: Vec<f64>) -> Self {
        assert!(values.len() == slopes.len() && values.len() == curvatures.len(), "node arrays differ in length");
        Self { h: 2.0 * PI / values.len() as f64, values, slopes, curvatures }
    }

    /// `(f, f', f'')` at `x`.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let m = self.values.len() as i64;
        let s = (x + PI) / self.h;
        let j = s.floor();
        let t = s - j;
        let i0 = (j as i64).rem_euclid(m) as usize;
        let i1 = (j as i64 + 1).rem_euclid(m) as usize;
        let h = self.h;
        let c = [
            self.values[i0],
            self.slopes[i0] * h,
            self.curvatures[i0] * h * h,
            self.curvatures[i1] * h * h,
            self.slopes[i1] * h,
            self.values[i1],
        ];
        let (t2, t3) = (t * t, t * t * t);
        let (t4, t5) = (t3 * t, t3 * t2);
        let w = [
            1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5,
            t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5,
            0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5,
            0.5 * t3 - t4 + 0.5 * t5,
            -4.0 * t3 + 7.0 * t4 - 3.0 * t5,
            10.0 * t3 - 15.0 * t4 + 6.0 * t5,
        ];
        let dw = [
            -30.0 * t2 + 60.0 * t3 - 30.0 * t4,
            1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4,
            t - 4.5 * t2 + 6.0 * t3 - 2.5 * t4,
            1.5 * t2 - 4.0 * t3 + 2.5 * t4,
            -12.0 * t2 + 28.0 * t3 - 15.0 * t4,
            30.0 * t2 - 60.0 * t3 + 30.0 * t4,
        ];
        let sw = [
            -60.0 * t + 180.0 * t2 - 120.0 * t3,
            -36.0 * t + 96.0 * t2 - 60.0 * t3,
            1.0 - 9.0 * t + 18.0 * t2 - 10.0 * t3,
            3.0 * t - 12.0 * t2 + 10.0 * t3,
            -24.0 * t + 84.0 * t2 - 60.0 * t3,
            60.0 * t - 180.0 * t2 + 120.0 * t3,
        ];
        let dot = |w: &[f64; 6]| -> f64 { w.iter().zip(&c).map(|(a, b)| a * b).sum() };
        (dot(&w), dot(&dw) / h, dot(&sw) / (h * h))
    }
}

//! Lattice potential, Brillouin-zone grid and plane-wave basis.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{FgaError, Result};
use crate::C64;

/// Lattice potential `V(x) = Σ V̂_k e^{2πi k·x}` with finitely many coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicPotential {
    dim: usize,
    support: usize,
    coeffs: BTreeMap<Vec<i32>, C64>,
}

const HERMITIAN_TOL: f64 = 1e-14;

impl PeriodicPotential {
    /// Builds a potential from `(k, V̂_k)` pairs. Missing conjugate partners are an error.
    pub fn new(dim: usize, entries: impl IntoIterator<Item = (Vec<i32>, C64)>) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(FgaError::InvalidInput(format!("dimension {dim} not in {{1, 2}}")));
        }
        let mut coeffs = BTreeMap::new();
        for (k, v) in entries {
            if k.len() != dim {
                return Err(FgaError::InvalidInput(format!(
                    "reciprocal vector {k:?} has wrong length for d={dim}"
                )));
            }
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(FgaError::InvalidInput(format!("non-finite coefficient at {k:?}")));
            }
            *coeffs.entry(k).or_insert(C64::new(0.0, 0.0)) += v;
        }
        coeffs.retain(|_, v: &mut C64| v.norm() > 0.0);
        let scale = coeffs.values().map(|v| v.norm()).fold(1.0, f64::max);
        for (k, v) in &coeffs {
            let neg: Vec<i32> = k.iter().map(|x| -x).collect();
            let partner = coeffs.get(&neg).copied().unwrap_or_default();
            if (partner - v.conj()).norm() > HERMITIAN_TOL * scale {
                return Err(FgaError::InvalidInput(format!(
                    "potential is not real: V̂{neg:?} != conj(V̂{k:?})"
                )));
            }
        }
        let support = coeffs
            .keys()
            .flat_map(|k| k.iter().map(|x| x.unsigned_abs() as usize))
            .max()
            .unwrap_or(0);
        Ok(Self { dim, support, coeffs })
    }

    pub fn zero(dim: usize) -> Self {
        Self { dim, support: 0, coeffs: BTreeMap::new() }
    }

    /// `V(x) = amplitude · Σ_axes cos(2π x_axis)`.
    pub fn cosine(dim: usize, amplitude: f64) -> Self {
        let mut entries = Vec::new();
        for axis in 0..dim {
            for s in [-1, 1] {
                let mut k = vec![0; dim];
                k[axis] = s;
                entries.push((k, C64::new(0.5 * amplitude, 0.0)));
            }
        }
        Self::new(dim, entries).expect("cosine potential is Hermitian")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest `|k|∞` carrying a nonzero coefficient.
    pub fn support(&self) -> usize {
        self.support
    }

    pub fn coefficients(&self) -> &BTreeMap<Vec<i32>, C64> {
        &self.coeffs
    }

    pub fn coefficient(&self, k: &[i32]) -> C64 {
        self.coeffs.get(k).copied().unwrap_or_default()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Point value of V at a fast-variable position (period 1 per axis).
    pub fn value(&self, y: &[f64]) -> f64 {
        let mut acc = C64::new(0.0, 0.0);
        for (k, v) in &self.coeffs {
            let phase: f64 = k.iter().zip(y).map(|(&ki, &yi)| ki as f64 * yi).sum();
            acc += v * C64::from_polar(1.0, 2.0 * PI * phase);
        }
        acc.re
    }

    /// Dense table of `V̂_k` for `|k|∞ ≤ 2K`, laid out like [`PlaneWaveBasis`] with cutoff 2K.
    pub(crate) fn dense_difference_table(&self, cutoff: usize) -> Vec<C64> {
        let span = 4 * cutoff + 1;
        let len = span.pow(self.dim as u32);
        let mut table = vec![C64::new(0.0, 0.0); len];
        let off = 2 * cutoff as i32;
        for (k, v) in &self.coeffs {
            if k.iter().any(|x| x.unsigned_abs() as usize > 2 * cutoff) {
                continue;
            }
            let mut idx = 0usize;
            for &ki in k {
                idx = idx * span + (ki + off) as usize;
            }
            table[idx] = *v;
        }
        table
    }

    /// Parses the text format: `d`, `K_V`, then one `k… re im` line per coefficient.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let bad = |msg: String| FgaError::Format(msg);
        let dim: usize = lines
            .next()
            .ok_or_else(|| bad("missing dimension line".into()))?
            .parse()
            .map_err(|e| bad(format!("dimension: {e}")))?;
        let declared: usize = lines
            .next()
            .ok_or_else(|| bad("missing K_V line".into()))?
            .parse()
            .map_err(|e| bad(format!("K_V: {e}")))?;
        let mut entries = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != dim + 2 {
                return Err(bad(format!("expected {} fields in '{line}'", dim + 2)));
            }
            let k = fields[..dim]
                .iter()
                .map(|s| s.parse::<i32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("reciprocal vector in '{line}': {e}")))?;
            let re: f64 = fields[dim].parse().map_err(|e| bad(format!("'{line}': {e}")))?;
            let im: f64 = fields[dim + 1].parse().map_err(|e| bad(format!("'{line}': {e}")))?;
            entries.push((k, C64::new(re, im)));
        }
        let pot = Self::new(dim, entries)?;
        if pot.support > declared {
            return Err(FgaError::InvalidInput(format!(
                "coefficient support {} exceeds declared K_V={declared}",
                pot.support
            )));
        }
        Ok(pot)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n{}\n", self.dim, self.support);
        for (k, v) in &self.coeffs {
            for ki in k {
                let _ = write!(out, "{ki} ");
            }
            let _ = writeln!(out, "{:e} {:e}", v.re, v.im);
        }
        out
    }
}

/// Uniform grid on the Brillouin zone `[−π, π)^d`, row-major node order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrillouinGrid {
    pub dim: usize,
    pub nodes_per_axis: usize,
}

impl BrillouinGrid {
    pub fn new(dim: usize, nodes_per_axis: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(FgaError::InvalidInput(format!("dimension {dim} not in {{1, 2}}")));
        }
        if nodes_per_axis < 4 {
            return Err(FgaError::InvalidInput("Brillouin grid needs at least 4 nodes per axis".into()));
        }
        Ok(Self { dim, nodes_per_axis })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.nodes_per_axis as f64
    }

    pub fn len(&self) -> usize {
        self.nodes_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -PI + i as f64 * self.spacing()
    }

    /// Per-axis indices of a flat node index.
    pub fn multi_index(&self, flat: usize) -> [usize; 2] {
        let m = self.nodes_per_axis;
        if self.dim == 1 {
            [flat, 0]
        } else {
            [flat / m, flat % m]
        }
    }

    pub fn flat_index(&self, idx: [usize; 2]) -> usize {
        if self.dim == 1 {
            idx[0]
        } else {
            idx[0] * self.nodes_per_axis + idx[1]
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi_index(flat);
        (0..self.dim).map(|a| self.coordinate(idx[a])).collect()
    }
}

/// Wraps a momentum into `[−π, π)` and returns the winding number.
pub fn wrap_momentum(p: f64) -> (f64, i64) {
    let m = ((p + PI) / (2.0 * PI)).floor();
    let mut w = p - 2.0 * PI * m;
    let mut m = m as i64;
    if w >= PI {
        w -= 2.0 * PI;
        m += 1;
    }
    (w, m)
}

/// Plane waves `e^{2πi k·x}` with `|k|∞ ≤ K`, row-major in `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaneWaveBasis {
    pub dim: usize,
    pub cutoff: usize,
    vectors: Vec<[i32; 2]>,
}

impl PlaneWaveBasis {
    pub fn new(dim: usize, cutoff: usize) -> Self {
        let kk = cutoff as i32;
        let mut vectors = Vec::new();
        if dim == 1 {
            for k in -kk..=kk {
                vectors.push([k, 0]);
            }
        } else {
            for k0 in -kk..=kk {
                for k1 in -kk..=kk {
                    vectors.push([k0, k1]);
                }
            }
        }
        Self { dim, cutoff, vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[[i32; 2]] {
        &self.vectors
    }

    pub fn index_of(&self, k: [i32; 2]) -> Option<usize> {
        let kk = self.cutoff as i32;
        let span = 2 * self.cutoff + 1;
        if k[0].abs() > kk || (self.dim == 2 && k[1].abs() > kk) {
            return None;
        }
        let i0 = (k[0] + kk) as usize;
        if self.dim == 1 {
            Some(i0)
        } else {
            Some(i0 * span + (k[1] + kk) as usize)
        }
    }

    /// Applies the lattice shift `(T c)_k = c_{k + s·e_axis}` `times` times
    /// (negative `times` shifts the other way); coefficients pushed past the cutoff are lost.
    pub fn shift(&self, coeffs: &[C64], axis: usize, times: i64) -> Vec<C64> {
        if times == 0 {
            return coeffs.to_vec();
        }
        let mut out = vec![C64::new(0.0, 0.0); coeffs.len()];
        for (i, k) in self.vectors.iter().enumerate() {
            let mut src = *k;
            src[axis] += times as i32;
            if let Some(j) = self.index_of(src) {
                out[i] = coeffs[j];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_hermitian_coefficients() {
        let r = PeriodicPotential::new(1, vec![(vec![1], C64::new(0.5, 0.0))]);
        assert!(matches!(r, Err(FgaError::InvalidInput(_))));
    }

    #[test]
    fn cosine_has_unit_support_and_point_values() {
        let v = PeriodicPotential::cosine(1, 1.0);
        assert_eq!(v.support(), 1);
        assert!((v.value(&[0.0]) - 1.0).abs() < 1e-15);
        assert!((v.value(&[0.5]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip() {
        let v = PeriodicPotential::cosine(2, 0.7);
        let back = PeriodicPotential::parse(&v.to_text()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn parse_rejects_support_beyond_declared() {
        let text = "1\n1\n2 0.5 0\n-2 0.5 0\n";
        assert!(PeriodicPotential::parse(text).is_err());
    }

    #[test]
    fn grid_has_no_duplicate_endpoint() {
        let g = BrillouinGrid::new(1, 8).unwrap();
        assert_eq!(g.coordinate(0), -PI);
        assert!(g.coordinate(7) < PI);
        assert!((g.coordinate(7) + g.spacing() - PI).abs() < 1e-14);
    }

    #[test]
    fn wrap_momentum_lands_in_zone() {
        for p in [-7.0, -PI, 0.3, PI, 9.5] {
            let (w, m) = wrap_momentum(p);
            assert!((-PI..PI).contains(&w));
            assert!((w + 2.0 * PI * m as f64 - p).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_moves_coefficients() {
        let b = PlaneWaveBasis::new(1, 2);
        let c: Vec<C64> = (0..5).map(|i| C64::new(i as f64, 0.0)).collect();
        let s = b.shift(&c, 0, 1);
        assert_eq!(s[0], C64::new(1.0, 0.0));
        assert_eq!(s[4], C64::new(0.0, 0.0));
    }
}

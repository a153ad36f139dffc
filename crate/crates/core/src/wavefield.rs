//! Complex wave fields on a uniform periodic grid and their binary/CSV formats.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{FgaError, Result};
use crate::C64;

const MAGIC: &[u8; 6] = b"FGAWF1";

/// Samples of `ψ` on the torus `[0, L)^d`, row-major, no duplicated endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveField {
    pub dim: usize,
    pub eps: f64,
    pub length: f64,
    pub points: usize,
    pub time: f64,
    pub data: Vec<C64>,
}

/// Number of lattice cells `L/ε` when it is an integer.
pub fn cell_count(length: f64, eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(FgaError::InvalidInput(format!("eps={eps} outside (0, 1]")));
    }
    if !(length > 0.0 && length.is_finite()) {
        return Err(FgaError::InvalidInput(format!("domain length {length} must be positive")));
    }
    let r = length / eps;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 * r.max(1.0) {
        return Err(FgaError::InvalidInput(format!("L/eps = {r} is not a positive integer")));
    }
    Ok(n as usize)
}

impl WaveField {
    pub fn zeros(dim: usize, eps: f64, length: f64, points: usize, time: f64) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(FgaError::InvalidInput(format!("dimension {dim} not in {{1, 2}}")));
        }
        if points == 0 {
            return Err(FgaError::InvalidInput("grid needs at least one point".into()));
        }
        cell_count(length, eps)?;
        Ok(Self { dim, eps, length, points, time, data: vec![C64::new(0.0, 0.0); points.pow(dim as u32)] })
    }

    pub fn from_fn(
        dim: usize,
        eps: f64,
        length: f64,
        points: usize,
        time: f64,
        f: impl Fn(&[f64]) -> C64,
    ) -> Result<Self> {
        let mut w = Self::zeros(dim, eps, length, points, time)?;
        for i in 0..w.data.len() {
            let x = w.position(i);
            w.data[i] = f(&x);
        }
        Ok(w)
    }

    /// Same grid and tags, new samples.
    pub fn with_data(&self, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self { data, ..self.clone() }
    }

    pub fn zeros_like(&self) -> Self {
        self.with_data(vec![C64::new(0.0, 0.0); self.data.len()])
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.points as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cells(&self) -> usize {
        cell_count(self.length, self.eps).expect("validated at construction")
    }

    /// Grid points per lattice period `ε` (may be fractional).
    pub fn points_per_period(&self) -> f64 {
        self.points as f64 * self.eps / self.length
    }

    pub fn multi_index(&self, flat: usize) -> [usize; 2] {
        if self.dim == 1 {
            [flat, 0]
        } else {
            [flat / self.points, flat % self.points]
        }
    }

    pub fn position(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi_index(flat);
        (0..self.dim).map(|a| idx[a] as f64 * self.spacing()).collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.cell_volume()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `⟨self, other⟩ = ∫ conj(self)·other`.
    pub fn inner(&self, other: &Self) -> C64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum::<C64>() * self.cell_volume()
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.points == other.points
            && (self.length - other.length).abs() <= 1e-12 * self.length
            && (self.eps - other.eps).abs() <= 1e-12 * self.eps
    }

    pub fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(FgaError::GridMismatch(format!(
                "(d={}, N={}, L={}, eps={}) vs (d={}, N={}, L={}, eps={})",
                self.dim, self.points, self.length, self.eps, other.dim, other.points, other.length, other.eps
            )))
        }
    }

    pub fn scaled(&self, s: C64) -> Self {
        self.with_data(self.data.iter().map(|z| z * s).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_grid(other)?;
        Ok(self.with_data(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_grid(other)?;
        Ok(self.with_data(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect()))
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for _ in 0..self.dim {
            w.write_all(&(self.points as u32).to_le_bytes())?;
        }
        w.write_all(&self.length.to_le_bytes())?;
        w.write_all(&self.eps.to_le_bytes())?;
        w.write_all(&self.time.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 16);
        for z in &self.data {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FgaError::Format("not an FGAWF1 wave field".into()));
        }
        let mut u4 = [0u8; 4];
        let mut f8 = [0u8; 8];
        r.read_exact(&mut u4)?;
        let dim = u32::from_le_bytes(u4) as usize;
        if dim != 1 && dim != 2 {
            return Err(FgaError::Format(format!("unsupported dimension {dim}")));
        }
        let mut points = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut u4)?;
            points.push(u32::from_le_bytes(u4) as usize);
        }
        if points.iter().any(|&p| p != points[0]) {
            return Err(FgaError::Format("anisotropic grids are not supported".into()));
        }
        let mut next = || -> Result<f64> {
            r.read_exact(&mut f8)?;
            Ok(f64::from_le_bytes(f8))
        };
        let length = next()?;
        let eps = next()?;
        let time = next()?;
        let mut field = Self::zeros(dim, eps, length, points[0], time)?;
        let mut buf = vec![0u8; field.data.len() * 16];
        r.read_exact(&mut buf)?;
        for (i, z) in field.data.iter_mut().enumerate() {
            let re = f64::from_le_bytes(buf[16 * i..16 * i + 8].try_into().expect("8 bytes"));
            let im = f64::from_le_bytes(buf[16 * i + 8..16 * i + 16].try_into().expect("8 bytes"));
            *z = C64::new(re, im);
        }
        Ok(field)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_binary(std::io::BufReader::new(f))
    }

    /// CSV of `x…, |ψ|²` for plotting.
    pub fn intensity_csv(&self) -> String {
        let mut out = String::from(if self.dim == 1 { "x,density\n" } else { "x,y,density\n" });
        for (i, z) in self.data.iter().enumerate() {
            for x in self.position(i) {
                let _ = write!(out, "{x:.12e},");
            }
            let _ = writeln!(out, "{:.12e}", z.norm_sqr());
        }
        out
    }
}

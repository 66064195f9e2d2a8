//! Uniform Cartesian grids, masked scalar fields and their file formats.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when deciding whether a node lies inside a ball.
pub const INSIDE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    /// Nodes per axis.
    pub n: Vec<usize>,
    /// Coordinates of the first node.
    pub lo: Vec<f64>,
    pub h: f64,
}

impl Grid {
    pub fn new(n: Vec<usize>, lo: Vec<f64>, h: f64) -> Result<Self> {
        let dim = n.len();
        if dim == 0 || dim > 3 || lo.len() != dim {
            return Err(Error::InvalidInput(format!("grid dimension must be 1, 2 or 3 (got {dim})")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidInput(format!("grid spacing must be positive, got {h}")));
        }
        if n.iter().any(|&k| k < 3) {
            return Err(Error::Resolution("every axis needs at least 3 nodes".into()));
        }
        Ok(Grid { dim, n, lo, h })
    }

    /// Grid on `[−1,1]ᵈ` (symmetric about 0) with spacing `h`.
    pub fn cube(dim: usize, h: f64) -> Result<Self> {
        Self::centered_cube(dim, 1.0, h)
    }

    /// Grid on `[−half,half]ᵈ` with a node at the origin.
    pub fn centered_cube(dim: usize, half: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidInput(format!("grid spacing must be positive, got {h}")));
        }
        let k = (half / h + 1e-9).floor() as usize;
        let n = 2 * k + 1;
        let lo = -(k as f64) * h;
        Self::new(vec![n; dim], vec![lo; dim], h)
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major strides, axis 0 slowest.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim];
        for k in (0..self.dim.saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.n[k + 1];
        }
        s
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut m = vec![0; self.dim];
        for k in (0..self.dim).rev() {
            m[k] = i % self.n[k];
            i /= self.n[k];
        }
        m
    }

    pub fn index(&self, m: &[usize]) -> usize {
        m.iter().zip(&self.n).fold(0, |acc, (mi, ni)| acc * ni + mi)
    }

    pub fn coord(&self, i: usize) -> Vec<f64> {
        self.multi_index(i).iter().zip(&self.lo).map(|(&m, lo)| lo + m as f64 * self.h).collect()
    }

    /// Node reached from `i` by an integer offset, if it exists.
    pub fn offset(&self, i: usize, off: &[i64]) -> Option<usize> {
        let m = self.multi_index(i);
        let mut out = 0usize;
        for k in 0..self.dim {
            let v = m[k] as i64 + off[k];
            if v < 0 || v >= self.n[k] as i64 {
                return None;
            }
            out = out * self.n[k] + v as usize;
        }
        Some(out)
    }

    pub fn step(&self, i: usize, axis: usize, delta: i64) -> Option<usize> {
        let mut off = vec![0i64; self.dim];
        off[axis] = delta;
        self.offset(i, &off)
    }

    /// Lower-corner cell index and local coordinates in `[0,1]` for `x`.
    pub fn locate(&self, x: &[f64]) -> Option<(Vec<usize>, Vec<f64>)> {
        let mut cell = Vec::with_capacity(self.dim);
        let mut t = Vec::with_capacity(self.dim);
        for k in 0..self.dim {
            let s = (x[k] - self.lo[k]) / self.h;
            let tol = 1e-9;
            if s < -tol || s > (self.n[k] - 1) as f64 + tol {
                return None;
            }
            let c = (s.floor().max(0.0) as usize).min(self.n[k] - 2);
            cell.push(c);
            t.push((s - c as f64).clamp(0.0, 1.0));
        }
        Some((cell, t))
    }

    /// All offsets in `{−1,0,1}ᵈ` except the zero offset.
    pub fn neighbor_offsets(&self) -> Vec<Vec<i64>> {
        lattice_offsets(self.dim, 1)
    }
}

/// All nonzero integer vectors with entries in `[−w, w]`.
pub fn lattice_offsets(dim: usize, w: i64) -> Vec<Vec<i64>> {
    let side = (2 * w + 1) as usize;
    let total = side.pow(dim as u32);
    let mut out = Vec::with_capacity(total - 1);
    for code in 0..total {
        let mut c = code;
        let mut v = vec![0i64; dim];
        for entry in v.iter_mut() {
            *entry = (c % side) as i64 - w;
            c /= side;
        }
        if v.iter().any(|&e| e != 0) {
            out.push(v);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Interior,
    Dirichlet,
    Exterior,
    /// Flat boundary node carrying an oblique derivative condition.
    Oblique,
}

impl NodeKind {
    fn code(self) -> u8 {
        match self {
            NodeKind::Interior => 0,
            NodeKind::Dirichlet => 1,
            NodeKind::Exterior => 2,
            NodeKind::Oblique => 3,
        }
    }
}

/// Ball mask: nodes inside the closed ball whose full 3ᵈ neighborhood is also
/// inside are interior, the remaining inside nodes are Dirichlet nodes.
pub fn ball_mask(grid: &Grid, center: &[f64], radius: f64) -> Vec<NodeKind> {
    let inside: Vec<bool> = (0..grid.len())
        .map(|i| {
            let x = grid.coord(i);
            let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
            r2.sqrt() <= radius * (1.0 + INSIDE_TOL)
        })
        .collect();
    let offs = grid.neighbor_offsets();
    (0..grid.len())
        .map(|i| {
            if !inside[i] {
                NodeKind::Exterior
            } else if offs.iter().all(|o| grid.offset(i, o).is_some_and(|j| inside[j])) {
                NodeKind::Interior
            } else {
                NodeKind::Dirichlet
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub mask: Vec<NodeKind>,
}

impl GridField {
    pub fn new(grid: Grid, mask: Vec<NodeKind>) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::GridMismatch("mask length differs from node count".into()));
        }
        let values = vec![0.0; grid.len()];
        Ok(GridField { grid, values, mask })
    }

    /// Zero field on the unit ball inside `[−1,1]ᵈ`.
    pub fn unit_ball(dim: usize, h: f64) -> Result<Self> {
        let grid = Grid::cube(dim, h)?;
        let mask = ball_mask(&grid, &vec![0.0; dim], 1.0);
        Self::new(grid, mask)
    }

    pub fn from_fn(grid: Grid, mask: Vec<NodeKind>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut out = Self::new(grid, mask)?;
        out.fill(f);
        Ok(out)
    }

    /// Assigns `f` at every non-exterior node.
    pub fn fill(&mut self, f: impl Fn(&[f64]) -> f64) {
        for i in 0..self.grid.len() {
            if self.mask[i] != NodeKind::Exterior {
                self.values[i] = f(&self.grid.coord(i));
            }
        }
    }

    /// Assigns the boundary datum at Dirichlet nodes.
    pub fn set_dirichlet(&mut self, phi: impl Fn(&[f64]) -> f64) {
        for i in 0..self.grid.len() {
            if self.mask[i] == NodeKind::Dirichlet {
                self.values[i] = phi(&self.grid.coord(i));
            }
        }
    }

    pub fn h(&self) -> f64 {
        self.grid.h
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn coord(&self, i: usize) -> Vec<f64> {
        self.grid.coord(i)
    }

    pub fn nodes(&self, kind: NodeKind) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.mask[i] == kind)
    }

    pub fn check_same_grid(&self, other: &GridField) -> Result<()> {
        if self.grid != other.grid || self.mask != other.mask {
            return Err(Error::GridMismatch("fields live on different grids or masks".into()));
        }
        Ok(())
    }

    /// Node-wise minimum.
    pub fn min_with(&self, other: &GridField) -> Result<GridField> {
        self.check_same_grid(other)?;
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a = a.min(*b);
        }
        Ok(out)
    }

    /// Max over non-exterior nodes of `|self − other|`.
    pub fn sup_diff(&self, other: &GridField) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok((0..self.len())
            .filter(|&i| self.mask[i] != NodeKind::Exterior)
            .map(|i| (self.values[i] - other.values[i]).abs())
            .fold(0.0, f64::max))
    }

    /// Max over non-exterior nodes of `|u − f(x)|`.
    pub fn sup_error(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.len())
            .filter(|&i| self.mask[i] != NodeKind::Exterior)
            .map(|i| (self.values[i] - f(&self.coord(i))).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.len())
            .filter(|&i| self.mask[i] != NodeKind::Exterior)
            .map(|i| self.values[i].abs())
            .fold(0.0, f64::max)
    }

    /// Multilinear interpolation; `None` outside the box or when a corner of
    /// the containing cell is exterior.
    pub fn interpolate(&self, x: &[f64]) -> Option<f64> {
        let (cell, t) = self.grid.locate(x)?;
        let d = self.dim();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut m = cell.clone();
            let mut w = 1.0;
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    m[k] += 1;
                    w *= t[k];
                } else {
                    w *= 1.0 - t[k];
                }
            }
            if w == 0.0 {
                continue;
            }
            let i = self.grid.index(&m);
            if self.mask[i] == NodeKind::Exterior {
                return None;
            }
            acc += w * self.values[i];
        }
        Some(acc)
    }

    /// Writes `path` (binary block), `path.txt` (sidecar header) and `path.csv`.
    pub fn export(&self, path: &Path) -> Result<Vec<PathBuf>> {
        self.write_fbxf(path)?;
        let side = sidecar_path(path);
        fs::write(&side, self.sidecar_text())?;
        let csv = path.with_extension("csv");
        self.write_csv(&csv)?;
        Ok(vec![path.to_path_buf(), side, csv])
    }

    /// Binary block: magic `FBXF`, u32 dim, u32 nodes per axis, f64 h, f64
    /// node values in row-major order (little endian).
    pub fn write_fbxf(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.len());
        buf.extend_from_slice(b"FBXF");
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &n in &self.grid.n {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.h().to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn sidecar_text(&self) -> String {
        let count = |k: NodeKind| self.mask.iter().filter(|&&m| m == k).count();
        let mut s = String::new();
        let _ = writeln!(s, "format = FBXF");
        let _ = writeln!(s, "dim = {}", self.dim());
        let _ = writeln!(s, "nodes = {}", join(&self.grid.n));
        let _ = writeln!(s, "h = {}", self.h());
        let _ = writeln!(s, "lo = {}", join(&self.grid.lo));
        let _ = writeln!(s, "interior = {}", count(NodeKind::Interior));
        let _ = writeln!(s, "dirichlet = {}", count(NodeKind::Dirichlet));
        let _ = writeln!(s, "exterior = {}", count(NodeKind::Exterior));
        let mask: String = self.mask.iter().map(|m| char::from(b'0' + m.code())).collect();
        let _ = writeln!(s, "mask = {mask}");
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let cols: Vec<String> = (0..self.dim()).map(|k| format!("x{k}")).collect();
        let _ = writeln!(s, "{},value,mask", cols.join(","));
        for i in 0..self.len() {
            let x = self.coord(i);
            let kind = match self.mask[i] {
                NodeKind::Interior => "interior",
                NodeKind::Dirichlet => "dirichlet",
                NodeKind::Exterior => "exterior",
                NodeKind::Oblique => "oblique",
            };
            let _ = writeln!(s, "{},{},{}", join(&x), self.values[i], kind);
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// Reads a binary block; grid origin and mask come from the sidecar when
    /// present, otherwise the grid is centered at 0 with the unit-ball mask.
    pub fn read_fbxf(path: &Path) -> Result<GridField> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::InvalidInput(format!("{}: {m}", path.display()));
        if bytes.len() < 8 || &bytes[0..4] != b"FBXF" {
            return Err(bad("missing FBXF magic"));
        }
        let u32_at = |o: usize| -> Result<u32> {
            bytes.get(o..o + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).ok_or_else(|| bad("truncated header"))
        };
        let f64_at = |o: usize| -> Result<f64> {
            bytes.get(o..o + 8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).ok_or_else(|| bad("truncated data"))
        };
        let dim = u32_at(4)? as usize;
        if dim == 0 || dim > 3 {
            return Err(bad("dimension must be 1, 2 or 3"));
        }
        let mut n = Vec::with_capacity(dim);
        for k in 0..dim {
            n.push(u32_at(8 + 4 * k)? as usize);
        }
        let mut off = 8 + 4 * dim;
        let h = f64_at(off)?;
        off += 8;
        let total: usize = n.iter().product();
        if bytes.len() != off + 8 * total {
            return Err(bad("value block length does not match node counts"));
        }
        let values: Vec<f64> = (0..total).map(|i| f64_at(off + 8 * i)).collect::<Result<_>>()?;

        let side = fs::read_to_string(sidecar_path(path)).ok();
        let lookup = |key: &str| -> Option<String> {
            side.as_ref()?.lines().find_map(|l| {
                let (k, v) = l.split_once('=')?;
                (k.trim() == key).then(|| v.trim().to_string())
            })
        };
        let lo = match lookup("lo") {
            Some(s) => s.split(',').map(|t| t.trim().parse::<f64>().map_err(|_| bad("bad lo in sidecar"))).collect::<Result<Vec<_>>>()?,
            None => n.iter().map(|&k| -((k - 1) as f64) * h / 2.0).collect(),
        };
        let grid = Grid::new(n, lo, h)?;
        let mask = match lookup("mask") {
            Some(s) if s.len() == total => s
                .bytes()
                .map(|c| match c {
                    b'0' => Ok(NodeKind::Interior),
                    b'1' => Ok(NodeKind::Dirichlet),
                    b'2' => Ok(NodeKind::Exterior),
                    b'3' => Ok(NodeKind::Oblique),
                    _ => Err(bad("bad mask character in sidecar")),
                })
                .collect::<Result<Vec<_>>>()?,
            _ => ball_mask(&grid, &vec![0.0; dim], 1.0),
        };
        Ok(GridField { grid, values, mask })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".txt");
    PathBuf::from(s)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let g = Grid::new(vec![4, 5, 3], vec![0.0; 3], 0.1).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index(&g.multi_index(i)), i);
        }
        assert_eq!(g.strides(), vec![15, 3, 1]);
    }

    #[test]
    fn cube_has_origin_node() {
        let g = Grid::cube(2, 1.0 / 64.0).unwrap();
        assert_eq!(g.n, vec![129, 129]);
        let mid = g.index(&[64, 64]);
        assert!(g.coord(mid).iter().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn one_dimensional_ball_mask() {
        let f = GridField::unit_ball(1, 0.25).unwrap();
        use NodeKind::*;
        assert_eq!(f.mask, vec![Dirichlet, Interior, Interior, Interior, Interior, Interior, Interior, Interior, Dirichlet]);
    }

    #[test]
    fn interpolation_is_exact_for_bilinear() {
        let grid = Grid::cube(2, 0.125).unwrap();
        let mask = vec![NodeKind::Interior; grid.len()];
        let f = GridField::from_fn(grid, mask, |x| 1.0 + 2.0 * x[0] - x[1] + 3.0 * x[0] * x[1]).unwrap();
        let p = [0.31, -0.77];
        let v = f.interpolate(&p).unwrap();
        assert!((v - (1.0 + 0.62 + 0.77 + 3.0 * 0.31 * -0.77)).abs() < 1e-12);
    }

    #[test]
    fn fbxf_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = GridField::unit_ball(2, 0.25).unwrap();
        f.fill(|x| x[0] * x[0] + 0.5 * x[1]);
        let path = dir.path().join("u.fbxf");
        f.export(&path).unwrap();
        let g = GridField::read_fbxf(&path).unwrap();
        assert_eq!(f, g);
        let csv = std::fs::read_to_string(path.with_extension("csv")).unwrap();
        assert!(csv.starts_with("x0,x1,value,mask"));
    }
}

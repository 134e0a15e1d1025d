//! Field containers for tensors on the collar and on the fiber torus.
//!
//! A [`CollarField`] stores one scalar block per packed tensor component,
//! laid out as `[component][t-slice][spatial]` with the spatial index
//! row-major (last axis fastest). Every collar field carries one *ghost
//! slice* at `t = -dt` in front of the physical slices: boundary-value
//! solvers determine the ghost values so that collocation rows at `t = 0`
//! can use the same finite-difference windows as interior rows, which in
//! turn makes residuals of solved fields vanish to machine precision on
//! the boundary rows. Fields that represent *sources* rather than
//! solutions simply leave the ghost slice zero; norms and reductions only
//! ever look at the physical slices.
//!
//! A [`FiberField`] is the spatial-only analogue used for boundary data,
//! fiber metrics and expansion coefficients.
//!
//! Both types serialize to the `.ctf` container: a magic tag, a JSON
//! header describing the grid, and the raw row-major `f64` payload in
//! little-endian order.

use crate::error::{Error, Result};
use crate::grid::CollarGrid;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Magic bytes identifying a `.ctf` file.
pub const CTF_MAGIC: &[u8; 4] = b"CTF1";

/// A block of scalar fields on the collar grid, one per packed component.
///
/// Slice index `jt = 0` is the ghost slice at `t = -dt`; physical node
/// `it` (as indexed by [`CollarGrid::t`]) lives at slice `jt = it + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollarField {
    pub grid: CollarGrid,
    pub ncomp: usize,
    /// `ncomp * (nt + 1) * spatial_len` values, `[comp][t][x]`.
    pub data: Vec<f64>,
}

/// A block of scalar fields on the fiber torus, one per packed component.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberField {
    pub grid: CollarGrid,
    pub ncomp: usize,
    /// `ncomp * spatial_len` values, `[comp][x]`.
    pub data: Vec<f64>,
}

impl CollarField {
    /// An all-zero field with `ncomp` components on `grid`.
    pub fn zeros(grid: &CollarGrid, ncomp: usize) -> Self {
        let len = ncomp * (grid.nt + 1) * grid.spatial_len();
        CollarField { grid: grid.clone(), ncomp, data: vec![0.0; len] }
    }

    /// Number of t-slices stored, including the ghost slice.
    pub fn nslices(&self) -> usize {
        self.grid.nt + 1
    }

    /// The t-coordinate of storage slice `jt` (slice 0 is the ghost at `-dt`).
    pub fn slice_t(&self, jt: usize) -> f64 {
        (jt as f64 - 1.0) * self.grid.dt()
    }

    /// Builds a field by evaluating `f(comp, t, x)` at every node,
    /// including the ghost slice.
    pub fn from_fn(
        grid: &CollarGrid,
        ncomp: usize,
        mut f: impl FnMut(usize, f64, &[f64]) -> f64,
    ) -> Self {
        let mut out = Self::zeros(grid, ncomp);
        let nx = grid.spatial_len();
        let nsl = out.nslices();
        for c in 0..ncomp {
            for jt in 0..nsl {
                let t = out.slice_t(jt);
                let base = (c * nsl + jt) * nx;
                for ix in 0..nx {
                    out.data[base + ix] = f(c, t, &grid.x(ix));
                }
            }
        }
        out
    }

    /// Immutable view of one t-slice of one component.
    pub fn slice(&self, comp: usize, jt: usize) -> &[f64] {
        let nx = self.grid.spatial_len();
        let base = (comp * self.nslices() + jt) * nx;
        &self.data[base..base + nx]
    }

    /// Mutable view of one t-slice of one component.
    pub fn slice_mut(&mut self, comp: usize, jt: usize) -> &mut [f64] {
        let nx = self.grid.spatial_len();
        let base = (comp * self.nslices() + jt) * nx;
        &mut self.data[base..base + nx]
    }

    /// Immutable view of one whole component, `[t][x]`.
    pub fn comp(&self, comp: usize) -> &[f64] {
        let len = self.nslices() * self.grid.spatial_len();
        &self.data[comp * len..(comp + 1) * len]
    }

    /// Mutable view of one whole component.
    pub fn comp_mut(&mut self, comp: usize) -> &mut [f64] {
        let len = self.nslices() * self.grid.spatial_len();
        &mut self.data[comp * len..(comp + 1) * len]
    }

    /// Value at `(comp, physical node it, spatial flat index ix)`.
    pub fn at(&self, comp: usize, it: usize, ix: usize) -> f64 {
        self.slice(comp, it + 1)[ix]
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    /// `self *= a`.
    pub fn scale(&mut self, a: f64) {
        for x in &mut self.data {
            *x *= a;
        }
    }

    /// Sets the ghost slice of every component to zero.
    pub fn zero_ghost(&mut self) {
        for c in 0..self.ncomp {
            self.slice_mut(c, 0).fill(0.0);
        }
    }

    /// Largest absolute value over the physical slices of all components.
    pub fn sup_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for c in 0..self.ncomp {
            for jt in 1..self.nslices() {
                for &v in self.slice(c, jt) {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }

    /// Checks that `other` lives on an identical grid with the same
    /// component count.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid || self.ncomp != other.ncomp {
            return Err(Error::GridMismatch(format!(
                "field shapes differ: {} comps on {:?} vs {} comps on {:?}",
                self.ncomp, self.grid.spatial_shape, other.ncomp, other.grid.spatial_shape
            )));
        }
        Ok(())
    }

    /// Writes the field to a `.ctf` file.
    pub fn write_ctf(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = CtfHeader {
            kind: "collar".into(),
            n: self.grid.n,
            ncomp: self.ncomp,
            eps: self.grid.eps,
            t_max: self.grid.t_max,
            nt: self.grid.nt,
            ghost_layers: 1,
            spatial_shape: self.grid.spatial_shape.clone(),
            spatial_period: self.grid.spatial_period.clone(),
            meta,
        };
        write_ctf(path, &header, &self.data)
    }

    /// Reads a collar field from a `.ctf` file.
    pub fn read_ctf(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (header, data) = read_ctf(path)?;
        if header.kind != "collar" {
            return Err(Error::Format(format!(
                "expected a collar field, found kind {:?}",
                header.kind
            )));
        }
        if header.ghost_layers != 1 {
            return Err(Error::Format(format!(
                "unsupported ghost layer count {}",
                header.ghost_layers
            )));
        }
        let grid = CollarGrid::new(
            header.n,
            header.eps,
            header.t_max,
            header.nt,
            header.spatial_shape.clone(),
            header.spatial_period.clone(),
        )?;
        let expect = header.ncomp * (grid.nt + 1) * grid.spatial_len();
        if data.len() != expect {
            return Err(Error::Format(format!(
                "payload holds {} values, grid needs {}",
                data.len(),
                expect
            )));
        }
        Ok((CollarField { grid, ncomp: header.ncomp, data }, header.meta))
    }
}

impl FiberField {
    /// An all-zero fiber field.
    pub fn zeros(grid: &CollarGrid, ncomp: usize) -> Self {
        FiberField {
            grid: grid.clone(),
            ncomp,
            data: vec![0.0; ncomp * grid.spatial_len()],
        }
    }

    /// Builds a fiber field by evaluating `f(comp, x)` at every node.
    pub fn from_fn(grid: &CollarGrid, ncomp: usize, mut f: impl FnMut(usize, &[f64]) -> f64) -> Self {
        let mut out = Self::zeros(grid, ncomp);
        let nx = grid.spatial_len();
        for c in 0..ncomp {
            for ix in 0..nx {
                out.data[c * nx + ix] = f(c, &grid.x(ix));
            }
        }
        out
    }

    /// Immutable view of one component.
    pub fn comp(&self, comp: usize) -> &[f64] {
        let nx = self.grid.spatial_len();
        &self.data[comp * nx..(comp + 1) * nx]
    }

    /// Mutable view of one component.
    pub fn comp_mut(&mut self, comp: usize) -> &mut [f64] {
        let nx = self.grid.spatial_len();
        &mut self.data[comp * nx..(comp + 1) * nx]
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    /// `self *= a`.
    pub fn scale(&mut self, a: f64) {
        for x in &mut self.data {
            *x *= a;
        }
    }

    /// Largest absolute value over all components.
    pub fn sup_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Writes the field to a `.ctf` file.
    pub fn write_ctf(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = CtfHeader {
            kind: "fiber".into(),
            n: self.grid.n,
            ncomp: self.ncomp,
            eps: self.grid.eps,
            t_max: self.grid.t_max,
            nt: self.grid.nt,
            ghost_layers: 0,
            spatial_shape: self.grid.spatial_shape.clone(),
            spatial_period: self.grid.spatial_period.clone(),
            meta,
        };
        write_ctf(path, &header, &self.data)
    }

    /// Reads a fiber field from a `.ctf` file.
    pub fn read_ctf(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (header, data) = read_ctf(path)?;
        if header.kind != "fiber" {
            return Err(Error::Format(format!(
                "expected a fiber field, found kind {:?}",
                header.kind
            )));
        }
        let grid = CollarGrid::new(
            header.n,
            header.eps,
            header.t_max,
            header.nt,
            header.spatial_shape.clone(),
            header.spatial_period.clone(),
        )?;
        let expect = header.ncomp * grid.spatial_len();
        if data.len() != expect {
            return Err(Error::Format(format!(
                "payload holds {} values, grid needs {}",
                data.len(),
                expect
            )));
        }
        Ok((FiberField { grid, ncomp: header.ncomp, data }, header.meta))
    }
}

/// JSON header of a `.ctf` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtfHeader {
    /// `"collar"` for fields with t-slices, `"fiber"` for spatial-only data.
    pub kind: String,
    pub n: usize,
    pub ncomp: usize,
    pub eps: f64,
    pub t_max: f64,
    pub nt: usize,
    /// Number of leading ghost slices included in the payload (0 or 1).
    pub ghost_layers: usize,
    pub spatial_shape: Vec<usize>,
    pub spatial_period: Vec<f64>,
    /// Free-form metadata recorded by the producer (scenario, tolerances…).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn write_ctf(path: &Path, header: &CtfHeader, data: &[f64]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header_bytes = serde_json::to_vec(header)?;
    file.write_all(CTF_MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for &v in data {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

fn read_ctf(path: &Path) -> Result<(CtfHeader, Vec<f64>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CTF_MAGIC {
        return Err(Error::Format("missing CTF1 magic tag".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 24 {
        return Err(Error::Format(format!("header length {header_len} is implausible")));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CtfHeader = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

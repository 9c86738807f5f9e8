//! Voxel volumes: storage, trilinear sampling, isotropic resampling, and the
//! header+raw file format.
//!
//! Voxels are `f32` attenuation values (1/mm) laid out x-fastest, then y,
//! then z. `origin_mm` is the world position of the *center* of voxel
//! `(0,0,0)`; voxel `(i,j,k)` is centered at `origin + (i,j,k) * spacing`.
//! Files come in pairs: `<name>.json` holds the header, `<name>.raw` holds
//! little-endian `f32` samples in storage order. Headers declaring
//! `"units": "hu"` are converted to attenuation on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Linear attenuation of water at a CT-like energy, 1/mm. Hounsfield input
/// converts as `mu = MU_WATER_PER_MM * (1 + hu/1000)`, clamped at zero.
pub const MU_WATER_PER_MM: f64 = 0.02;

/// Convert a Hounsfield value to linear attenuation (1/mm), clamped at 0.
pub fn hu_to_mu(hu: f64) -> f64 {
    (MU_WATER_PER_MM * (1.0 + hu / 1000.0)).max(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    units: String,
}

/// A dense voxel volume of attenuation values.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    data: Vec<f32>,
}

impl Volume3 {
    /// Validating constructor. `data` is x-fastest and must hold exactly
    /// `nx*ny*nz` finite values; dims must be nonzero and spacing positive.
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero volume dimension in {dims:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("non-positive spacing {spacing_mm:?}")));
        }
        if origin_mm.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite origin {origin_mm:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Data(format!(
                "payload holds {} samples, dims {:?} need {}",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite voxel at linear index {i}")));
        }
        Ok(Volume3 {
            dims,
            spacing_mm,
            origin_mm,
            data,
        })
    }

    /// Volume filled with a constant value.
    pub fn uniform(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        value: f32,
    ) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Volume3::new(dims, spacing_mm, origin_mm, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.data[self.index(ix, iy, iz)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, value: f32) {
        let i = self.index(ix, iy, iz);
        self.data[i] = value;
    }

    /// World position of the center of voxel `(ix, iy, iz)`.
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Point3 {
        Point3::new(
            self.origin_mm[0] + ix as f64 * self.spacing_mm[0],
            self.origin_mm[1] + iy as f64 * self.spacing_mm[1],
            self.origin_mm[2] + iz as f64 * self.spacing_mm[2],
        )
    }

    /// World center of the voxel-center grid (natural rig isocenter).
    pub fn center(&self) -> Point3 {
        Point3::new(
            self.origin_mm[0] + (self.dims[0] - 1) as f64 * self.spacing_mm[0] / 2.0,
            self.origin_mm[1] + (self.dims[1] - 1) as f64 * self.spacing_mm[1] / 2.0,
            self.origin_mm[2] + (self.dims[2] - 1) as f64 * self.spacing_mm[2] / 2.0,
        )
    }

    /// World bounds of the sampled region: the voxel-center bounding box.
    /// Trilinear sampling is defined inside this box and zero outside.
    pub fn sample_bounds(&self) -> (Point3, Point3) {
        (
            Point3::new(self.origin_mm[0], self.origin_mm[1], self.origin_mm[2]),
            Point3::new(
                self.origin_mm[0] + (self.dims[0] - 1) as f64 * self.spacing_mm[0],
                self.origin_mm[1] + (self.dims[1] - 1) as f64 * self.spacing_mm[1],
                self.origin_mm[2] + (self.dims[2] - 1) as f64 * self.spacing_mm[2],
            ),
        )
    }

    /// Continuous voxel coordinates of a world point.
    #[inline]
    pub fn world_to_voxel(&self, p: &Point3) -> [f64; 3] {
        [
            (p.x - self.origin_mm[0]) / self.spacing_mm[0],
            (p.y - self.origin_mm[1]) / self.spacing_mm[1],
            (p.z - self.origin_mm[2]) / self.spacing_mm[2],
        ]
    }

    /// Trilinear interpolation at continuous voxel coordinates; zero outside
    /// `[0, n-1]` on any axis.
    #[inline]
    pub fn sample_voxel_coords(&self, g: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.dims;
        if !(g[0] >= 0.0
            && g[0] <= (nx - 1) as f64
            && g[1] >= 0.0
            && g[1] <= (ny - 1) as f64
            && g[2] >= 0.0
            && g[2] <= (nz - 1) as f64)
        {
            return 0.0;
        }
        // Clamp the base cell so g == n-1 reuses the last cell with f == 1.
        let ix = (g[0] as usize).min(nx.saturating_sub(2));
        let iy = (g[1] as usize).min(ny.saturating_sub(2));
        let iz = (g[2] as usize).min(nz.saturating_sub(2));
        let fx = g[0] - ix as f64;
        let fy = g[1] - iy as f64;
        let fz = g[2] - iz as f64;
        let ix1 = (ix + 1).min(nx - 1);
        let iy1 = (iy + 1).min(ny - 1);
        let iz1 = (iz + 1).min(nz - 1);

        let c000 = self.at(ix, iy, iz) as f64;
        let c100 = self.at(ix1, iy, iz) as f64;
        let c010 = self.at(ix, iy1, iz) as f64;
        let c110 = self.at(ix1, iy1, iz) as f64;
        let c001 = self.at(ix, iy, iz1) as f64;
        let c101 = self.at(ix1, iy, iz1) as f64;
        let c011 = self.at(ix, iy1, iz1) as f64;
        let c111 = self.at(ix1, iy1, iz1) as f64;

        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        c0 + (c1 - c0) * fz
    }

    /// Trilinear interpolation at a world point; zero outside the volume.
    #[inline]
    pub fn sample_trilinear(&self, p: &Point3) -> f64 {
        self.sample_voxel_coords(self.world_to_voxel(p))
    }

    /// Resample onto an isotropic grid with `target_mm` spacing covering the
    /// same voxel-center extent; the world position of every output sample
    /// lies inside the input's sampled region, so no zero padding appears.
    pub fn resample_isotropic(&self, target_mm: f64) -> Result<Volume3> {
        if !(target_mm > 0.0) || !target_mm.is_finite() {
            return Err(Error::Config(format!("non-positive target spacing {target_mm}")));
        }
        let out_dims = [0, 1, 2].map(|a| {
            let extent = (self.dims[a] - 1) as f64 * self.spacing_mm[a];
            // Guard against 2.9999999 flooring below an exactly covered grid.
            (extent / target_mm + 1e-9).floor() as usize + 1
        });
        let n = out_dims[0] * out_dims[1] * out_dims[2];
        let mut data = vec![0f32; n];
        let slice_len = out_dims[0] * out_dims[1];
        use rayon::prelude::*;
        data.par_chunks_mut(slice_len).enumerate().for_each(|(iz, slice)| {
            let wz = self.origin_mm[2] + iz as f64 * target_mm;
            for iy in 0..out_dims[1] {
                let wy = self.origin_mm[1] + iy as f64 * target_mm;
                for ix in 0..out_dims[0] {
                    let wx = self.origin_mm[0] + ix as f64 * target_mm;
                    slice[iy * out_dims[0] + ix] =
                        self.sample_trilinear(&Point3::new(wx, wy, wz)) as f32;
                }
            }
        });
        Volume3::new(out_dims, [target_mm; 3], self.origin_mm, data)
    }

    /// Write `<stem>.json` + `<stem>.raw`; `path` may carry either extension
    /// or none. Units are always attenuation (`mu_per_mm`), so a load/save
    /// round trip is bit-identical on the payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (json_path, raw_path) = header_pair(path);
        let header = VolumeHeader {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
            origin_mm: self.origin_mm,
            dtype: "f32le".into(),
            units: "mu_per_mm".into(),
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        std::fs::write(&json_path, text)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&raw_path, bytes).map_err(|e| Error::io(raw_path.display().to_string(), e))
    }

    /// Load a header+raw pair saved by [`Volume3::save`] or produced
    /// externally; Hounsfield payloads are converted to attenuation.
    pub fn load(path: &Path) -> Result<Volume3> {
        let (json_path, raw_path) = header_pair(path);
        let text = std::fs::read_to_string(&json_path)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let header: VolumeHeader =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("volume header: {e}")))?;
        if header.dtype != "f32le" {
            return Err(Error::Data(format!("unsupported dtype {:?}", header.dtype)));
        }
        let convert_hu = match header.units.as_str() {
            "hu" => true,
            "mu_per_mm" => false,
            other => return Err(Error::Data(format!("unsupported units {other:?}"))),
        };
        let bytes = std::fs::read(&raw_path)
            .map_err(|e| Error::io(raw_path.display().to_string(), e))?;
        let n = header.dims[0] * header.dims[1] * header.dims[2];
        if bytes.len() != n * 4 {
            return Err(Error::Data(format!(
                "raw payload is {} bytes, dims {:?} need {}",
                bytes.len(),
                header.dims,
                n * 4
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            data.push(if convert_hu { hu_to_mu(v as f64) as f32 } else { v });
        }
        Volume3::new(header.dims, header.spacing_mm, header.origin_mm, data)
    }
}

/// Resolve a user-supplied path into the `(json, raw)` pair.
fn header_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

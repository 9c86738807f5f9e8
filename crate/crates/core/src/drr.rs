//! Ray-marched projection images and their on-disk format.
//!
//! Each detector pixel integrates attenuation along the ray from the view's
//! source to the pixel center: uniform midpoint sampling at `step_mm`,
//! trilinear interpolation at each sample, times the step length. Sample
//! positions live on a fixed per-ray grid `t_i = (i + 0.5) * step_mm`, so
//! restricting the loop to the volume's bounding box only skips samples that
//! would read zero — the result is identical to marching the whole ray, and
//! rows are filled independently, so pixel values do not depend on the
//! number of worker threads.
//!
//! Images persist as 16-bit binary PGM (big-endian samples, row `iv`, column
//! `iu`) plus a JSON sidecar holding the linear scale and the view geometry,
//! so stored integrals are recoverable to `scale / 65535`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, ProjectionGeometry, Vec3};
use crate::volume::Volume3;

/// One rendered projection image with its acquisition geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DrrImage {
    pub geometry: ProjectionGeometry,
    /// Row-major, `iv * nu + iu`.
    pub pixels: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DrrSidecar {
    scale: f64,
    geometry: ProjectionGeometry,
}

impl DrrImage {
    #[inline]
    pub fn at(&self, iu: usize, iv: usize) -> f32 {
        self.pixels[iv * self.geometry.detector.nu + iu]
    }

    pub fn max_value(&self) -> f32 {
        self.pixels.iter().copied().fold(0.0, f32::max)
    }

    /// Write `<stem>.pgm` and the `<stem>.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let det = self.geometry.detector;
        let scale = {
            let m = self.max_value() as f64;
            if m > 0.0 {
                m
            } else {
                1.0
            }
        };
        let mut bytes = Vec::with_capacity(self.pixels.len() * 2 + 32);
        bytes.extend_from_slice(format!("P5\n{} {}\n65535\n", det.nu, det.nv).as_bytes());
        for v in &self.pixels {
            let q = (*v as f64 / scale * 65535.0).round().clamp(0.0, 65535.0) as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        let pgm_path = path.with_extension("pgm");
        std::fs::write(&pgm_path, bytes)
            .map_err(|e| Error::io(pgm_path.display().to_string(), e))?;
        let sidecar = DrrSidecar {
            scale,
            geometry: self.geometry,
        };
        let json_path = path.with_extension("json");
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )
        .map_err(|e| Error::io(json_path.display().to_string(), e))
    }

    /// Read back a `<stem>.pgm` + `<stem>.json` pair.
    pub fn load(path: &Path) -> Result<DrrImage> {
        let json_path = path.with_extension("json");
        let text = std::fs::read_to_string(&json_path)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let sidecar: DrrSidecar =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("drr sidecar: {e}")))?;
        let pgm_path = path.with_extension("pgm");
        let bytes =
            std::fs::read(&pgm_path).map_err(|e| Error::io(pgm_path.display().to_string(), e))?;
        let (w, h, data) = parse_pgm16(&bytes)
            .map_err(|msg| Error::Data(format!("{}: {msg}", pgm_path.display())))?;
        let det = sidecar.geometry.detector;
        if (w, h) != (det.nu, det.nv) {
            return Err(Error::Data(format!(
                "pgm is {w}x{h} but sidecar geometry says {}x{}",
                det.nu, det.nv
            )));
        }
        let pixels = data
            .iter()
            .map(|&q| (q as f64 * sidecar.scale / 65535.0) as f32)
            .collect();
        Ok(DrrImage {
            geometry: sidecar.geometry,
            pixels,
        })
    }
}

/// Render one view. `step_mm` must be positive.
pub fn render_drr(vol: &Volume3, geometry: &ProjectionGeometry, step_mm: f64) -> DrrImage {
    assert!(step_mm > 0.0, "step must be positive, got {step_mm}");
    let det = geometry.detector;
    let source = geometry.source();
    let (lo, hi) = vol.sample_bounds();
    let spacing = vol.spacing_mm();

    let mut pixels = vec![0f32; det.nu * det.nv];
    pixels
        .par_chunks_mut(det.nu)
        .enumerate()
        .for_each(|(iv, row)| {
            for (iu, out) in row.iter_mut().enumerate() {
                let (u, v) = det.pixel_center_mm(iu, iv);
                let target = geometry.detector_point(u, v);
                let delta = target - source;
                let t_total = delta.norm();
                let dir = delta / t_total;
                *out = integrate_ray(vol, &source, &dir, t_total, step_mm, &lo, &hi, &spacing);
            }
        });
    DrrImage {
        geometry: *geometry,
        pixels,
    }
}

/// March one ray on the fixed grid `t_i = (i + 0.5) * step`, restricted to
/// the volume's bounding box (padded one step for float safety; the sampler
/// itself decides in/out, so the padding cannot change the sum).
#[allow(clippy::too_many_arguments)]
#[inline]
fn integrate_ray(
    vol: &Volume3,
    source: &Point3,
    dir: &Vec3,
    t_total: f64,
    step: f64,
    lo: &Point3,
    hi: &Point3,
    spacing: &[f64; 3],
) -> f32 {
    let Some((t_in, t_out)) = clip_to_box(source, dir, lo, hi) else {
        return 0.0;
    };
    let t_in = t_in.max(0.0);
    let t_out = t_out.min(t_total);
    if t_in > t_out {
        return 0.0;
    }
    // Largest i with t_i < t_total, then the clipped [i_lo, i_hi] window.
    let i_last = (t_total / step - 0.5).ceil() as i64 - 1;
    let i_lo = ((t_in / step - 0.5).ceil() as i64 - 1).max(0);
    let i_hi = ((t_out / step - 0.5).floor() as i64 + 1).min(i_last);
    if i_hi < i_lo {
        return 0.0;
    }

    // Step in continuous voxel coordinates; positions are computed by
    // multiplication from the window start, not accumulated.
    let t0 = (i_lo as f64 + 0.5) * step;
    let g0 = vol.world_to_voxel(&(source + dir * t0));
    let dg = [
        dir.x * step / spacing[0],
        dir.y * step / spacing[1],
        dir.z * step / spacing[2],
    ];
    let m = i_hi - i_lo;
    let general = |k: i64| {
        let kf = k as f64;
        vol.sample_voxel_coords([g0[0] + dg[0] * kf, g0[1] + dg[1] * kf, g0[2] + dg[2] * kf])
    };

    // Sub-window [k_in, k_out] where every axis stays inside the margin
    // band [MARGIN, n-1-MARGIN]: there the base cell never needs clamping,
    // so the inner loop can index corners directly. The few head/tail
    // samples (and any ray where the window is empty) go through the general
    // boundary-aware sampler instead. Bounds are shrunk one sample on each
    // side, and MARGIN dwarfs the fixed-point drift below; the saturating
    // float->int casts make huge ratios land in the empty case.
    const MARGIN: f64 = 1e-5;
    let dims = vol.dims();
    let (mut k_in, mut k_out) = (0i64, m);
    for a in 0..3 {
        let top = (dims[a] - 1) as f64 - MARGIN;
        if dg[a].abs() < 1e-15 {
            if !(g0[a] >= MARGIN && g0[a] <= top) {
                k_in = m + 1;
            }
        } else {
            let (b0, b1) = ((MARGIN - g0[a]) / dg[a], (top - g0[a]) / dg[a]);
            let (near, far) = if b0 <= b1 { (b0, b1) } else { (b1, b0) };
            k_in = k_in.max((near.ceil() as i64).saturating_add(1));
            k_out = k_out.min((far.floor() as i64).saturating_sub(1));
        }
    }

    let mut sum = 0.0f64;
    if k_in > k_out {
        for k in 0..=m {
            sum += general(k);
        }
        return (sum * step) as f32;
    }
    for k in 0..k_in {
        sum += general(k);
    }
    // Q32.32 fixed-point marching: one integer add per axis per sample, the
    // voxel index is the high word and the interpolation weight the low one.
    // Rounding the increment once costs at most 2^-33 voxel per step, so the
    // accumulated drift stays far below MARGIN for any realistic ray.
    const FRAC: f64 = 4294967296.0; // 2^32
    let fp = |x: f64| (x * FRAC).round() as i64;
    let (mut px, mut py, mut pz) = (
        fp(g0[0] + dg[0] * k_in as f64),
        fp(g0[1] + dg[1] * k_in as f64),
        fp(g0[2] + dg[2] * k_in as f64),
    );
    let (dx, dy, dz) = (fp(dg[0]), fp(dg[1]), fp(dg[2]));
    let inv_frac = 1.0f32 / FRAC as f32;
    let data = vol.data();
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    for _ in k_in..=k_out {
        let ix = (px >> 32) as usize;
        let iy = (py >> 32) as usize;
        let iz = (pz >> 32) as usize;
        let fx = (px as u32) as f32 * inv_frac;
        let fy = (py as u32) as f32 * inv_frac;
        let fz = (pz as u32) as f32 * inv_frac;
        px += dx;
        py += dy;
        pz += dz;
        let idx = iz * sz + iy * sy + ix;
        // SAFETY: inside [k_in, k_out] every axis satisfies 0 <= g < n-1
        // (margin band minus fixed-point drift), so ix <= nx-2 (likewise y,
        // z) and idx + sz + sy + 1 < data.len().
        let (c000, c100, c010, c110, c001, c101, c011, c111) = unsafe {
            (
                *data.get_unchecked(idx),
                *data.get_unchecked(idx + 1),
                *data.get_unchecked(idx + sy),
                *data.get_unchecked(idx + sy + 1),
                *data.get_unchecked(idx + sz),
                *data.get_unchecked(idx + sz + 1),
                *data.get_unchecked(idx + sz + sy),
                *data.get_unchecked(idx + sz + sy + 1),
            )
        };
        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        sum += (c0 + (c1 - c0) * fz) as f64;
    }
    for k in (k_out + 1)..=m {
        sum += general(k);
    }
    (sum * step) as f32
}

/// Slab-method ray/box intersection over the closed box `[lo, hi]`.
fn clip_to_box(origin: &Point3, dir: &Vec3, lo: &Point3, hi: &Point3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let (o, d, l, h) = (origin[a], dir[a], lo[a], hi[a]);
        if d == 0.0 {
            if o < l || o > h {
                return None;
            }
        } else {
            let ta = (l - o) / d;
            let tb = (h - o) / d;
            let (near, far) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(near);
            t1 = t1.min(far);
        }
    }
    if t0 <= t1 {
        Some((t0, t1))
    } else {
        None
    }
}

/// Minimal binary-PGM (P5, maxval 65535) reader.
fn parse_pgm16(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u16>), String> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        // Skip whitespace and `#` comment lines.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err("not a binary pgm".into());
    }
    let w: usize = token(&mut pos)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(&mut pos)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 65535 {
        return Err(format!("expected 16-bit maxval, got {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 2;
    if bytes.len() < pos + need {
        return Err(format!("payload needs {need} bytes, found {}", bytes.len() - pos));
    }
    let data = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, data))
}

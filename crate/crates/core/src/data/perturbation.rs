//! Universal perturbations and adversarial patches, their application to
//! images and the on-disk container.
//!
//! Container layout, integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ADVGPERT"
//! version  u32      1
//! kind     u32      0 = universal, 1 = patch
//! params   universal: f32 epsilon; patch: f32 chi, f32 theta_max (radians)
//! shape    u32 rank, rank x u32 extents
//! values   product(extents) x f32
//! ```

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{read_f32s, read_u32, truncated, write_f32s, write_u32};
use crate::tensor::{OverlayTap, Tensor};

const MAGIC: &[u8; 8] = b"ADVGPERT";
const VERSION: u32 = 1;
/// Slack when checking that a disc lies inside the image.
const BOUNDS_TOL: f64 = 1e-9;

/// How a patch is placed: disc diameter `chi * H` and rotation drawn from
/// `[-theta_max, theta_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacementRule {
    pub chi: f64,
    /// Radians.
    pub theta_max: f64,
}

impl PlacementRule {
    pub fn new(chi: f64, theta_max: f64) -> Result<Self> {
        if !(chi > 0.0 && chi <= 1.0) {
            return Err(Error::invalid(format!("patch scale {chi} must lie in (0, 1]")));
        }
        if !(theta_max.is_finite() && (0.0..=PI).contains(&theta_max)) {
            return Err(Error::invalid(format!("rotation bound {theta_max} must lie in [0, pi]")));
        }
        Ok(Self { chi, theta_max })
    }

    /// Draws a placement whose disc lies inside an `h x w` image.
    pub fn sample<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Placement {
        let r = self.chi * h as f64 / 2.0;
        let center_row = r + (h as f64 - 2.0 * r) * rng.gen::<f64>();
        let center_col = r + (w as f64 - 2.0 * r).max(0.0) * rng.gen::<f64>();
        let angle = if self.theta_max > 0.0 {
            rng.gen_range(-self.theta_max..=self.theta_max)
        } else {
            0.0
        };
        Placement {
            center_row,
            center_col,
            chi: self.chi,
            angle,
        }
    }
}

/// A concrete patch location: disc center in pixel units (pixel `(r, c)`
/// has its center at `(r + 0.5, c + 0.5)`), scale and rotation in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub center_row: f64,
    pub center_col: f64,
    pub chi: f64,
    pub angle: f64,
}

/// Patch pixels whose centers lie in the inscribed disc of a `p x p` square.
pub fn disc_mask(p: usize) -> Vec<bool> {
    let half = p as f64 / 2.0;
    let mut mask = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let (dy, dx) = (i as f64 + 0.5 - half, j as f64 + 0.5 - half);
            mask.push(dy * dy + dx * dx <= half * half);
        }
    }
    mask
}

/// Overlay plan of one placement: every image pixel whose center maps into
/// the patch disc, with the bilinear taps sampling the `p x p` patch at the
/// inverse-mapped location.
pub fn overlay_taps(h: usize, w: usize, p: usize, placement: &Placement) -> Result<Vec<OverlayTap>> {
    let Placement {
        center_row: cy,
        center_col: cx,
        chi,
        angle,
    } = *placement;
    if p == 0 || !(chi > 0.0) {
        return Err(Error::invalid("patch side and scale must be positive"));
    }
    let radius = chi * h as f64 / 2.0;
    if cy - radius < -BOUNDS_TOL
        || cy + radius > h as f64 + BOUNDS_TOL
        || cx - radius < -BOUNDS_TOL
        || cx + radius > w as f64 + BOUNDS_TOL
    {
        return Err(Error::OutOfRange(format!(
            "patch disc at ({cy}, {cx}) with radius {radius} leaves the {h}x{w} image"
        )));
    }
    // Image pixels per patch pixel.
    let scale = 2.0 * radius / p as f64;
    let half = p as f64 / 2.0;
    let (sin, cos) = angle.sin_cos();
    let r0 = (cy - radius).floor().max(0.0) as usize;
    let r1 = ((cy + radius).ceil() as usize).min(h);
    let c0 = (cx - radius).floor().max(0.0) as usize;
    let c1 = ((cx + radius).ceil() as usize).min(w);
    let last = (p - 1) as f64;
    let mut plan = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            let dr = r as f64 + 0.5 - cy;
            let dc = c as f64 + 0.5 - cx;
            // Undo the rotation, then the scaling.
            let ur = (cos * dr + sin * dc) / scale;
            let uc = (-sin * dr + cos * dc) / scale;
            if ur * ur + uc * uc > half * half {
                continue;
            }
            let fr = (ur + half - 0.5).clamp(0.0, last);
            let fc = (uc + half - 0.5).clamp(0.0, last);
            let (ir, ic) = (fr.floor() as usize, fc.floor() as usize);
            let (ar, ac) = (fr - ir as f64, fc - ic as f64);
            let (jr, jc) = ((ir + 1).min(p - 1), (ic + 1).min(p - 1));
            plan.push(OverlayTap {
                pixel: r * w + c,
                taps: [
                    (ir * p + ic, (1.0 - ar) * (1.0 - ac)),
                    (ir * p + jc, (1.0 - ar) * ac),
                    (jr * p + ic, ar * (1.0 - ac)),
                    (jr * p + jc, ar * ac),
                ],
            });
        }
    }
    Ok(plan)
}

fn check_universal(xi: &Tensor, epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("budget {epsilon} must be finite and non-negative")));
    }
    let norm = xi.max_abs();
    if norm > epsilon {
        return Err(Error::Budget(format!("|xi|_inf = {norm} exceeds {epsilon}")));
    }
    Ok(())
}

/// `clip(x + xi, 0, 1)` for one image `[C, H, W]` or a batch `[B, C, H, W]`.
pub fn apply_universal(images: &Tensor, xi: &Tensor, epsilon: f64) -> Result<Tensor> {
    check_universal(xi, epsilon)?;
    let item = &images.shape()[images.rank().saturating_sub(3)..];
    if xi.rank() != 3 || (images.rank() != 3 && images.rank() != 4) || item != xi.shape() {
        return Err(Error::shape(format!(
            "perturbation {:?} does not match images {:?}",
            xi.shape(),
            images.shape()
        )));
    }
    let xd = xi.data();
    let mut out = images.clone();
    for chunk in out.data_mut().chunks_exact_mut(xd.len()) {
        for (v, &d) in chunk.iter_mut().zip(xd) {
            *v = (*v + d).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Pastes `patch` `[C, P, P]` into `image` `[C, H, W]` at `placement`.
pub fn apply_patch(image: &Tensor, patch: &Tensor, placement: &Placement) -> Result<Tensor> {
    if image.rank() != 3 || patch.rank() != 3 || image.shape()[0] != patch.shape()[0] {
        return Err(Error::shape(format!(
            "patch {:?} does not match image {:?}",
            patch.shape(),
            image.shape()
        )));
    }
    let (h, w, p) = (image.shape()[1], image.shape()[2], patch.shape()[1]);
    let plan = overlay_taps(h, w, p, placement)?;
    let mut out = image.clone();
    paste(out.data_mut(), patch, h * w, &plan);
    Ok(out)
}

fn paste(image: &mut [f64], patch: &Tensor, plane: usize, plan: &[OverlayTap]) {
    let pplane = patch.shape()[1] * patch.shape()[2];
    let pd = patch.data();
    for c in 0..patch.shape()[0] {
        for t in plan {
            let mut v = 0.0;
            for &(i, wt) in &t.taps {
                v += wt * pd[c * pplane + i];
            }
            image[c * plane + t.pixel] = v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PerturbationKind {
    Universal { epsilon: f64 },
    Patch { rule: PlacementRule },
}

/// A learned perturbation: an additive `xi` `[C, H, W]` with
/// `|xi|_inf <= epsilon`, or a `[C, P, P]` patch with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    kind: PerturbationKind,
    xi: Tensor,
}

impl PerturbationSpec {
    pub fn universal(xi: Tensor, epsilon: f64) -> Result<Self> {
        if xi.rank() != 3 {
            return Err(Error::shape(format!("universal perturbation must be [C, H, W], got {:?}", xi.shape())));
        }
        check_universal(&xi, epsilon)?;
        Ok(Self {
            kind: PerturbationKind::Universal { epsilon },
            xi,
        })
    }

    /// The all-zero universal perturbation.
    pub fn zero_universal(shape: [usize; 3], epsilon: f64) -> Result<Self> {
        Self::universal(Tensor::zeros(&shape), epsilon)
    }

    pub fn patch(xi: Tensor, rule: PlacementRule) -> Result<Self> {
        if xi.rank() != 3 || xi.shape()[1] != xi.shape()[2] {
            return Err(Error::shape(format!("patch must be [C, P, P], got {:?}", xi.shape())));
        }
        if xi.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("patch pixels must lie in [0, 1]"));
        }
        Ok(Self {
            kind: PerturbationKind::Patch { rule },
            xi,
        })
    }

    /// Mid-gray `[channels, side, side]` patch.
    pub fn gray_patch(channels: usize, side: usize, rule: PlacementRule) -> Result<Self> {
        Self::patch(Tensor::full(&[channels, side, side], 0.5), rule)
    }

    pub fn kind(&self) -> PerturbationKind {
        self.kind
    }

    pub fn xi(&self) -> &Tensor {
        &self.xi
    }

    pub fn into_xi(self) -> Tensor {
        self.xi
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self.kind {
            PerturbationKind::Universal { epsilon } => Some(epsilon),
            PerturbationKind::Patch { .. } => None,
        }
    }

    /// True for a universal perturbation of all zeros, which leaves every
    /// image unchanged.
    pub fn is_identity(&self) -> bool {
        matches!(self.kind, PerturbationKind::Universal { .. }) && self.xi.data().iter().all(|&v| v == 0.0)
    }

    /// Perturbs a batch `[B, C, H, W]`. Patches get an independent placement
    /// per image, drawn from `rng` in batch order.
    pub fn apply_batch<R: Rng + ?Sized>(&self, images: &Tensor, rng: &mut R) -> Result<Tensor> {
        match self.kind {
            PerturbationKind::Universal { epsilon } => {
                if images.rank() != 4 {
                    return Err(Error::shape("expected a [B, C, H, W] batch"));
                }
                apply_universal(images, &self.xi, epsilon)
            }
            PerturbationKind::Patch { rule } => {
                let s = images.shape();
                if s.len() != 4 || s[1] != self.xi.shape()[0] {
                    return Err(Error::shape(format!(
                        "patch {:?} does not match batch {:?}",
                        self.xi.shape(),
                        s
                    )));
                }
                let (h, w, p) = (s[2], s[3], self.xi.shape()[1]);
                let mut out = images.clone();
                let stride = images.item_len();
                for chunk in out.data_mut().chunks_exact_mut(stride) {
                    let placement = rule.sample(h, w, rng);
                    let plan = overlay_taps(h, w, p, &placement)?;
                    paste(chunk, &self.xi, h * w, &plan);
                }
                Ok(out)
            }
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        match self.kind {
            PerturbationKind::Universal { epsilon } => {
                write_u32(w, 0)?;
                write_f32s(w, &[epsilon])?;
            }
            PerturbationKind::Patch { rule } => {
                write_u32(w, 1)?;
                write_f32s(w, &[rule.chi, rule.theta_max])?;
            }
        }
        write_u32(w, self.xi.rank() as u32)?;
        for &d in self.xi.shape() {
            write_u32(w, d as u32)?;
        }
        write_f32s(w, self.xi.data())
    }

    /// Reads a container. Values come back rounded to `f32` precision.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::format("not a perturbation file"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported perturbation version {version}")));
        }
        let kind = read_u32(r)?;
        let params = match kind {
            0 => read_f32s(r, 1)?,
            1 => read_f32s(r, 2)?,
            k => return Err(Error::format(format!("unknown perturbation kind {k}"))),
        };
        let rank = read_u32(r)? as usize;
        if rank != 3 {
            return Err(Error::format(format!("perturbation rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        if n == 0 || n > 1 << 28 {
            return Err(Error::format(format!("perturbation shape {shape:?}")));
        }
        let values = read_f32s(r, n)?;
        let xi = Tensor::new(shape, values).map_err(|e| Error::format(e.to_string()))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after perturbation"));
        }
        match kind {
            0 => Self::universal(xi, params[0]),
            _ => Self::patch(xi, PlacementRule::new(params[0], params[1])?),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

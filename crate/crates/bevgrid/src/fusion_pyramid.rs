//! Multi-resolution BEV decode with cross-branch modality fusion.
//!
//! Two task branches (detection and occupancy) each hold a three-level feature
//! pyramid at 1/2, 1/4, and 1/8 of full resolution. Decoding walks from the
//! coarsest level up: at each of three steps the branches exchange information
//! through a λ-weighted average, both are bilinearly upsampled ×2, and the
//! matching pyramid level is added as a skip connection (the final step has no
//! skip — there is no full-resolution level).
//!
//! The exchange at each step is simultaneous, computed from the pre-fusion
//! pair: `det' = (1-λ)·A_od(occ) + λ·det`, `occ' = (1-λ)·A_do(det) + λ·occ`,
//! where the adapters `A` are per-cell linear channel maps bridging the two
//! branches' channel widths. λ = 1 switches fusion off; that case is
//! short-circuited so a λ=1 decode is bit-identical to [`pyramid_decode`].

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Which way a fusion adapter carries features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterDirection {
    /// Occupancy-branch channels into the detection branch.
    OccToDet,
    /// Detection-branch channels into the occupancy branch.
    DetToOcc,
}

/// A per-cell linear channel map `(C_out, C_in)` bridging the branches.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionAdapter {
    pub weight: Array2<f64>,
    pub direction: AdapterDirection,
}

impl FusionAdapter {
    pub fn new(weight: Array2<f64>, direction: AdapterDirection) -> Result<Self> {
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("FusionAdapter", "weights must be finite"));
        }
        if weight.shape().contains(&0) {
            return Err(Error::shape(
                "FusionAdapter",
                format!("degenerate weight shape {:?}", weight.shape()),
            ));
        }
        Ok(Self { weight, direction })
    }

    /// Square identity map for matching channel widths.
    pub fn identity(channels: usize, direction: AdapterDirection) -> Self {
        Self {
            weight: Array2::eye(channels),
            direction,
        }
    }

    /// Apply the channel map at every spatial cell of a `(C_in, H, W)` plane.
    pub fn apply(&self, f: &Array3<f64>) -> Result<Array3<f64>> {
        let (c_in, h, w) = f.dim();
        if self.weight.dim().1 != c_in {
            return Err(Error::shape(
                "FusionAdapter",
                format!(
                    "adapter expects {} input channels, feature has {c_in}",
                    self.weight.dim().1
                ),
            ));
        }
        let flat = f.as_standard_layout();
        let flat = flat
            .view()
            .into_shape_with_order((c_in, h * w))
            .expect("standard layout reshape");
        let out = self.weight.dot(&flat);
        Ok(out
            .into_shape_with_order((self.weight.dim().0, h, w))
            .expect("standard layout reshape"))
    }
}

/// Fusion strength. λ is the weight a branch keeps on itself; 1 − λ is taken
/// from the other branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub lambda: f64,
}

impl FusionConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(
                "FusionConfig",
                format!("lambda must be in [0, 1], got {lambda}"),
            ));
        }
        Ok(Self { lambda })
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { lambda: 0.9 }
    }
}

/// An ordered three-level feature pyramid, finest first: levels at 1/2, 1/4,
/// and 1/8 of the full decode resolution. All levels share one channel count
/// and spatial dims halve exactly from level to level.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    levels: Vec<Array3<f64>>,
}

impl PyramidFeatures {
    pub fn new(levels: Vec<Array3<f64>>) -> Result<Self> {
        if levels.len() != 3 {
            return Err(Error::shape(
                "PyramidFeatures",
                format!("need exactly 3 levels, got {}", levels.len()),
            ));
        }
        let c = levels[0].dim().0;
        for (i, level) in levels.iter().enumerate() {
            let (lc, h, w) = level.dim();
            if lc != c {
                return Err(Error::shape(
                    "PyramidFeatures",
                    format!("level {i} has {lc} channels, level 0 has {c}"),
                ));
            }
            if h == 0 || w == 0 {
                return Err(Error::shape(
                    "PyramidFeatures",
                    format!("level {i} has empty spatial dims"),
                ));
            }
            if i > 0 {
                let (_, ph, pw) = levels[i - 1].dim();
                if ph != 2 * h || pw != 2 * w {
                    return Err(Error::shape(
                        "PyramidFeatures",
                        format!(
                            "level {i} is {h}x{w}, expected exactly half of {ph}x{pw}"
                        ),
                    ));
                }
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Array3<f64>] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].dim().0
    }
}

/// Bilinear upsampling by an integer factor, align-corners = false.
///
/// Output pixel `i` samples input coordinate `(i + 0.5)/factor - 0.5`; the four
/// neighbor weights come from the unclamped coordinate and indices clamp to the
/// edge, so constant planes are preserved and `factor = 1` is the identity.
pub fn upsample_bilinear(f: &Array3<f64>, factor: usize) -> Array3<f64> {
    assert!(factor >= 1, "upsample factor must be at least 1");
    let (c, h, w) = f.dim();
    let (oh, ow) = (h * factor, w * factor);
    // Per-axis source index pairs and blend weights, computed once.
    let axis_taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let x = (i as f64 + 0.5) / factor as f64 - 0.5;
                let x0 = x.floor();
                let frac = x - x0;
                let i0 = (x0 as i64).clamp(0, n_in as i64 - 1) as usize;
                let i1 = (x0 as i64 + 1).clamp(0, n_in as i64 - 1) as usize;
                (i0, i1, frac)
            })
            .collect()
    };
    let rows = axis_taps(h, oh);
    let cols = axis_taps(w, ow);
    let mut out = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                let top = f[[ci, r0, c0]] * (1.0 - fc) + f[[ci, r0, c1]] * fc;
                let bot = f[[ci, r1, c0]] * (1.0 - fc) + f[[ci, r1, c1]] * fc;
                out[[ci, oi, oj]] = top * (1.0 - fr) + bot * fr;
            }
        }
    }
    out
}

/// One simultaneous λ-weighted exchange between the branches.
///
/// Both outputs are computed from the pre-fusion inputs. λ = 1 returns the
/// inputs unchanged (bitwise), which is what makes a λ=1 pyramid decode
/// indistinguishable from a fusion-free one.
pub fn modality_fuse(
    f_det: &Array3<f64>,
    f_occ: &Array3<f64>,
    occ_to_det: &FusionAdapter,
    det_to_occ: &FusionAdapter,
    cfg: &FusionConfig,
) -> Result<(Array3<f64>, Array3<f64>)> {
    if occ_to_det.direction != AdapterDirection::OccToDet {
        return Err(Error::invalid(
            "modality_fuse",
            "first adapter must carry OccToDet",
        ));
    }
    if det_to_occ.direction != AdapterDirection::DetToOcc {
        return Err(Error::invalid(
            "modality_fuse",
            "second adapter must carry DetToOcc",
        ));
    }
    if f_det.dim().1 != f_occ.dim().1 || f_det.dim().2 != f_occ.dim().2 {
        return Err(Error::shape(
            "modality_fuse",
            format!(
                "spatial dims differ: {:?} vs {:?}",
                f_det.dim(),
                f_occ.dim()
            ),
        ));
    }
    if cfg.lambda == 1.0 {
        return Ok((f_det.clone(), f_occ.clone()));
    }
    let lam = cfg.lambda;
    let carried_to_det = occ_to_det.apply(f_occ)?;
    let carried_to_occ = det_to_occ.apply(f_det)?;
    if carried_to_det.dim() != f_det.dim() {
        return Err(Error::shape(
            "modality_fuse",
            format!(
                "occ->det adapter yields {:?}, detection branch is {:?}",
                carried_to_det.dim(),
                f_det.dim()
            ),
        ));
    }
    if carried_to_occ.dim() != f_occ.dim() {
        return Err(Error::shape(
            "modality_fuse",
            format!(
                "det->occ adapter yields {:?}, occupancy branch is {:?}",
                carried_to_occ.dim(),
                f_occ.dim()
            ),
        ));
    }
    let new_det = (1.0 - lam) * &carried_to_det + lam * f_det;
    let new_occ = (1.0 - lam) * &carried_to_occ + lam * f_occ;
    Ok((new_det, new_occ))
}

/// Fusion-free decode of one branch: start at the 1/8 level, then three times
/// upsample ×2 and add the next-finer skip level when one exists.
pub fn pyramid_decode(pyr: &PyramidFeatures) -> Array3<f64> {
    let mut state = pyr.levels[2].clone();
    for step in 0..3 {
        state = upsample_bilinear(&state, 2);
        if step < 2 {
            state += &pyr.levels[1 - step];
        }
    }
    state
}

/// Full two-branch decode with a fusion exchange before every upsample.
///
/// `adapters` holds one (occ→det, det→occ) pair per fuse step, coarsest step
/// first: `adapters[0]` acts at 1/8 resolution, `adapters[1]` at 1/4,
/// `adapters[2]` at 1/2. Returns the full-resolution (detection, occupancy)
/// features.
pub fn pyramid_fuse(
    pyr_det: &PyramidFeatures,
    pyr_occ: &PyramidFeatures,
    adapters: &[(FusionAdapter, FusionAdapter)],
    cfg: &FusionConfig,
) -> Result<(Array3<f64>, Array3<f64>)> {
    if adapters.len() != 3 {
        return Err(Error::shape(
            "pyramid_fuse",
            format!("need 3 adapter pairs, got {}", adapters.len()),
        ));
    }
    for (a, b) in pyr_det.levels().iter().zip(pyr_occ.levels()) {
        if (a.dim().1, a.dim().2) != (b.dim().1, b.dim().2) {
            return Err(Error::shape(
                "pyramid_fuse",
                "branch pyramids disagree on level spatial dims",
            ));
        }
    }
    let mut det = pyr_det.levels[2].clone();
    let mut occ = pyr_occ.levels[2].clone();
    for step in 0..3 {
        let (d, o) = modality_fuse(&det, &occ, &adapters[step].0, &adapters[step].1, cfg)?;
        det = upsample_bilinear(&d, 2);
        occ = upsample_bilinear(&o, 2);
        if step < 2 {
            det += &pyr_det.levels[1 - step];
            occ += &pyr_occ.levels[1 - step];
        }
    }
    Ok((det, occ))
}

//! Affine-invariant fusion of the regressed initial disparity with the
//! monocular relative depth.
//!
//! Both fields are normalized by median and mean absolute deviation, which
//! cancels any positive affine transform; the normalized mono field is then
//! projected into the disparity frame using the initial disparity's
//! statistics, and a warp-based confidence head blends the two per pixel.
//! All of it stays on the tape: the median/MAD statistics carry subgradients
//! so the blend is differentiable end to end.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ConvParam, ParamStore};
use crate::tensor::{Real, TapeOf, TensorId};

/// Clamp floor for the spread so constant fields normalize to zeros.
pub const SPREAD_EPS: f32 = 1e-6;

/// Median / mean-absolute-deviation statistics of one field, kept as scalar
/// tensors so downstream projection stays differentiable.
#[derive(Debug, Clone, Copy)]
pub struct AffineStats {
    /// Median, shape [1].
    pub t: TensorId,
    /// Mean absolute deviation from the median (unclamped), shape [1].
    pub s: TensorId,
}

/// Normalize a field into the shared affine-invariant frame:
/// (d - median(d)) / max(mad(d), eps). Returns the normalized field and the
/// raw statistics.
pub fn normalize_affine<S: Real>(
    tape: &mut TapeOf<S>,
    d: TensorId,
) -> Result<(TensorId, AffineStats)> {
    if tape.data(d).iter().any(|v| !v.is_finite()) {
        return Err(Error::data("normalize_affine: non-finite input".to_string()));
    }
    let n = tape.numel(d);
    if n == 0 {
        return Err(Error::contract("normalize_affine: empty field".to_string()));
    }
    let t = tape.median(d)?;
    let centered = tape.sub(d, t)?;
    let abs = tape.abs(centered);
    let total = tape.sum(abs);
    let s = tape.scale(total, 1.0 / n as f32);
    let s_safe = tape.clamp_min(s, SPREAD_EPS);
    let d_hat = tape.div(centered, s_safe)?;
    Ok((d_hat, AffineStats { t, s }))
}

/// Map a normalized field into the frame described by `stats`:
/// s * d_hat + t.
pub fn project<S: Real>(
    tape: &mut TapeOf<S>,
    d_hat: TensorId,
    stats: &AffineStats,
) -> Result<TensorId> {
    let scaled = tape.mul(d_hat, stats.s)?;
    tape.add(scaled, stats.t)
}

/// Confidence head: warp the right feature map by the candidate disparity,
/// concatenate with the left features, and squash a two-layer conv block
/// through a sigmoid. Output in (0,1), shape [1,H,W].
pub struct ConfidenceHead {
    c1: ConvParam,
    c2: ConvParam,
}

impl ConfidenceHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, feat_ch: usize) -> Self {
        ConfidenceHead {
            c1: store.conv2d(rng, "aif.confidence1", 32, 2 * feat_ch, 3, true),
            c2: store.conv2d(rng, "aif.confidence2", 1, 32, 1, true),
        }
    }

    pub fn confidence<S: Real>(
        &self,
        tape: &mut TapeOf<S>,
        bound: &Bound,
        d0: TensorId,
        f_left: TensorId,
        f_right: TensorId,
    ) -> Result<TensorId> {
        let ds = tape.shape(d0).to_vec();
        let fs = tape.shape(f_left).to_vec();
        if ds.len() != 3 || ds[0] != 1 || fs.len() != 3 || ds[1] != fs[1] || ds[2] != fs[2] {
            return Err(Error::contract(format!(
                "confidence: disparity {ds:?} and features {fs:?} must share HxW"
            )));
        }
        let (h, w) = (ds[1], ds[2]);
        let col: Vec<f32> = (0..h * w).map(|i| (i % w) as f32).collect();
        let col = tape.constant_f32(vec![h, w], &col)?;
        let d2 = tape.reshape(d0, vec![h, w])?;
        let coords = tape.sub(col, d2)?;
        let warped = tape.gather_horizontal_chw(f_right, coords)?;
        let cat = tape.concat(&[f_left, warped], 0)?;
        let hid = tape.conv2d_chw(cat, bound.get(self.c1.w), bound.get(self.c1.b), 1, 1)?;
        let hid = tape.relu(hid);
        let logit = tape.conv2d_chw(hid, bound.get(self.c2.w), bound.get(self.c2.b), 1, 0)?;
        Ok(tape.sigmoid(logit))
    }
}

/// Per-pixel blend: c * d0 + (1 - c) * d_mono_proj.
pub fn fuse<S: Real>(
    tape: &mut TapeOf<S>,
    d0: TensorId,
    d_mono_proj: TensorId,
    c: TensorId,
) -> Result<TensorId> {
    if tape.shape(d0) != tape.shape(d_mono_proj) || tape.shape(d0) != tape.shape(c) {
        return Err(Error::contract(format!(
            "fuse: shapes differ: {:?} / {:?} / {:?}",
            tape.shape(d0),
            tape.shape(d_mono_proj),
            tape.shape(c)
        )));
    }
    let a = tape.mul(c, d0)?;
    let nc = tape.scale(c, -1.0);
    let nc = tape.offset(nc, 1.0);
    let b = tape.mul(nc, d_mono_proj)?;
    tape.add(a, b)
}

//! Cost volume construction, aggregation, initial regression and lookup.
//!
//! A group-wise correlation volume over candidate disparities is filtered by
//! a residual 3-d aggregation block into the geometry volume; an all-pair
//! correlation volume captures global column similarity. Both are pooled
//! along their candidate axis into pyramids; the recurrent stage samples a
//! small window from every level around the current disparity.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ConvParam, ParamStore};
use crate::tensor::{Real, TapeOf, TensorId};

/// Group-wise correlation volume [G, D/4, H/4, W/4]; entry (g,d,h,w) is the
/// scaled inner product of the g-th left feature group at (h,w) with the
/// right group at (h, w-d).
pub fn build_group_corr<S: Real>(
    tape: &mut TapeOf<S>,
    f_left: TensorId,
    f_right: TensorId,
    groups: usize,
    max_disp_q: usize,
) -> Result<TensorId> {
    tape.group_corr(f_left, f_right, groups, max_disp_q)
}

/// All-pair correlation volume [1, W/4, H/4, W/4]; entry (w',h,w) is the
/// unscaled inner product of left (h,w) with right (h,w').
pub fn build_allpair_corr<S: Real>(
    tape: &mut TapeOf<S>,
    f_left: TensorId,
    f_right: TensorId,
) -> Result<TensorId> {
    tape.allpair_corr(f_left, f_right)
}

/// Residual two-conv 3-d aggregation: v + conv2(relu(conv1(v))). With zero
/// weights the block is the identity.
pub struct Aggregator3d {
    c1: ConvParam,
    c2: ConvParam,
}

impl Aggregator3d {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, groups: usize) -> Self {
        Aggregator3d {
            c1: store.conv3d(rng, "aggregation.conv1", groups, groups, 3),
            c2: store.conv3d_zero("aggregation.conv2", groups, groups, 3),
        }
    }

    pub fn aggregate<S: Real>(
        &self,
        tape: &mut TapeOf<S>,
        bound: &Bound,
        v_g: TensorId,
    ) -> Result<TensorId> {
        let h = tape.conv3d(v_g, bound.get(self.c1.w), bound.get(self.c1.b), 1)?;
        let h = tape.relu(h);
        let h = tape.conv3d(h, bound.get(self.c2.w), bound.get(self.c2.b), 1)?;
        tape.add(v_g, h)
    }
}

/// Initial disparity from the geometry volume: collapse groups by mean, then
/// softmax-expectation over the disparity axis. Output [1, H/4, W/4] in
/// [0, D/4 - 1].
pub fn regress_init<S: Real>(tape: &mut TapeOf<S>, v_e: TensorId) -> Result<TensorId> {
    let s = tape.shape(v_e).to_vec();
    if s.len() != 4 {
        return Err(Error::contract(format!("regress_init: expected [G,D,H,W], got {s:?}")));
    }
    let mean = tape.mean_axis0(v_e)?;
    let d0 = tape.soft_argmax(mean)?;
    tape.reshape(d0, vec![1, s[2], s[3]])
}

/// Candidate-axis pyramids served to the lookup. The geometry volume enters
/// group-meaned so each level contributes one channel per offset.
pub struct VolumePyramids {
    /// Level l: [D4 / 2^l, H4, W4].
    pub ve_levels: Vec<TensorId>,
    /// Level l: [W4 / 2^l, H4, W4].
    pub va_levels: Vec<TensorId>,
}

/// Pool the disparity axis of the geometry volume and the matching-column
/// axis of the all-pair volume `levels` times (stride-2 mean).
pub fn build_pyramids<S: Real>(
    tape: &mut TapeOf<S>,
    v_e: TensorId,
    v_a: TensorId,
    levels: usize,
) -> Result<VolumePyramids> {
    if levels == 0 {
        return Err(Error::contract("build_pyramids: levels must be >= 1"));
    }
    let es = tape.shape(v_e).to_vec();
    let as_ = tape.shape(v_a).to_vec();
    if es.len() != 4 || as_.len() != 4 || as_[0] != 1 {
        return Err(Error::contract(format!(
            "build_pyramids: expected [G,D,H,W] and [1,W,H,W], got {es:?} and {as_:?}"
        )));
    }
    let div = 1usize << (levels - 1);
    if es[1] % div != 0 || as_[1] % div != 0 {
        return Err(Error::contract(format!(
            "build_pyramids: candidate axes ({}, {}) must be divisible by 2^(levels-1) = {div}",
            es[1], as_[1]
        )));
    }
    let ve0 = tape.mean_axis0(v_e)?;
    let va0 = tape.reshape(v_a, as_[1..].to_vec())?;
    let mut ve_levels = vec![ve0];
    let mut va_levels = vec![va0];
    for l in 1..levels {
        let e = tape.pool_axis0(ve_levels[l - 1])?;
        let a = tape.pool_axis0(va_levels[l - 1])?;
        ve_levels.push(e);
        va_levels.push(a);
    }
    Ok(VolumePyramids { ve_levels, va_levels })
}

/// Per-pixel local cost features around disparity `d_k` [1,H4,W4]: each
/// pyramid level of the geometry volume is sampled at d_k/2^l + o and of the
/// all-pair volume at (w - d_k)/2^l + o for o in -radius..=radius, linear
/// interpolation with zero padding. Channels: 2 * levels * (2*radius + 1).
pub fn lookup<S: Real>(
    tape: &mut TapeOf<S>,
    pyramids: &VolumePyramids,
    d_k: TensorId,
    radius: usize,
) -> Result<TensorId> {
    let ds = tape.shape(d_k).to_vec();
    if ds.len() != 3 || ds[0] != 1 {
        return Err(Error::contract(format!("lookup: expected d_k [1,H,W], got {ds:?}")));
    }
    let (h, w) = (ds[1], ds[2]);
    let d2 = tape.reshape(d_k, vec![h, w])?;
    let col: Vec<f32> = (0..h * w).map(|i| (i % w) as f32).collect();
    let col = tape.constant_f32(vec![h, w], &col)?;
    let mut parts = Vec::new();
    for (l, &ve) in pyramids.ve_levels.iter().enumerate() {
        let coords = tape.scale(d2, 1.0 / (1 << l) as f32);
        parts.push(tape.sample_offsets(ve, coords, radius)?);
    }
    for (l, &va) in pyramids.va_levels.iter().enumerate() {
        let c = tape.sub(col, d2)?;
        let coords = tape.scale(c, 1.0 / (1 << l) as f32);
        parts.push(tape.sample_offsets(va, coords, radius)?);
    }
    tape.concat(&parts, 0)
}

/// The full volume set built once per forward pass.
pub struct CostVolumeSet {
    pub v_g: TensorId,
    pub v_e: TensorId,
    pub v_a: TensorId,
    pub pyramids: VolumePyramids,
}

#[allow(clippy::too_many_arguments)]
pub fn build_cost_volumes<S: Real>(
    tape: &mut TapeOf<S>,
    bound: &Bound,
    aggregator: &Aggregator3d,
    f_left: TensorId,
    f_right: TensorId,
    groups: usize,
    max_disp_q: usize,
    levels: usize,
) -> Result<CostVolumeSet> {
    let v_g = build_group_corr(tape, f_left, f_right, groups, max_disp_q)?;
    let v_e = aggregator.aggregate(tape, bound, v_g)?;
    let v_a = build_allpair_corr(tape, f_left, f_right)?;
    let pyramids = build_pyramids(tape, v_e, v_a, levels)?;
    Ok(CostVolumeSet { v_g, v_e, v_a, pyramids })
}

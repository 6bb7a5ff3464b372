//! Two feature branches feeding the matcher.
//!
//! The stereo branch is a small Siamese strided-conv pyramid producing
//! features at 1/4, 1/8, 1/16 and 1/32 resolution; left and right images go
//! through identical weights. The mono branch is a fixed random conv net that
//! stands in for a monocular relative-depth prior: it emits a full-resolution
//! relative depth and a 1/4-resolution feature map, both detached from the
//! tape (the branch stays frozen during training).

use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::{Bound, ConvParam, ParamStore};
use crate::tensor::{Real, ResampleMode, TapeOf, TensorId};

/// Everything the downstream pipeline needs from the two branches.
pub struct FeatureBundle {
    /// Four left pyramid levels at [C_i, H/2^(i+2), W/2^(i+2)].
    pub stereo_left: [TensorId; 4],
    pub stereo_right: [TensorId; 4],
    /// [C_M, H/4, W/4], detached.
    pub mono_feature: TensorId,
    /// [1, H, W] relative depth, detached.
    pub relative_depth: TensorId,
}

pub struct StereoEncoder {
    stem1: ConvParam,
    stem2: ConvParam,
    down: [ConvParam; 3],
}

impl StereoEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &Config) -> Self {
        let c = cfg.feat_channels;
        let half = (c[0] / 2).max(8);
        StereoEncoder {
            stem1: store.conv2d(rng, "stereo_encoder.stem1", half, 3, 3, true),
            stem2: store.conv2d(rng, "stereo_encoder.stem2", c[0], half, 3, true),
            down: [
                store.conv2d(rng, "stereo_encoder.down1", c[1], c[0], 3, true),
                store.conv2d(rng, "stereo_encoder.down2", c[2], c[1], 3, true),
                store.conv2d(rng, "stereo_encoder.down3", c[3], c[2], 3, true),
            ],
        }
    }

    /// Multi-level features for one [3,H,W] view. Weight sharing makes the
    /// call symmetric in left/right.
    pub fn extract<S: Real>(
        &self,
        tape: &mut TapeOf<S>,
        bound: &Bound,
        image: TensorId,
    ) -> Result<[TensorId; 4]> {
        let s = tape.shape(image);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::contract(format!("extract_stereo: expected [3,H,W], got {s:?}")));
        }
        if s[1] % 32 != 0 || s[2] % 32 != 0 {
            return Err(Error::contract(format!(
                "extract_stereo: dims {}x{} must be divisible by 32",
                s[1], s[2]
            )));
        }
        let conv_s2 = |tape: &mut TapeOf<S>, x, p: ConvParam| -> Result<TensorId> {
            let y = tape.conv2d_chw(x, bound.get(p.w), bound.get(p.b), 2, 1)?;
            Ok(tape.relu(y))
        };
        let x = conv_s2(tape, image, self.stem1)?;
        let f0 = conv_s2(tape, x, self.stem2)?;
        let f1 = conv_s2(tape, f0, self.down[0])?;
        let f2 = conv_s2(tape, f1, self.down[1])?;
        let f3 = conv_s2(tape, f2, self.down[2])?;
        Ok([f0, f1, f2, f3])
    }
}

pub struct MonoBranch {
    conv1: ConvParam,
    conv2: ConvParam,
    feat: ConvParam,
    depth1: ConvParam,
    depth2: ConvParam,
}

impl MonoBranch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &Config) -> Self {
        let cm = cfg.mono_channels;
        MonoBranch {
            conv1: store.conv2d(rng, "mono_branch.conv1", 16, 3, 3, false),
            conv2: store.conv2d(rng, "mono_branch.conv2", cm, 16, 3, false),
            feat: store.conv2d(rng, "mono_branch.feat", cm, cm, 3, false),
            depth1: store.conv2d(rng, "mono_branch.depth1", 16, cm, 3, false),
            depth2: store.conv2d(rng, "mono_branch.depth2", 1, 16, 1, false),
        }
    }

    /// Relative depth (full resolution) and mono feature (1/4 resolution).
    /// `depth_override` substitutes the relative-depth output (oracle mode);
    /// either way both outputs are detached at the module boundary.
    pub fn extract<S: Real>(
        &self,
        tape: &mut TapeOf<S>,
        bound: &Bound,
        image: TensorId,
        depth_override: Option<&[f32]>,
    ) -> Result<(TensorId, TensorId)> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] % 32 != 0 || s[2] % 32 != 0 {
            return Err(Error::contract(format!("extract_mono: bad image shape {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let conv = |tape: &mut TapeOf<S>, x, p: ConvParam, stride| -> Result<TensorId> {
            let y = tape.conv2d_chw(x, bound.get(p.w), bound.get(p.b), stride, 1)?;
            Ok(tape.relu(y))
        };
        let x = conv(tape, image, self.conv1, 2)?;
        let base = conv(tape, x, self.conv2, 2)?;
        let feat = tape.conv2d_chw(base, bound.get(self.feat.w), bound.get(self.feat.b), 1, 1)?;
        let feat = tape.detach(feat);

        let depth = match depth_override {
            Some(values) => {
                if values.len() != h * w {
                    return Err(Error::contract(format!(
                        "extract_mono: depth override has {} values, expected {}",
                        values.len(),
                        h * w
                    )));
                }
                tape.constant_f32(vec![1, h, w], values)?
            }
            None => {
                let d = conv(tape, base, self.depth1, 1)?;
                let d =
                    tape.conv2d_chw(d, bound.get(self.depth2.w), bound.get(self.depth2.b), 1, 0)?;
                let d = tape.resample(d, ResampleMode::BilinearUp4)?;
                tape.detach(d)
            }
        };
        Ok((depth, feat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_rng;
    use crate::tensor::{Tape, TensorOf};
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.feat_channels = [8, 8, 8, 8];
        cfg.mono_channels = 8;
        cfg
    }

    fn rand_image(seed: u64, h: usize, w: usize) -> TensorOf<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorOf::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn level_shapes_follow_pyramid_formula() {
        let cfg = {
            let mut c = Config::default();
            c.feat_channels = [48, 64, 96, 128];
            c
        };
        let mut store = ParamStore::new();
        let mut rng = init_rng(0);
        let enc = StereoEncoder::new(&mut store, &mut rng, &cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.constant(rand_image(1, 64, 64));
        let levels = enc.extract(&mut tape, &bound, img).unwrap();
        let expect = [[48, 16, 16], [64, 8, 8], [96, 4, 4], [128, 2, 2]];
        for (lvl, exp) in levels.iter().zip(expect.iter()) {
            assert_eq!(tape.shape(*lvl), exp);
        }
    }

    #[test]
    fn siamese_left_right_identical() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = init_rng(3);
        let enc = StereoEncoder::new(&mut store, &mut rng, &cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.constant(rand_image(2, 32, 64));
        let as_left = enc.extract(&mut tape, &bound, img).unwrap();
        let as_right = enc.extract(&mut tape, &bound, img).unwrap();
        for (l, r) in as_left.iter().zip(as_right.iter()) {
            assert_eq!(tape.data(*l), tape.data(*r));
        }
    }

    #[test]
    fn indivisible_dims_are_contract_errors() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = init_rng(0);
        let enc = StereoEncoder::new(&mut store, &mut rng, &cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.constant(TensorOf::zeros(vec![3, 30, 64]));
        assert!(enc.extract(&mut tape, &bound, img).is_err());
    }

    #[test]
    fn encoder_gets_gradients_from_correlation_loss() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = init_rng(5);
        let enc = StereoEncoder::new(&mut store, &mut rng, &cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let left = tape.constant(rand_image(10, 32, 64));
        let right = tape.constant(rand_image(11, 32, 64));
        let fl = enc.extract(&mut tape, &bound, left).unwrap();
        let fr = enc.extract(&mut tape, &bound, right).unwrap();
        let v = tape.group_corr(fl[0], fr[0], 2, 4).unwrap();
        let v = tape.sigmoid(v);
        let loss = tape.sum(v);
        tape.backward(loss).unwrap();
        let grads = store.gradients(&tape, &bound);
        let nonzero = grads
            .iter()
            .flatten()
            .any(|g| g.iter().any(|v| *v != 0.0));
        assert!(nonzero, "correlation loss must reach encoder weights");
    }

    #[test]
    fn mono_outputs_detached_and_frozen() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = init_rng(7);
        let mono = MonoBranch::new(&mut store, &mut rng, &cfg);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.constant(rand_image(20, 32, 64));
        let (depth, feat) = mono.extract(&mut tape, &bound, img, None).unwrap();
        assert_eq!(tape.shape(depth), &[1, 32, 64]);
        assert_eq!(tape.shape(feat), &[8, 8, 16]);
        assert!(!tape.tensor(depth).requires_grad);
        assert!(!tape.tensor(feat).requires_grad);
        // drive a loss through both outputs; no mono parameter may see a grad
        let a = tape.sum(depth);
        let b = tape.sum(feat);
        let loss = tape.add(a, b).unwrap();
        tape.backward(loss).unwrap();
        assert!(store.gradients(&tape, &bound).iter().all(|g| g.is_none()));
    }

    #[test]
    fn mono_depth_finite_over_seeds() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = init_rng(9);
        let mono = MonoBranch::new(&mut store, &mut rng, &cfg);
        for seed in 0..20 {
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let img = tape.constant(rand_image(100 + seed, 32, 32));
            let (depth, _) = mono.extract(&mut tape, &bound, img, None).unwrap();
            assert!(tape.data(depth).iter().all(|v| v.is_finite()), "seed {seed}");
        }
    }

    #[test]
    fn mono_is_deterministic() {
        let run = || {
            let cfg = small_cfg();
            let mut store = ParamStore::new();
            let mut rng = init_rng(13);
            let mono = MonoBranch::new(&mut store, &mut rng, &cfg);
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let img = tape.constant(rand_image(30, 32, 32));
            let (depth, _) = mono.extract(&mut tape, &bound, img, None).unwrap();
            tape.data(depth).to_vec()
        };
        assert_eq!(run(), run());
    }
}

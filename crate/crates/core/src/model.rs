//! End-to-end matcher: features -> cost volumes -> fused initialization ->
//! recurrent refinement -> full-resolution disparity.

use rand::Rng;

use crate::aif::{self, AffineStats, ConfidenceHead};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::{MonoBranch, StereoEncoder};
use crate::params::{Bound, ParamStore};
use crate::pru::{upsample_full, PromptMode, Pru};
use crate::synthetic::StereoSample;
use crate::tensor::{Real, ResampleMode, TapeOf, TensorId, TensorOf};
use crate::volume::{build_cost_volumes, regress_init, Aggregator3d};

/// Handles into one forward pass's tape.
pub struct Forward {
    /// Initial disparity regressed from the geometry volume, [1,H/4,W/4].
    pub d_init: TensorId,
    /// Projected mono disparity, [1,H/4,W/4].
    pub d_mono_proj: TensorId,
    /// Confidence in the initial disparity, (0,1).
    pub confidence: TensorId,
    /// Fused starting disparity for refinement.
    pub d_fused: TensorId,
    /// Refinement iterates d_1..d_K at quarter resolution.
    pub iterates: Vec<TensorId>,
    /// Initial disparity at full resolution (for the loss).
    pub d_init_full: TensorId,
    /// Every iterate upsampled to full resolution.
    pub iterates_full: Vec<TensorId>,
    /// Statistics used by the projection.
    pub stats_init: AffineStats,
    pub stats_mono: AffineStats,
}

impl Forward {
    pub fn final_full(&self) -> TensorId {
        *self.iterates_full.last().expect("at least one iterate")
    }
}

pub struct Model {
    pub cfg: Config,
    pub store: ParamStore,
    encoder: StereoEncoder,
    mono: MonoBranch,
    aggregator: Aggregator3d,
    confidence: ConfidenceHead,
    pub pru: Pru,
}

impl Model {
    /// Build a model with freshly initialized weights (deterministic in
    /// `cfg.seed`).
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = crate::params::init_rng(cfg.seed.wrapping_add(0x5EED));
        let encoder = StereoEncoder::new(&mut store, &mut rng, &cfg);
        let mono = MonoBranch::new(&mut store, &mut rng, &cfg);
        let aggregator = Aggregator3d::new(&mut store, &mut rng, cfg.groups);
        let confidence = ConfidenceHead::new(&mut store, &mut rng, cfg.feat_channels[0]);
        let pru = Pru::new(&mut store, &mut rng, &cfg);
        Ok(Model { cfg, store, encoder, mono, aggregator, confidence, pru })
    }

    pub fn bind<S: Real>(&self, tape: &mut TapeOf<S>) -> Bound {
        self.store.bind(tape)
    }

    pub fn bind_frozen<S: Real>(&self, tape: &mut TapeOf<S>) -> Bound {
        self.store.bind_frozen(tape)
    }

    /// Run the full pipeline on one [3,H,W] pair already on the tape.
    ///
    /// `mono_override` replaces the mono branch's relative depth (full
    /// resolution, H*W values). `iterations` is the refinement count;
    /// `prompts` selects real or zeroed prompt injection.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Real>(
        &self,
        tape: &mut TapeOf<S>,
        bound: &Bound,
        left: TensorId,
        right: TensorId,
        mono_override: Option<&[f32]>,
        iterations: usize,
        prompts: PromptMode,
    ) -> Result<Forward> {
        let shape = tape.shape(left).to_vec();
        if shape != tape.shape(right) {
            return Err(Error::contract(format!(
                "forward: left {:?} and right {:?} differ",
                shape,
                tape.shape(right)
            )));
        }
        let d4 = self.cfg.max_disparity / 4;

        // two branches
        let f_left = self.encoder.extract(tape, bound, left)?;
        let f_right = self.encoder.extract(tape, bound, right)?;
        let (rel_depth, f_mono) = self.mono.extract(tape, bound, left, mono_override)?;

        // cost volumes and initial disparity
        let volumes = build_cost_volumes(
            tape,
            bound,
            &self.aggregator,
            f_left[0],
            f_right[0],
            self.cfg.groups,
            d4,
            self.cfg.lookup_levels,
        )?;
        let d_init = regress_init(tape, volumes.v_e)?;

        // affine-invariant fusion of the mono prior
        let mono_q = tape.resample(rel_depth, ResampleMode::AvgPoolDown2)?;
        let mono_q = tape.resample(mono_q, ResampleMode::AvgPoolDown2)?;
        let (mono_hat, stats_mono) = aif::normalize_affine(tape, mono_q)?;
        let (_, stats_init) = aif::normalize_affine(tape, d_init)?;
        let d_mono_proj = aif::project(tape, mono_hat, &stats_init)?;
        let confidence =
            self.confidence.confidence(tape, bound, d_init, f_left[0], f_right[0])?;
        let d_fused = aif::fuse(tape, d_init, d_mono_proj, confidence)?;

        // recurrent refinement
        let state = self.pru.init_hidden(tape, bound, &f_left, &f_right, d_init)?;
        let fm_static = self.pru.structure_static(tape, bound, f_mono)?;
        let iterates = self.pru.refine(
            tape,
            bound,
            state,
            &volumes.pyramids,
            self.cfg.lookup_radius,
            fm_static,
            mono_hat,
            d_fused,
            iterations,
            prompts,
        )?;

        let d_init_full = upsample_full(tape, d_init)?;
        let iterates_full = iterates
            .iter()
            .map(|&d| upsample_full(tape, d))
            .collect::<Result<Vec<_>>>()?;

        Ok(Forward {
            d_init,
            d_mono_proj,
            confidence,
            d_fused,
            iterates,
            d_init_full,
            iterates_full,
            stats_init,
            stats_mono,
        })
    }

    /// Forward pass on a sample: loads the images as constants and, in
    /// oracle-mono mode, derives the override from the ground truth.
    pub fn forward_sample<S: Real>(
        &self,
        tape: &mut TapeOf<S>,
        bound: &Bound,
        sample: &StereoSample,
        iterations: usize,
        prompts: PromptMode,
    ) -> Result<Forward> {
        let left = tape.constant(TensorOf::from_f32(
            sample.left.shape.clone(),
            &sample.left.data,
        )?);
        let right = tape.constant(TensorOf::from_f32(
            sample.right.shape.clone(),
            &sample.right.data,
        )?);
        let oracle = if self.cfg.mono_oracle {
            Some(oracle_mono(&self.cfg, sample))
        } else {
            None
        };
        self.forward(tape, bound, left, right, oracle.as_deref(), iterations, prompts)
    }

    /// Inference: full-resolution disparity for a left/right pair.
    pub fn infer(&self, left: &crate::Tensor, right: &crate::Tensor, iterations: usize) -> Result<crate::Tensor> {
        let mut tape = TapeOf::<f32>::new();
        let bound = self.bind_frozen(&mut tape);
        let l = tape.constant(left.clone());
        let r = tape.constant(right.clone());
        let fwd = self.forward(&mut tape, &bound, l, r, None, iterations, PromptMode::Normal)?;
        let out = fwd.final_full();
        crate::Tensor::new(tape.shape(out).to_vec(), tape.data(out).to_vec())
    }
}

/// Oracle relative depth: positive affine transform of the ground-truth
/// disparity plus Gaussian noise; deterministic in the sample's seed.
pub fn oracle_mono(cfg: &Config, sample: &StereoSample) -> Vec<f32> {
    let mut rng = crate::params::init_rng(sample.seed.wrapping_mul(0x9E3779B9).wrapping_add(17));
    let a = rng.random_range(0.5..2.0f32);
    let b = rng.random_range(-5.0..5.0f32);
    let sigma = cfg.mono_oracle_noise;
    sample
        .disparity_gt
        .data
        .iter()
        .map(|&d| {
            let noise: f32 = rng.random::<f32>() * 2.0 - 1.0;
            a * d + b + sigma * noise * 1.7320508 // uniform with matched variance
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate;
    use crate::tensor::gradcheck::check_gradients;
    use crate::tensor::Tape;

    fn jostle(model: &mut Model, seed: u64) {
        let mut rng = crate::params::init_rng(seed);
        for i in 0..model.store.len() {
            if model.store.entries()[i].trainable {
                for v in model.store.data_mut(i).iter_mut() {
                    *v += 0.05 * (rng.random::<f32>() - 0.5);
                }
            }
        }
    }

    pub(crate) fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.feat_channels = [8, 8, 8, 8];
        cfg.mono_channels = 8;
        cfg.hidden_channels = 8;
        cfg.prompt_channels = 8;
        cfg.groups = 2;
        cfg.max_disparity = 16;
        cfg.lookup_levels = 2;
        cfg.lookup_radius = 1;
        cfg.crop_height = 32;
        cfg.crop_width = 64;
        cfg.gen_max_disp = 10.0;
        cfg.iterations_train = 2;
        cfg
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg).unwrap();
        let sample = generate(64, 32, 3, 10.0, 5).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let bound = model.bind_frozen(&mut tape);
            let fwd = model
                .forward_sample(&mut tape, &bound, &sample, 2, PromptMode::Normal)
                .unwrap();
            assert_eq!(tape.shape(fwd.d_init), &[1, 8, 16]);
            assert_eq!(tape.shape(fwd.d_fused), &[1, 8, 16]);
            assert_eq!(tape.shape(fwd.confidence), &[1, 8, 16]);
            assert_eq!(fwd.iterates.len(), 2);
            assert_eq!(tape.shape(fwd.d_init_full), &[1, 32, 64]);
            assert_eq!(tape.shape(fwd.final_full()), &[1, 32, 64]);
            tape.data(fwd.final_full()).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn initial_disparity_within_candidate_range() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg).unwrap();
        let sample = generate(64, 32, 2, 10.0, 9).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let fwd = model
            .forward_sample(&mut tape, &bound, &sample, 1, PromptMode::Normal)
            .unwrap();
        let d4 = model.cfg.max_disparity as f32 / 4.0;
        assert!(tape.data(fwd.d_init).iter().all(|&v| (0.0..=d4 - 1.0).contains(&v)));
        // fusion betweenness holds pixelwise
        let d0 = tape.data(fwd.d_init);
        let dm = tape.data(fwd.d_mono_proj);
        let df = tape.data(fwd.d_fused);
        for i in 0..d0.len() {
            let (lo, hi) = (d0[i].min(dm[i]), d0[i].max(dm[i]));
            assert!(df[i] >= lo - 1e-4 && df[i] <= hi + 1e-4);
        }
    }

    #[test]
    fn zero_init_prompt_conv_matches_zeroed_prompts_bit_exactly() {
        let mut cfg = tiny_cfg();
        cfg.zero_init_prompt_conv = true;
        let model = Model::new(cfg).unwrap();
        let sample = generate(64, 32, 3, 10.0, 21).unwrap();
        let run = |prompts: PromptMode| {
            let mut tape = Tape::new();
            let bound = model.bind_frozen(&mut tape);
            let fwd = model.forward_sample(&mut tape, &bound, &sample, 3, prompts).unwrap();
            fwd.iterates
                .iter()
                .map(|&d| tape.data(d).to_vec())
                .collect::<Vec<_>>()
        };
        let with = run(PromptMode::Normal);
        let without = run(PromptMode::Zeroed);
        for (k, (a, b)) in with.iter().zip(without.iter()).enumerate() {
            assert!(
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "iterate {k} differs"
            );
        }
    }

    #[test]
    fn without_zero_init_prompts_do_act() {
        let cfg = tiny_cfg();
        let mut model = Model::new(cfg).unwrap();
        jostle(&mut model, 5);
        let model = model;
        let sample = generate(64, 32, 3, 10.0, 21).unwrap();
        let run = |prompts: PromptMode| {
            let mut tape = Tape::new();
            let bound = model.bind_frozen(&mut tape);
            let fwd = model.forward_sample(&mut tape, &bound, &sample, 2, prompts).unwrap();
            tape.data(fwd.final_full()).to_vec()
        };
        assert_ne!(run(PromptMode::Normal), run(PromptMode::Zeroed));
    }

    #[test]
    fn merged_prompt_variant_runs_and_differs() {
        let base = tiny_cfg();
        let mut merged = tiny_cfg();
        merged.merged_hidden_prompt_conv = true;
        let sample = generate(64, 32, 3, 10.0, 33).unwrap();
        let run = |cfg: Config| {
            let mut model = Model::new(cfg).unwrap();
            jostle(&mut model, 6);
            let model = model;
            let mut tape = Tape::new();
            let bound = model.bind_frozen(&mut tape);
            let fwd = model
                .forward_sample(&mut tape, &bound, &sample, 2, PromptMode::Normal)
                .unwrap();
            tape.data(fwd.final_full()).to_vec()
        };
        assert_ne!(run(base), run(merged));
    }

    #[test]
    fn mono_params_receive_no_gradient_from_training_loss() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg).unwrap();
        let sample = generate(64, 32, 2, 10.0, 11).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let fwd = model
            .forward_sample(&mut tape, &bound, &sample, 1, PromptMode::Normal)
            .unwrap();
        let loss = tape.sum(fwd.final_full());
        tape.backward(loss).unwrap();
        let grads = model.store.gradients(&tape, &bound);
        for (e, g) in model.store.entries().iter().zip(grads.iter()) {
            if e.name.starts_with("mono_branch.") {
                assert!(g.is_none(), "{} must stay frozen", e.name);
            }
        }
        // while trainable parts do learn
        let some_grad = model
            .store
            .entries()
            .iter()
            .zip(grads.iter())
            .any(|(e, g)| {
                e.name.starts_with("stereo_encoder.")
                    && g.as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0))
            });
        assert!(some_grad);
    }

    /// End-to-end finite-difference check: 32x32 input, one iteration, every
    /// parameter sampled. The f64 oracle keeps the comparison meaningful.
    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut cfg = tiny_cfg();
        cfg.crop_height = 32;
        cfg.crop_width = 32;
        cfg.gen_max_disp = 8.0;
        let mut model = Model::new(cfg).unwrap();
        // nudge every trainable entry off its init: zero-initialized biases
        // and residual tails place relu kinks exactly at the evaluation
        // point (the correlation volume has an exactly-zero padded border)
        // and make some chain-rule paths trivially zero
        let mut rng = crate::params::init_rng(77);
        for i in 0..model.store.len() {
            if model.store.entries()[i].trainable {
                for v in model.store.data_mut(i).iter_mut() {
                    *v += 0.03 + 0.02 * rng.random::<f32>();
                }
            }
        }
        let sample = generate(32, 32, 2, 8.0, 13).unwrap();
        let gt: Vec<f32> = sample.disparity_gt.data.clone();

        // only trainable entries: the mono branch is frozen by contract (its
        // outputs are detached), so a finite difference through it would
        // measure a path the model intentionally blocks
        let slots: Vec<usize> = model
            .store
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| i)
            .collect();
        let inputs: Vec<TensorOf<f64>> = slots
            .iter()
            .map(|&i| {
                let e = &model.store.entries()[i];
                TensorOf::from_f32(e.shape.clone(), &e.data).unwrap()
            })
            .collect();
        let report = check_gradients(
            |tape, ids| {
                let mut bind = Vec::with_capacity(model.store.len());
                let mut next = 0;
                for (i, e) in model.store.entries().iter().enumerate() {
                    if slots.get(next) == Some(&i) {
                        bind.push(ids[next]);
                        next += 1;
                    } else {
                        let t = TensorOf::from_f32(e.shape.clone(), &e.data)?;
                        bind.push(tape.constant(t));
                    }
                }
                let bound = Bound::from_ids(bind);
                let fwd =
                    model.forward_sample(tape, &bound, &sample, 1, PromptMode::Normal)?;
                // smooth-L1 against ground truth, mean over all pixels
                let gt_t = tape.constant_f32(vec![1, 32, 32], &gt)?;
                let diff = tape.sub(fwd.final_full(), gt_t)?;
                let h = tape.huber(diff);
                let s = tape.sum(h);
                Ok(tape.scale(s, 1.0 / 1024.0))
            },
            &inputs,
            1e-6,
            Some(2),
        )
        .unwrap();
        assert!(report.max_rel <= 1e-2, "e2e rel {} at {:?}", report.max_rel, report.worst);
        assert!(report.checked >= slots.len());
    }
}

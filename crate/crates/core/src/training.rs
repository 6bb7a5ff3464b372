//! Loss, optimizer, schedule and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Forward, Model};
use crate::params::ParamStore;
use crate::pru::PromptMode;
use crate::synthetic::{self, StereoSample};
use crate::tensor::{Real, TapeOf, TensorId};

/// Supervision over the initial disparity and every refinement iterate:
/// smooth-L1 on the initial field plus gamma^(K-k) weighted L1 on iterate k,
/// each mean-reduced over the valid mask.
pub fn sequence_loss<S: Real>(
    tape: &mut TapeOf<S>,
    d_init_full: TensorId,
    iterates_full: &[TensorId],
    gt: TensorId,
    valid: TensorId,
    gamma: f32,
) -> Result<TensorId> {
    if iterates_full.is_empty() {
        return Err(Error::contract("sequence_loss: no iterates".to_string()));
    }
    let count: f64 = tape.data(valid).iter().map(|v| v.as_f32() as f64).sum();
    if count == 0.0 {
        return Err(Error::data("sequence_loss: empty valid mask".to_string()));
    }
    let inv = (1.0 / count) as f32;
    let masked_mean = |tape: &mut TapeOf<S>, field: TensorId| -> Result<TensorId> {
        let m = tape.mul(field, valid)?;
        let s = tape.sum(m);
        Ok(tape.scale(s, inv))
    };
    let diff0 = tape.sub(d_init_full, gt)?;
    let h = tape.huber(diff0);
    let mut total = masked_mean(tape, h)?;
    let k_total = iterates_full.len();
    for (k, &d) in iterates_full.iter().enumerate() {
        let weight = gamma.powi((k_total - 1 - k) as i32);
        let diff = tape.sub(d, gt)?;
        let a = tape.abs(diff);
        let term = masked_mean(tape, a)?;
        let term = tape.scale(term, weight);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// First and second moments for every store entry (empty for frozen ones).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| if e.trainable { vec![0.0; e.data.len()] } else { Vec::new() })
            .collect::<Vec<_>>();
        AdamState { v: m.clone(), m, step: 0 }
    }
}

/// One decoupled-weight-decay Adam update. `grads[i]` of `None` on a
/// trainable entry counts as a zero gradient (decay still applies).
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    lr: f32,
    betas: (f32, f32),
    eps: f32,
    weight_decay: f32,
) -> Result<()> {
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for i in 0..store.len() {
        if !store.entries()[i].trainable {
            continue;
        }
        if let Some(g) = &grads[i] {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "adamw_step: non-finite gradient ({bad}) for parameter {}",
                    store.entries()[i].name
                )));
            }
        }
        let zero;
        let g: &[f32] = match &grads[i] {
            Some(g) => g,
            None => {
                zero = vec![0.0; store.entries()[i].data.len()];
                &zero
            }
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        }
        let data = store.data_mut(i);
        for j in 0..data.len() {
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * data[j]);
        }
    }
    Ok(())
}

/// One-cycle schedule: linear warmup over the first 30% of steps from
/// lr_max/25 to lr_max, then cosine annealing down to lr_max/1e4.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_max: f32) -> Result<f32> {
    if step >= total_steps {
        return Err(Error::contract(format!(
            "one_cycle_lr: step {step} outside 0..{total_steps}"
        )));
    }
    let lr_max = lr_max as f64;
    let warm = ((0.3 * total_steps as f64).floor() as usize).min(total_steps - 1);
    let lr = if step <= warm {
        let start = lr_max / 25.0;
        if warm == 0 {
            lr_max
        } else {
            start + (lr_max - start) * step as f64 / warm as f64
        }
    } else {
        let end = lr_max / 1e4;
        let span = (total_steps - 1 - warm) as f64;
        let p = (step - warm) as f64 / span;
        end + 0.5 * (lr_max - end) * (1.0 + (std::f64::consts::PI * p).cos())
    };
    Ok(lr as f32)
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub train_epe: f32,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        format!("{} {} {} {}", self.step, self.lr, self.loss, self.train_epe)
    }
}

fn sample_seed(base: u64, index: u64) -> u64 {
    // splitmix-style spreading so nearby indices give unrelated scenes
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// The sample a given (step, slot) position trains on; a pure function so a
/// resumed run replays the identical stream.
fn training_sample(cfg: &Config, pool: &[StereoSample], step: usize, slot: usize) -> Result<StereoSample> {
    let index = (step * cfg.batch + slot) as u64;
    let mut sample = if pool.is_empty() {
        let seed = sample_seed(cfg.seed, index);
        if cfg.augment_crop {
            let s = synthetic::generate(
                cfg.crop_width + 32,
                cfg.crop_height + 32,
                cfg.gen_layers,
                cfg.gen_max_disp,
                seed,
            )?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
            let oy = rng.random_range(0..33);
            let ox = rng.random_range(0..33);
            synthetic::crop(&s, oy, ox, cfg.crop_height, cfg.crop_width)?
        } else {
            synthetic::generate(
                cfg.crop_width,
                cfg.crop_height,
                cfg.gen_layers,
                cfg.gen_max_disp,
                seed,
            )?
        }
    } else {
        pool[index as usize % pool.len()].clone()
    };
    if cfg.jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ 0x4A17, index));
        let gain = 1.0 + cfg.jitter * (rng.random::<f32>() * 2.0 - 1.0);
        let bias = 0.5 * cfg.jitter * (rng.random::<f32>() * 2.0 - 1.0);
        synthetic::color_jitter(&mut sample, gain, bias);
    }
    Ok(sample)
}

/// The fixed training pool (empty when streaming).
pub fn training_pool(cfg: &Config) -> Result<Vec<StereoSample>> {
    (0..cfg.dataset_size)
        .map(|i| {
            synthetic::generate(
                cfg.crop_width,
                cfg.crop_height,
                cfg.gen_layers,
                cfg.gen_max_disp,
                sample_seed(cfg.seed, 0xF00D + i as u64),
            )
        })
        .collect()
}

/// Valid-ground-truth mask (dense synthetic truth: disparity within [0, W)).
pub fn valid_mask(gt: &[f32], width: usize) -> Vec<f32> {
    gt.iter().map(|&d| if (0.0..width as f32).contains(&d) { 1.0 } else { 0.0 }).collect()
}

fn pixel_epe(pred: &[f32], gt: &[f32], valid: &[f32]) -> f32 {
    let mut err = 0.0f64;
    let mut n = 0.0f64;
    for ((p, g), v) in pred.iter().zip(gt.iter()).zip(valid.iter()) {
        if *v > 0.0 {
            err += (p - g).abs() as f64;
            n += 1.0;
        }
    }
    (err / n.max(1.0)) as f32
}

/// Run training steps [start, end) on an existing model/optimizer pair,
/// appending one record per step. Aborts with a data error on a non-finite
/// loss.
pub fn train_steps(
    model: &mut Model,
    adam: &mut AdamState,
    pool: &[StereoSample],
    start: usize,
    end: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let cfg = model.cfg.clone();
    let mut log = Vec::with_capacity(end - start);
    for step in start..end {
        let lr = one_cycle_lr(step, cfg.steps, cfg.lr_max)?;
        let mut tape = TapeOf::<f32>::new();
        let bound = model.bind(&mut tape);
        let mut loss_total: Option<TensorId> = None;
        let mut epe_acc = 0.0f32;
        for slot in 0..cfg.batch {
            let sample = training_sample(&cfg, pool, step, slot)?;
            let fwd: Forward =
                model.forward_sample(&mut tape, &bound, &sample, cfg.iterations_train, PromptMode::Normal)?;
            let (h, w) = (sample.height(), sample.width());
            let gt = tape.constant_f32(vec![1, h, w], &sample.disparity_gt.data)?;
            let valid = valid_mask(&sample.disparity_gt.data, w);
            let valid_t = tape.constant_f32(vec![1, h, w], &valid)?;
            let loss = sequence_loss(
                &mut tape,
                fwd.d_init_full,
                &fwd.iterates_full,
                gt,
                valid_t,
                cfg.gamma,
            )?;
            loss_total = Some(match loss_total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
            epe_acc += pixel_epe(tape.data(fwd.final_full()), &sample.disparity_gt.data, &valid);
        }
        let loss_total = loss_total.expect("batch >= 1");
        let loss_mean = tape.scale(loss_total, 1.0 / cfg.batch as f32);
        let loss_value = tape.data(loss_mean)[0];
        if !loss_value.is_finite() {
            return Err(Error::data(format!("training aborted: non-finite loss at step {step}")));
        }
        tape.backward(loss_mean)?;
        let grads = model.store.gradients(&tape, &bound);
        adamw_step(
            &mut model.store,
            &grads,
            adam,
            lr,
            (cfg.adam_beta1, cfg.adam_beta2),
            cfg.adam_eps,
            cfg.weight_decay,
        )?;
        let record = StepRecord { step, lr, loss: loss_value, train_epe: epe_acc / cfg.batch as f32 };
        on_step(&record);
        log.push(record);
    }
    Ok(log)
}

/// Fresh model, full run per the config.
pub fn train(cfg: &Config, on_step: impl FnMut(&StepRecord)) -> Result<(Model, AdamState, Vec<StepRecord>)> {
    let mut model = Model::new(cfg.clone())?;
    let mut adam = AdamState::new(&model.store);
    let pool = training_pool(cfg)?;
    let log = train_steps(&mut model, &mut adam, &pool, 0, cfg.steps, on_step)?;
    Ok((model, adam, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::tensor::{Tape, TensorOf};

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.feat_channels = [8, 8, 8, 8];
        cfg.mono_channels = 8;
        cfg.hidden_channels = 8;
        cfg.prompt_channels = 8;
        cfg.groups = 2;
        cfg.max_disparity = 16;
        cfg.lookup_radius = 1;
        cfg.crop_height = 32;
        cfg.crop_width = 64;
        cfg.gen_max_disp = 10.0;
        cfg.gen_layers = 2;
        cfg.iterations_train = 2;
        cfg.batch = 1;
        cfg.dataset_size = 2;
        cfg.steps = 4;
        cfg.lr_max = 1e-3;
        cfg
    }

    #[test]
    fn loss_zero_on_perfect_prediction() {
        let mut tape = Tape::new();
        let gt = tape.constant(TensorOf::filled(vec![1, 4, 4], 3.0));
        let valid = tape.constant(TensorOf::filled(vec![1, 4, 4], 1.0));
        let loss = sequence_loss(&mut tape, gt, &[gt, gt], gt, valid, 0.9).unwrap();
        assert_eq!(tape.data(loss), &[0.0]);
    }

    #[test]
    fn loss_two_iterate_hand_case() {
        // smooth term 0, two iterates with unit L1 error: 0.9 + 1.0 = 1.9
        let mut tape = Tape::new();
        let gt = tape.constant(TensorOf::filled(vec![1, 4, 4], 2.0));
        let off = tape.constant(TensorOf::filled(vec![1, 4, 4], 3.0));
        let valid = tape.constant(TensorOf::filled(vec![1, 4, 4], 1.0));
        let loss = sequence_loss(&mut tape, gt, &[off, off], gt, valid, 0.9).unwrap();
        assert_eq!(tape.data(loss), &[1.9]);
    }

    #[test]
    fn loss_gradient_weight_ratio() {
        // the iterate weight on d_k is exactly gamma^(K-k): compare leaf
        // gradients for k = 1 and k = K
        let gamma = 0.9f32;
        let k_total = 4usize;
        let mut tape = Tape::new();
        let gt = tape.constant(TensorOf::filled(vec![1, 2, 2], 0.0));
        let valid = tape.constant(TensorOf::filled(vec![1, 2, 2], 1.0));
        let iterates: Vec<_> =
            (0..k_total).map(|_| tape.leaf(TensorOf::filled(vec![1, 2, 2], 1.0))).collect();
        let init = tape.constant(TensorOf::filled(vec![1, 2, 2], 0.0));
        let loss = sequence_loss(&mut tape, init, &iterates, gt, valid, gamma).unwrap();
        tape.backward(loss).unwrap();
        let g_first = tape.grad(iterates[0]).unwrap()[0];
        let g_last = tape.grad(iterates[k_total - 1]).unwrap()[0];
        let ratio = g_first / g_last;
        let expect = gamma.powi(k_total as i32 - 1);
        assert!((ratio - expect).abs() < 1e-6, "ratio {ratio} vs {expect}");
    }

    #[test]
    fn loss_empty_mask_is_data_error() {
        let mut tape = Tape::new();
        let gt = tape.zeros(vec![1, 2, 2]);
        let valid = tape.zeros(vec![1, 2, 2]);
        assert!(matches!(
            sequence_loss(&mut tape, gt, &[gt], gt, valid, 0.9),
            Err(Error::Data(_))
        ));
    }

    fn scalar_store(value: f32) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("p", vec![1], vec![value], true);
        store
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut store = scalar_store(1.25);
        let mut adam = AdamState::new(&store);
        for _ in 0..3 {
            adamw_step(&mut store, &[Some(vec![0.0])], &mut adam, 1e-3, (0.9, 0.999), 1e-8, 0.0)
                .unwrap();
        }
        assert_eq!(store.entries()[0].data[0], 1.25);
    }

    #[test]
    fn adamw_first_step_is_minus_lr() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store);
        let lr = 2e-4;
        adamw_step(&mut store, &[Some(vec![1.0])], &mut adam, lr, (0.9, 0.999), 1e-8, 0.0).unwrap();
        let got = store.entries()[0].data[0];
        // bias-corrected first step: -lr * 1 / (sqrt(1) + eps)
        assert!((got + lr).abs() < 1e-9, "{got}");
    }

    #[test]
    fn adamw_decay_only_scales_parameters() {
        let mut store = scalar_store(2.0);
        let mut adam = AdamState::new(&store);
        let (lr, wd) = (1e-2, 0.5);
        adamw_step(&mut store, &[Some(vec![0.0])], &mut adam, lr, (0.9, 0.999), 1e-8, wd).unwrap();
        let got = store.entries()[0].data[0];
        assert!((got - 2.0 * (1.0 - lr * wd)).abs() < 1e-7);
    }

    #[test]
    fn adamw_nan_gradient_names_parameter() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store);
        let err =
            adamw_step(&mut store, &[Some(vec![f32::NAN])], &mut adam, 1e-3, (0.9, 0.999), 1e-8, 0.0)
                .unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
    }

    #[test]
    fn one_cycle_endpoints_and_continuity() {
        let (total, lr_max) = (1000usize, 2e-4f32);
        assert_eq!(one_cycle_lr(0, total, lr_max).unwrap(), lr_max / 25.0);
        let warm = (0.3 * total as f64).floor() as usize;
        assert_eq!(one_cycle_lr(warm, total, lr_max).unwrap(), lr_max);
        // the two branch formulas agree at the boundary
        let start = lr_max as f64 / 25.0;
        let from_warmup = start + (lr_max as f64 - start) * warm as f64 / warm as f64;
        let end = lr_max as f64 / 1e4;
        let from_anneal = end + 0.5 * (lr_max as f64 - end) * (1.0 + (0.0f64).cos());
        assert!((from_warmup - from_anneal).abs() < 1e-9);
        // the final step lands on the annealed floor
        let last = one_cycle_lr(total - 1, total, lr_max).unwrap();
        assert!((last - lr_max / 1e4).abs() < 1e-9, "{last}");
        assert!(one_cycle_lr(total, total, lr_max).is_err());
        // monotone rise then fall
        let mut prev = 0.0;
        for s in 0..=warm {
            let lr = one_cycle_lr(s, total, lr_max).unwrap();
            assert!(lr >= prev);
            prev = lr;
        }
        for s in warm + 1..total {
            let lr = one_cycle_lr(s, total, lr_max).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_step_loss_is_reproducible() {
        let cfg = tiny_cfg();
        let run = || {
            let mut first = None;
            let _ = train(&cfg, |r| {
                if r.step == 0 {
                    first = Some(r.loss);
                }
            })
            .unwrap();
            first.unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_bits(), b.to_bits(), "first-step loss must be bit-identical");
    }

    #[test]
    fn checkpoint_resume_replays_identical_trajectory() {
        let mut cfg = tiny_cfg();
        cfg.steps = 6;
        let mut model = Model::new(cfg.clone()).unwrap();
        let mut adam = AdamState::new(&model.store);
        let pool = training_pool(&cfg).unwrap();
        train_steps(&mut model, &mut adam, &pool, 0, 3, |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.ckpt");
        checkpoint::save(&path, &model, Some(&adam), 3).unwrap();

        let direct = train_steps(&mut model, &mut adam, &pool, 3, 6, |_| {}).unwrap();

        let (mut model2, mut adam2) = checkpoint::load(&path).unwrap().instantiate().unwrap();
        let pool2 = training_pool(&model2.cfg.clone()).unwrap();
        let resumed = train_steps(&mut model2, &mut adam2, &pool2, 3, 6, |_| {}).unwrap();

        for (a, b) in direct.iter().zip(resumed.iter()) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
            assert_eq!(a.train_epe.to_bits(), b.train_epe.to_bits());
        }
    }

    #[test]
    fn oracle_mono_loss_trends_down_over_200_steps() {
        for seed in 0..3 {
            let mut cfg = tiny_cfg();
            cfg.steps = 200;
            cfg.seed = 1000 + seed;
            cfg.mono_oracle = true;
            cfg.dataset_size = 4;
            cfg.lr_max = 1e-3;
            let (_, _, log) = train(&cfg, |_| {}).unwrap();
            let window = 30;
            let head: f32 =
                log[..window].iter().map(|r| r.loss).sum::<f32>() / window as f32;
            let tail: f32 =
                log[log.len() - window..].iter().map(|r| r.loss).sum::<f32>() / window as f32;
            assert!(
                tail < head,
                "seed {seed}: smoothed loss must decrease ({head} -> {tail})"
            );
        }
    }
}

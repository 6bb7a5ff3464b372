use std::time::Instant;
use stereo_core::pru::PromptMode;
use stereo_core::training::{sequence_loss, valid_mask};
use stereo_core::*;

fn mac_rate(label: &str, macs: f64, mut f: impl FnMut()) {
    let reps = 20;
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    let secs = t.elapsed().as_secs_f64() / reps as f64;
    eprintln!("{label:<36} {:>8.1} ms   {:>6.2} GMAC/s", secs * 1e3, macs / secs / 1e9);
}

fn main() {
    let mut rng_state = 1u64;
    let mut rand = move || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
        (rng_state >> 33) as f32 / (1u64 << 31) as f32 - 0.5
    };
    let mk = |n: usize, rand: &mut dyn FnMut() -> f32| (0..n).map(|_| rand()).collect::<Vec<f32>>();

    // hot conv shapes at the default config
    for (label, c_in, c_out, h, w, k) in [
        ("conv3x3 64->64 @16x32", 64usize, 64usize, 16usize, 32usize, 3usize),
        ("conv3x3 192->64 @16x32", 192, 64, 16, 32, 3),
        ("conv1x1 192->32 @16x32", 192, 32, 16, 32, 1),
        ("conv3x3 48->32 @16x32", 48, 32, 16, 32, 3),
    ] {
        let x = mk(c_in * h * w, &mut rand);
        let wt = mk(c_out * c_in * k * k, &mut rand);
        let b = mk(c_out, &mut rand);
        let macs = (c_out * c_in * k * k * h * w) as f64;
        mac_rate(&format!("{label} fwd"), macs, || {
            let mut tape = Tape::new();
            let xi = tape.constant_from(vec![c_in, h, w], x.clone()).unwrap();
            let wi = tape.constant_from(vec![c_out, c_in, k, k], wt.clone()).unwrap();
            let bi = tape.constant_from(vec![c_out], b.clone()).unwrap();
            let _ = tape.conv2d_chw(xi, wi, bi, 1, k / 2).unwrap();
        });
        mac_rate(&format!("{label} fwd+bwd"), 3.0 * macs, || {
            let mut tape = Tape::new();
            let xi = tape.constant_from(vec![c_in, h, w], x.clone()).unwrap();
            let wi = {
                let t = TensorOf::new(vec![c_out, c_in, k, k], wt.clone()).unwrap();
                tape.leaf(t)
            };
            let bi = tape.constant_from(vec![c_out], b.clone()).unwrap();
            let y = tape.conv2d_chw(xi, wi, bi, 1, k / 2).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
        });
    }

    let cfg = Config::default();
    let model = Model::new(cfg.clone()).unwrap();
    let sample = synthetic::generate(128, 64, 4, 40.0, 1).unwrap();
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = model.forward_sample(&mut tape, &bound, &sample, 8, PromptMode::Normal).unwrap();
    let t_fwd = t0.elapsed();
    let t1 = Instant::now();
    let gt = tape.constant_f32(vec![1, 64, 128], &sample.disparity_gt.data).unwrap();
    let valid = valid_mask(&sample.disparity_gt.data, 128);
    let vt = tape.constant_f32(vec![1, 64, 128], &valid).unwrap();
    let loss = sequence_loss(&mut tape, fwd.d_init_full, &fwd.iterates_full, gt, vt, 0.9).unwrap();
    tape.backward(loss).unwrap();
    let t_bwd = t1.elapsed();
    eprintln!("nodes: {}", tape.num_nodes());
    eprintln!("forward: {t_fwd:?}  backward: {t_bwd:?}");
}

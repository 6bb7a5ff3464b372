//! Disparity metrics (EPE and Bad-tau over all / non-occluded pixels) and
//! dataset evaluation.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pru::PromptMode;
use crate::synthetic::StereoSample;
use crate::tensor::TapeOf;

/// Mean absolute disparity error over masked pixels.
pub fn epe(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<f32> {
    let mut err = 0.0f64;
    let mut n = 0usize;
    for ((p, g), m) in pred.iter().zip(gt.iter()).zip(mask.iter()) {
        if *m {
            err += (p - g).abs() as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::data("epe: empty mask".to_string()));
    }
    Ok((err / n as f64) as f32)
}

/// Percentage of masked pixels whose absolute error strictly exceeds tau.
pub fn bad_tau(pred: &[f32], gt: &[f32], mask: &[bool], tau: f32) -> Result<f32> {
    if tau <= 0.0 {
        return Err(Error::contract(format!("bad_tau: tau ({tau}) must be positive")));
    }
    let mut bad = 0usize;
    let mut n = 0usize;
    for ((p, g), m) in pred.iter().zip(gt.iter()).zip(mask.iter()) {
        if *m {
            if (p - g).abs() > tau {
                bad += 1;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::data("bad_tau: empty mask".to_string()));
    }
    Ok(100.0 * bad as f32 / n as f32)
}

/// Metrics of one sample (or an aggregate over samples).
#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub epe_all: f32,
    pub epe_noc: f32,
    /// Bad-tau (%) per requested tau, all pixels.
    pub bad_all: Vec<f32>,
    pub bad_noc: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub taus: Vec<f32>,
    pub per_sample: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
    pub iterations: usize,
}

impl EvalReport {
    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let tau_cols: String =
            self.taus.iter().map(|t| format!("  bad{t}-all  bad{t}-noc")).collect();
        out.push_str(&format!("sample    epe-all    epe-noc{tau_cols}\n"));
        let row = |label: &str, m: &SampleMetrics| {
            let mut line = format!("{label:<8} {:>9.4} {:>9.4}", m.epe_all, m.epe_noc);
            for (a, n) in m.bad_all.iter().zip(m.bad_noc.iter()) {
                line.push_str(&format!(" {a:>9.3} {n:>9.3}"));
            }
            line.push('\n');
            line
        };
        for (i, m) in self.per_sample.iter().enumerate() {
            out.push_str(&row(&i.to_string(), m));
        }
        out.push_str(&row("mean", &self.mean));
        out
    }

    /// Line-delimited record form (one line per sample plus a mean line).
    pub fn records(&self) -> String {
        let mut out = String::new();
        let taus: Vec<String> = self.taus.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!("# iterations={} taus={}\n", self.iterations, taus.join(",")));
        let line = |label: &str, m: &SampleMetrics| {
            let mut l = format!("{label} {} {}", m.epe_all, m.epe_noc);
            for (a, n) in m.bad_all.iter().zip(m.bad_noc.iter()) {
                l.push_str(&format!(" {a} {n}"));
            }
            l.push('\n');
            l
        };
        for (i, m) in self.per_sample.iter().enumerate() {
            out.push_str(&line(&i.to_string(), m));
        }
        out.push_str(&line("mean", &self.mean));
        out
    }
}

/// Masks for one sample: All = valid ground truth, Noc = All minus occluded.
pub fn masks(sample: &StereoSample) -> (Vec<bool>, Vec<bool>) {
    let w = sample.width() as f32;
    let all: Vec<bool> = sample.disparity_gt.data.iter().map(|&d| (0.0..w).contains(&d)).collect();
    let noc = all.iter().zip(sample.occlusion.iter()).map(|(a, o)| *a && !o).collect();
    (all, noc)
}

fn metrics(pred: &[f32], gt: &[f32], all: &[bool], noc: &[bool], taus: &[f32]) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        epe_all: epe(pred, gt, all)?,
        epe_noc: epe(pred, gt, noc)?,
        bad_all: taus.iter().map(|&t| bad_tau(pred, gt, all, t)).collect::<Result<_>>()?,
        bad_noc: taus.iter().map(|&t| bad_tau(pred, gt, noc, t)).collect::<Result<_>>()?,
    })
}

/// Evaluate a model on in-memory samples (deterministic order). The mean row
/// averages per-sample metrics.
pub fn evaluate(
    model: &Model,
    samples: &[StereoSample],
    iterations: usize,
    taus: &[f32],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::data("evaluate: no samples".to_string()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut tape = TapeOf::<f32>::new();
        let bound = model.bind_frozen(&mut tape);
        let fwd = model.forward_sample(&mut tape, &bound, sample, iterations, PromptMode::Normal)?;
        let pred = tape.data(fwd.final_full());
        let (all, noc) = masks(sample);
        per_sample.push(metrics(pred, &sample.disparity_gt.data, &all, &noc, taus)?);
    }
    let n = per_sample.len() as f32;
    let mean = SampleMetrics {
        epe_all: per_sample.iter().map(|m| m.epe_all).sum::<f32>() / n,
        epe_noc: per_sample.iter().map(|m| m.epe_noc).sum::<f32>() / n,
        bad_all: (0..taus.len())
            .map(|i| per_sample.iter().map(|m| m.bad_all[i]).sum::<f32>() / n)
            .collect(),
        bad_noc: (0..taus.len())
            .map(|i| per_sample.iter().map(|m| m.bad_noc[i]).sum::<f32>() / n)
            .collect(),
    };
    Ok(EvalReport { taus: taus.to_vec(), per_sample, mean, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epe_direct_means() {
        let gt = vec![0.0; 4];
        let pred = vec![0.0, 1.0, 2.0, 3.0];
        let all = vec![true; 4];
        assert_eq!(epe(&pred, &gt, &all).unwrap(), 1.5);
        assert_eq!(epe(&gt, &gt, &all).unwrap(), 0.0);
        let partial = vec![true, true, true, false];
        assert_eq!(epe(&pred, &gt, &partial).unwrap(), 1.0);
        assert!(epe(&pred, &gt, &[false; 4]).is_err());
    }

    #[test]
    fn bad_tau_strict_counting() {
        let gt = vec![0.0; 4];
        let pred = vec![0.0, 1.0, 2.0, 3.0];
        let all = vec![true; 4];
        // strictly greater: only the error of 3 exceeds 2.0
        assert_eq!(bad_tau(&pred, &gt, &all, 2.0).unwrap(), 25.0);
        assert_eq!(bad_tau(&pred, &gt, &all, 0.5).unwrap(), 75.0);
        assert_eq!(bad_tau(&gt, &gt, &all, 1.0).unwrap(), 0.0);
        assert!(bad_tau(&pred, &gt, &all, 0.0).is_err());
    }

    #[test]
    fn bad_tau_monotone_in_tau() {
        let mut rng = crate::params::init_rng(3);
        use rand::Rng;
        let gt: Vec<f32> = (0..200).map(|_| rng.random::<f32>() * 8.0).collect();
        let pred: Vec<f32> = gt.iter().map(|g| g + rng.random::<f32>() * 4.0 - 2.0).collect();
        let all = vec![true; 200];
        let mut prev = 100.0;
        for tau in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let b = bad_tau(&pred, &gt, &all, tau).unwrap();
            assert!(b <= prev, "bad_tau must not increase with tau");
            prev = b;
        }
    }

    #[test]
    fn noc_equals_all_without_occlusion() {
        let s = crate::synthetic::generate(64, 32, 0, 2.0, 1).unwrap();
        // constant background disparity c < 2: occlusion is only the tiny
        // border band; clear it to simulate a fully visible sample
        let mut s = s;
        s.occlusion.iter_mut().for_each(|o| *o = false);
        let (all, noc) = masks(&s);
        assert_eq!(all, noc);
        let pred: Vec<f32> = s.disparity_gt.data.iter().map(|d| d + 0.5).collect();
        let ea = epe(&pred, &s.disparity_gt.data, &all).unwrap();
        let en = epe(&pred, &s.disparity_gt.data, &noc).unwrap();
        assert_eq!(ea, en);
    }

    #[test]
    fn noc_is_subset_of_all() {
        let s = crate::synthetic::generate(64, 32, 4, 20.0, 9).unwrap();
        let (all, noc) = masks(&s);
        let count = |m: &[bool]| m.iter().filter(|x| **x).count();
        assert!(count(&noc) < count(&all));
        assert!(noc.iter().zip(all.iter()).all(|(n, a)| !n || *a));
    }
}

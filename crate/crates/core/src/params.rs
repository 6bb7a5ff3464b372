//! Named parameter store shared by all network modules.
//!
//! Modules allocate their weights here at construction time (deterministic
//! order, seeded init) and hold [`ParamId`]s. Each forward pass binds the
//! store onto a tape: trainable entries become gradient-tracked leaves,
//! frozen entries become constants. Checkpointing serializes entries by name.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, TapeOf, TensorId, TensorOf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub trainable: bool,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Weight/bias pair of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvParam {
    pub w: ParamId,
    pub b: ParamId,
}

/// Per-forward binding of store entries to tape tensors.
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn get(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    /// Bind from explicit tape ids (test harnesses that make store entries
    /// gradcheck leaves). `ids[i]` must correspond to store entry `i`.
    pub fn from_ids(ids: Vec<TensorId>) -> Bound {
        Bound { ids }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>, trainable: bool) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape, data, trainable });
        id
    }

    /// He-normal conv weight plus zero bias.
    pub fn conv2d(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        trainable: bool,
    ) -> ConvParam {
        let fan_in = in_ch * k * k;
        let w = self.he_weights(rng, vec![out_ch, in_ch, k, k], fan_in);
        ConvParam {
            w: self.add(&format!("{name}.weight"), vec![out_ch, in_ch, k, k], w, trainable),
            b: self.add(&format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch], trainable),
        }
    }

    /// Conv with all-zero weights and bias (prompt-path zero init and
    /// residual-branch last layers: blocks start as the identity and open up
    /// during training, keeping the untrained recurrence stable).
    pub fn conv2d_zero(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) -> ConvParam {
        let n = out_ch * in_ch * k * k;
        ConvParam {
            w: self.add(&format!("{name}.weight"), vec![out_ch, in_ch, k, k], vec![0.0; n], true),
            b: self.add(&format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch], true),
        }
    }

    /// 1x1 conv initialized to the identity map plus small noise.
    pub fn conv2d_near_identity(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> ConvParam {
        let mut w = self.he_weights(rng, vec![ch, ch, 1, 1], ch);
        for v in w.iter_mut() {
            *v *= 0.1;
        }
        for i in 0..ch {
            w[i * ch + i] += 1.0;
        }
        ConvParam {
            w: self.add(&format!("{name}.weight"), vec![ch, ch, 1, 1], w, true),
            b: self.add(&format!("{name}.bias"), vec![ch], vec![0.0; ch], true),
        }
    }

    /// 3d conv with all-zero weights and bias.
    pub fn conv3d_zero(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) -> ConvParam {
        let n = out_ch * in_ch * k * k * k;
        ConvParam {
            w: self.add(&format!("{name}.weight"), vec![out_ch, in_ch, k, k, k], vec![0.0; n], true),
            b: self.add(&format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch], true),
        }
    }

    pub fn conv3d(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        k: usize,
    ) -> ConvParam {
        let fan_in = in_ch * k * k * k;
        let w = self.he_weights(rng, vec![out_ch, in_ch, k, k, k], fan_in);
        ConvParam {
            w: self.add(&format!("{name}.weight"), vec![out_ch, in_ch, k, k, k], w, true),
            b: self.add(&format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch], true),
        }
    }

    fn he_weights(&self, rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Vec<f32> {
        let std = (2.0 / fan_in as f32).sqrt();
        let normal = Normal::new(0.0f32, std).unwrap();
        let n: usize = shape.iter().product();
        (0..n).map(|_| normal.sample(rng)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut Vec<f32> {
        &mut self.entries[idx].data
    }

    /// Total elements in trainable entries.
    pub fn trainable_elements(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Register every entry on a tape for one forward/backward pass.
    pub fn bind<S: Real>(&self, tape: &mut TapeOf<S>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Bind with every entry constant (inference; no gradients kept).
    pub fn bind_frozen<S: Real>(&self, tape: &mut TapeOf<S>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with<S: Real>(&self, tape: &mut TapeOf<S>, train: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                let t = TensorOf::from_f32(e.shape.clone(), &e.data).expect("stored shape valid");
                if train && e.trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound { ids }
    }

    /// Collect this pass's gradients per entry (None where no grad flowed or
    /// the entry is frozen).
    pub fn gradients<S: Real>(&self, tape: &TapeOf<S>, bound: &Bound) -> Vec<Option<Vec<f32>>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if !e.trainable {
                    return None;
                }
                tape.grad(bound.ids[i]).map(|g| g.iter().map(|v| v.as_f32()).collect())
            })
            .collect()
    }

    /// Overwrite entry data from a (name, data) map; unknown names collect
    /// into a config error.
    pub fn load_named(&mut self, values: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        let mut missing = Vec::new();
        for e in self.entries.iter_mut() {
            match values.iter().find(|(n, _, _)| n == &e.name) {
                Some((_, shape, data)) => {
                    if *shape != e.shape {
                        return Err(Error::config(format!(
                            "checkpoint entry {} has shape {:?}, model expects {:?}",
                            e.name, shape, e.shape
                        )));
                    }
                    e.data = data.clone();
                }
                None => missing.push(e.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::config(format!(
                "checkpoint missing keys: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }
}

/// Deterministic RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

//! Flat key=value configuration shared by every stage.
//!
//! The on-disk format is UTF-8 text, one `key=value` per line, `#` comments.
//! Unknown keys are an error so typos fail loudly. `to_text` emits every key
//! in a fixed order; the result is embedded into checkpoints so a trained
//! model carries its exact configuration.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // -- synthetic data --
    /// Training crop height/width (pixels, divisible by 32).
    pub crop_height: usize,
    pub crop_width: usize,
    /// Slanted layers per generated scene.
    pub gen_layers: usize,
    /// Largest ground-truth disparity the generator emits (pixels).
    pub gen_max_disp: f32,
    /// Fixed pool of samples to cycle through; 0 streams a fresh scene per step.
    pub dataset_size: usize,
    /// Photometric gain/bias jitter amplitude (0 disables).
    pub jitter: f32,
    /// Crop training windows from a larger generated scene at random offsets.
    pub augment_crop: bool,

    // -- model --
    /// Stereo feature channels at 1/4, 1/8, 1/16, 1/32 resolution.
    pub feat_channels: [usize; 4],
    /// Monocular-branch feature channels (1/4 resolution).
    pub mono_channels: usize,
    /// Recurrent hidden-state channels per level.
    pub hidden_channels: usize,
    /// Structure/motion prompt channels.
    pub prompt_channels: usize,
    /// Correlation groups; must divide feat_channels[0].
    pub groups: usize,
    /// Full-resolution disparity search range (candidates = max_disparity/4).
    pub max_disparity: usize,
    /// Cost-volume pyramid levels used by the local lookup.
    pub lookup_levels: usize,
    /// Lookup offsets per level span -radius..=radius.
    pub lookup_radius: usize,
    /// Zero-initialize the last conv of both prompt encoders.
    pub zero_init_prompt_conv: bool,
    /// Fold prompts into the hidden state with one merged conv instead of
    /// two residual additions.
    pub merged_hidden_prompt_conv: bool,
    /// Replace the mono branch's relative depth by an affine transform of
    /// the ground truth plus noise (for fusion diagnostics).
    pub mono_oracle: bool,
    pub mono_oracle_noise: f32,

    // -- training --
    pub lr_max: f32,
    pub steps: usize,
    pub batch: usize,
    /// Loss decay over refinement iterates.
    pub gamma: f32,
    pub iterations_train: usize,
    pub iterations_eval: usize,
    pub weight_decay: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub seed: u64,

    // -- evaluation --
    pub taus: Vec<f32>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            crop_height: 64,
            crop_width: 128,
            gen_layers: 4,
            gen_max_disp: 40.0,
            dataset_size: 8,
            jitter: 0.0,
            augment_crop: false,
            feat_channels: [48, 64, 96, 128],
            mono_channels: 48,
            hidden_channels: 64,
            prompt_channels: 64,
            groups: 8,
            max_disparity: 64,
            lookup_levels: 2,
            lookup_radius: 4,
            zero_init_prompt_conv: false,
            merged_hidden_prompt_conv: false,
            mono_oracle: false,
            mono_oracle_noise: 0.1,
            lr_max: 2e-4,
            steps: 600,
            batch: 2,
            gamma: 0.9,
            iterations_train: 8,
            iterations_eval: 16,
            weight_decay: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            taus: vec![1.0, 2.0, 3.0],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::config(format!("key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::config(format!("key {key}: expected bool, got {other:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f32>> {
    value
        .split(',')
        .map(|v| parse_num::<f32>(key, v))
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::config(format!("key {key}: empty list")))
            } else {
                Ok(v)
            }
        })
}

impl Config {
    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "crop_height" => self.crop_height = parse_num(key, value)?,
            "crop_width" => self.crop_width = parse_num(key, value)?,
            "gen_layers" => self.gen_layers = parse_num(key, value)?,
            "gen_max_disp" => self.gen_max_disp = parse_num(key, value)?,
            "dataset_size" => self.dataset_size = parse_num(key, value)?,
            "jitter" => self.jitter = parse_num(key, value)?,
            "augment_crop" => self.augment_crop = parse_bool(key, value)?,
            "feat_channels" => {
                let v = parse_list(key, value)?;
                if v.len() != 4 {
                    return Err(Error::config(format!("key {key}: need 4 values")));
                }
                for (dst, src) in self.feat_channels.iter_mut().zip(v) {
                    *dst = src as usize;
                }
            }
            "mono_channels" => self.mono_channels = parse_num(key, value)?,
            "hidden_channels" => self.hidden_channels = parse_num(key, value)?,
            "prompt_channels" => self.prompt_channels = parse_num(key, value)?,
            "groups" => self.groups = parse_num(key, value)?,
            "max_disparity" => self.max_disparity = parse_num(key, value)?,
            "lookup_levels" => self.lookup_levels = parse_num(key, value)?,
            "lookup_radius" => self.lookup_radius = parse_num(key, value)?,
            "zero_init_prompt_conv" => self.zero_init_prompt_conv = parse_bool(key, value)?,
            "merged_hidden_prompt_conv" => self.merged_hidden_prompt_conv = parse_bool(key, value)?,
            "mono_oracle" => self.mono_oracle = parse_bool(key, value)?,
            "mono_oracle_noise" => self.mono_oracle_noise = parse_num(key, value)?,
            "lr_max" => self.lr_max = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "iterations_train" => self.iterations_train = parse_num(key, value)?,
            "iterations_eval" => self.iterations_eval = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "taus" => self.taus = parse_list(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a config file body. Lines are `key=value`; blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected key=value, got {raw:?}", ln + 1)));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical text form (every key, fixed order). Parsing it back yields
    /// an identical config.
    pub fn to_text(&self) -> String {
        let list = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let fc = self.feat_channels.map(|c| c as f32);
        format!(
            "crop_height={}\ncrop_width={}\ngen_layers={}\ngen_max_disp={}\ndataset_size={}\n\
             jitter={}\naugment_crop={}\nfeat_channels={}\nmono_channels={}\nhidden_channels={}\n\
             prompt_channels={}\ngroups={}\nmax_disparity={}\nlookup_levels={}\nlookup_radius={}\n\
             zero_init_prompt_conv={}\nmerged_hidden_prompt_conv={}\nmono_oracle={}\n\
             mono_oracle_noise={}\nlr_max={}\nsteps={}\nbatch={}\ngamma={}\niterations_train={}\n\
             iterations_eval={}\nweight_decay={}\nadam_beta1={}\nadam_beta2={}\nadam_eps={}\n\
             seed={}\ntaus={}\n",
            self.crop_height,
            self.crop_width,
            self.gen_layers,
            self.gen_max_disp,
            self.dataset_size,
            self.jitter,
            self.augment_crop,
            list(&fc),
            self.mono_channels,
            self.hidden_channels,
            self.prompt_channels,
            self.groups,
            self.max_disparity,
            self.lookup_levels,
            self.lookup_radius,
            self.zero_init_prompt_conv,
            self.merged_hidden_prompt_conv,
            self.mono_oracle,
            self.mono_oracle_noise,
            self.lr_max,
            self.steps,
            self.batch,
            self.gamma,
            self.iterations_train,
            self.iterations_eval,
            self.weight_decay,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.seed,
            list(&self.taus),
        )
    }

    /// Validate cross-field constraints before building a model.
    pub fn validate(&self) -> Result<()> {
        if self.crop_height % 32 != 0 || self.crop_width % 32 != 0 {
            return Err(Error::config(format!(
                "crop {}x{} must be divisible by 32",
                self.crop_height, self.crop_width
            )));
        }
        if self.feat_channels[0] % self.groups != 0 {
            return Err(Error::config(format!(
                "groups ({}) must divide feat_channels[0] ({})",
                self.groups, self.feat_channels[0]
            )));
        }
        if self.max_disparity % 4 != 0 {
            return Err(Error::config("max_disparity must be divisible by 4".to_string()));
        }
        let d4 = self.max_disparity / 4;
        if self.lookup_levels == 0 || d4 % (1 << (self.lookup_levels - 1)) != 0 {
            return Err(Error::config(format!(
                "lookup_levels ({}) incompatible with max_disparity/4 ({d4})",
                self.lookup_levels
            )));
        }
        if self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(Error::config(format!("gamma ({}) must be in (0, 1]", self.gamma)));
        }
        if self.steps == 0 || self.batch == 0 || self.iterations_train == 0 {
            return Err(Error::config("steps, batch, iterations_train must be >= 1".to_string()));
        }
        if !(1.0..self.crop_width as f32 / 2.0).contains(&self.gen_max_disp) {
            return Err(Error::config(format!(
                "gen_max_disp ({}) outside [1, crop_width/2)",
                self.gen_max_disp
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = Config::default();
        let parsed = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = Config::parse("stepz=10\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = Config::parse("# comment\nsteps=42\n\ntaus=0.5,1.5\n").unwrap();
        assert_eq!(cfg.steps, 42);
        assert_eq!(cfg.taus, vec![0.5, 1.5]);
    }

    #[test]
    fn validation_catches_bad_combinations() {
        let mut cfg = Config::default();
        cfg.groups = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.crop_width = 100;
        assert!(cfg.validate().is_err());
        assert!(Config::default().validate().is_ok());
    }
}

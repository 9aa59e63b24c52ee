//! Model and training configuration, plus the `key = value` config file.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::io::KeyValues;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub phonemes: usize,
    pub mel_dim: usize,
    pub speakers: usize,
    pub emotions: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub fft_kernel: usize,
    pub encoder_filters: usize,
    pub decoder_filters: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub ref_filters: Vec<usize>,
    pub ref_kernel: usize,
    pub ref_stride: usize,
    pub gru_hidden: usize,
    pub style_tokens: usize,
    pub token_dim: usize,
    pub style_heads: usize,
    pub style_attention_hidden: usize,
    pub variance_filters: usize,
    pub variance_kernel: usize,
    pub variance_dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults used by the tests and the CLI.
    pub fn toy() -> Self {
        ModelConfig {
            hidden: 64,
            phonemes: 16,
            mel_dim: 16,
            speakers: 4,
            emotions: 3,
            encoder_layers: 2,
            decoder_layers: 2,
            fft_kernel: 3,
            encoder_filters: 128,
            decoder_filters: 128,
            attention_heads: 2,
            dropout: 0.0,
            ref_filters: vec![8, 8, 16, 16, 32, 32],
            ref_kernel: 3,
            ref_stride: 2,
            gru_hidden: 32,
            style_tokens: 10,
            token_dim: 16,
            style_heads: 4,
            style_attention_hidden: 64,
            variance_filters: 64,
            variance_kernel: 3,
            variance_dropout: 0.0,
            seed: 1,
        }
    }

    /// Full-size values from the published configuration table. The corpus
    /// sizes (mel bins, inventory, label counts) are those of the datasets it
    /// was trained on.
    pub fn paper() -> Self {
        ModelConfig {
            hidden: 384,
            phonemes: 80,
            mel_dim: 80,
            speakers: 15,
            emotions: 4,
            encoder_layers: 6,
            decoder_layers: 6,
            fft_kernel: 9,
            encoder_filters: 1536,
            decoder_filters: 384,
            attention_heads: 2,
            dropout: 0.2,
            ref_filters: vec![32, 32, 64, 64, 128, 128],
            ref_kernel: 3,
            ref_stride: 2,
            gru_hidden: 192,
            style_tokens: 10,
            token_dim: 48,
            style_heads: 8,
            style_attention_hidden: 384,
            variance_filters: 384,
            variance_kernel: 3,
            variance_dropout: 0.5,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("phonemes", self.phonemes),
            ("mel_dim", self.mel_dim),
            ("speakers", self.speakers),
            ("emotions", self.emotions),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("fft_kernel", self.fft_kernel),
            ("encoder_filters", self.encoder_filters),
            ("decoder_filters", self.decoder_filters),
            ("attention_heads", self.attention_heads),
            ("ref_kernel", self.ref_kernel),
            ("ref_stride", self.ref_stride),
            ("gru_hidden", self.gru_hidden),
            ("style_tokens", self.style_tokens),
            ("token_dim", self.token_dim),
            ("style_heads", self.style_heads),
            ("style_attention_hidden", self.style_attention_hidden),
            ("variance_filters", self.variance_filters),
            ("variance_kernel", self.variance_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.ref_filters.is_empty() || self.ref_filters.contains(&0) {
            return Err(Error::Config("ref_filters must be a non-empty list of positive counts".into()));
        }
        if self.hidden % self.attention_heads != 0 {
            return Err(Error::Config("hidden must divide evenly across attention heads".into()));
        }
        if self.token_dim * self.style_heads != self.style_attention_hidden {
            return Err(Error::Config(format!(
                "token_dim {} x style_heads {} must equal style_attention_hidden {}",
                self.token_dim, self.style_heads, self.style_attention_hidden
            )));
        }
        for (name, k) in [
            ("fft_kernel", self.fft_kernel),
            ("variance_kernel", self.variance_kernel),
            ("ref_kernel", self.ref_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd")));
            }
        }
        for (name, r) in [("dropout", self.dropout), ("variance_dropout", self.variance_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Mel-bin extent left after the reference encoder's downsampling.
    pub fn ref_freq_extent(&self) -> usize {
        let mut f = self.mel_dim;
        for _ in &self.ref_filters {
            f = (f + 2 * (self.ref_kernel / 2) - self.ref_kernel) / self.ref_stride + 1;
        }
        f
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("hidden", self.hidden.to_string()),
            ("phonemes", self.phonemes.to_string()),
            ("mel_dim", self.mel_dim.to_string()),
            ("speakers", self.speakers.to_string()),
            ("emotions", self.emotions.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("fft_kernel", self.fft_kernel.to_string()),
            ("encoder_filters", self.encoder_filters.to_string()),
            ("decoder_filters", self.decoder_filters.to_string()),
            ("attention_heads", self.attention_heads.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            (
                "ref_filters",
                self.ref_filters.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(" "),
            ),
            ("ref_kernel", self.ref_kernel.to_string()),
            ("ref_stride", self.ref_stride.to_string()),
            ("gru_hidden", self.gru_hidden.to_string()),
            ("style_tokens", self.style_tokens.to_string()),
            ("token_dim", self.token_dim.to_string()),
            ("style_heads", self.style_heads.to_string()),
            ("style_attention_hidden", self.style_attention_hidden.to_string()),
            ("variance_filters", self.variance_filters.to_string()),
            ("variance_kernel", self.variance_kernel.to_string()),
            ("variance_dropout", format!("{:?}", self.variance_dropout)),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Applies `key = value` overrides; unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
        }
        match key {
            "hidden" => self.hidden = num(key, value)?,
            "phonemes" => self.phonemes = num(key, value)?,
            "mel_dim" => self.mel_dim = num(key, value)?,
            "speakers" => self.speakers = num(key, value)?,
            "emotions" => self.emotions = num(key, value)?,
            "encoder_layers" => self.encoder_layers = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "fft_kernel" => self.fft_kernel = num(key, value)?,
            "encoder_filters" => self.encoder_filters = num(key, value)?,
            "decoder_filters" => self.decoder_filters = num(key, value)?,
            "attention_heads" => self.attention_heads = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "ref_filters" => {
                self.ref_filters = value
                    .split(|c: char| c.is_whitespace() || c == ',' || c == '-')
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "ref_kernel" => self.ref_kernel = num(key, value)?,
            "ref_stride" => self.ref_stride = num(key, value)?,
            "gru_hidden" => self.gru_hidden = num(key, value)?,
            "style_tokens" => self.style_tokens = num(key, value)?,
            "token_dim" => self.token_dim = num(key, value)?,
            "style_heads" => self.style_heads = num(key, value)?,
            "style_attention_hidden" => self.style_attention_hidden = num(key, value)?,
            "variance_filters" => self.variance_filters = num(key, value)?,
            "variance_kernel" => self.variance_kernel = num(key, value)?,
            "variance_dropout" => self.variance_dropout = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let mut cfg = ModelConfig::toy();
        if let Some(preset) = kv.get(&format!("{prefix}preset")) {
            cfg = match preset {
                "toy" => ModelConfig::toy(),
                "paper" => ModelConfig::paper(),
                other => return Err(Error::Config(format!("unknown preset {other:?}"))),
            };
        }
        for (k, v) in kv.pairs() {
            if let Some(key) = k.strip_prefix(prefix) {
                if key != "preset" {
                    cfg.apply(key, v)?;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimizer and schedule settings shared by all three phases.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: [usize; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augment_fraction: f64,
    pub bn_momentum: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: [3000, 3000, 2000],
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            augment_fraction: 0.5,
            bn_momentum: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(Error::Config("augment_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative (0 disables)".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
        }
        match key {
            "phase1_steps" => self.steps[0] = num(key, value)?,
            "phase2_steps" => self.steps[1] = num(key, value)?,
            "phase3_steps" => self.steps[2] = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "augment_fraction" => self.augment_fraction = num(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "phase1_steps = {}\nphase2_steps = {}\nphase3_steps = {}\nbatch_size = {}\n\
             learning_rate = {:?}\nwarmup_steps = {}\nbeta1 = {:?}\nbeta2 = {:?}\nadam_eps = {:?}\n\
             augment_fraction = {:?}\nbn_momentum = {:?}\ngrad_clip = {:?}\n",
            self.steps[0],
            self.steps[1],
            self.steps[2],
            self.batch_size,
            self.learning_rate,
            self.warmup_steps,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.augment_fraction,
            self.bn_momentum,
            self.grad_clip
        )
    }
}

/// Contents of a config file: `[model]` and `[train]` sections.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str, record: &str) -> Result<Self> {
        let kv = KeyValues::parse(text, record)?;
        for (k, _) in kv.pairs() {
            if !(k.starts_with("model.") || k.starts_with("train.")) {
                return Err(Error::Config(format!("{record}: unknown key {k:?}")));
            }
        }
        let model = ModelConfig::from_key_values(&kv, "model.")?;
        let mut train = TrainConfig::default();
        for (k, v) in kv.pairs() {
            if let Some(key) = k.strip_prefix("train.") {
                train.apply(key, v)?;
            }
        }
        train.validate()?;
        Ok(ConfigFile { model, train })
    }

    pub fn to_text(&self) -> String {
        format!("[model]\n{}\n[train]\n{}", self.model.to_text(), self.train.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        assert_eq!(ModelConfig::toy().ref_freq_extent(), 1);
        assert_eq!(ModelConfig::paper().ref_freq_extent(), 2);
    }

    #[test]
    fn token_heads_must_match_attention_hidden() {
        let cfg = ModelConfig {
            token_dim: 10,
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let mut file = ConfigFile::default();
        file.train.steps = [10, 20, 30];
        file.model.ref_filters = vec![4, 4, 8, 8, 16, 16];
        let back = ConfigFile::parse(&file.to_text(), "cfg").unwrap();
        assert_eq!(file, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ConfigFile::parse("[model]\nhiden = 3\n", "cfg").is_err());
        assert!(ConfigFile::parse("[train]\nsteps = 3\n", "cfg").is_err());
        assert!(ConfigFile::parse("[other]\nx = 3\n", "cfg").is_err());
        assert!(ConfigFile::parse("x = 3\n", "cfg").is_err());
    }

    #[test]
    fn preset_then_override() {
        let f = ConfigFile::parse("[model]\npreset = paper\nencoder_layers = 2\n", "cfg").unwrap();
        assert_eq!(f.model.hidden, 384);
        assert_eq!(f.model.encoder_layers, 2);
        assert_eq!(f.model.ref_filters, vec![32, 32, 64, 64, 128, 128]);
    }
}

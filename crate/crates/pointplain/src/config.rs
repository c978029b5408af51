//! Run configuration: a line-oriented `key = value` format with
//! `[encoder]`, `[decoder]`, `[patchify]`, and `[train]` sections.
//! Unknown sections or keys are rejected; every field has a validated
//! default.

use std::fmt::Write as _;

use crate::embed::PosEmbedKind;
use crate::encoder::{EncoderConfig, PosInjection};
use crate::error::{Error, Result};
use crate::mae::{DecoderConfig, MaeConfig};
use crate::patchify::Grouping;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// File glob; `*` is supported in the final path component.
    Files(String),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // [patchify]
    pub group: Grouping,
    pub patches: usize,
    pub samples: usize,
    pub radius: f64,
    pub kmeans_iters: usize,
    pub fpc_random_sample: bool,

    // [encoder]
    pub encoder: EncoderConfig,
    pub pos_embed: PosEmbedKind,
    pub fourier_sigma: f64,

    // [decoder]
    pub decoder: DecoderConfig,

    // [train]
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub drop_ratio: f64,
    pub mask_ratio: f64,
    pub data: DataSource,
    pub scenes: usize,
    pub n_points: usize,
    pub with_color: bool,
    pub augment: bool,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            group: Grouping::Fpc,
            patches: 512,
            samples: 128,
            radius: 0.2,
            kmeans_iters: 10,
            fpc_random_sample: false,
            encoder: EncoderConfig::default(),
            pos_embed: PosEmbedKind::Global,
            fourier_sigma: 1.0,
            decoder: DecoderConfig::default(),
            epochs: 1,
            batch_size: 4,
            base_lr: 5e-4,
            warmup_epochs: 10,
            seed: 0,
            weight_decay: 0.01,
            clip_norm: 0.1,
            drop_ratio: 0.5,
            mask_ratio: 0.25,
            data: DataSource::Synthetic,
            scenes: 16,
            n_points: 20_000,
            with_color: false,
            augment: true,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn reserve_ratio(&self) -> f64 {
        1.0 - self.drop_ratio - self.mask_ratio
    }

    pub fn partition_ratios(&self) -> (f64, f64, f64) {
        (self.drop_ratio, self.mask_ratio, self.reserve_ratio())
    }

    /// Architecture block consumed by the model builder.
    pub fn mae_config(&self) -> MaeConfig {
        MaeConfig {
            patch_k: self.samples,
            extra_width: if self.with_color { 3 } else { 0 },
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            pos_kind: self.pos_embed,
            fourier_sigma: self.fourier_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let check = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.patches >= 1, "patches must be >= 1")?;
        check(self.samples >= 1, "samples must be >= 1")?;
        check(self.radius > 0.0, "radius must be positive")?;
        check(self.kmeans_iters >= 1, "kmeans_iters must be >= 1")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(
            self.base_lr > 0.0 && self.base_lr.is_finite(),
            "base_lr must be positive",
        )?;
        check(
            self.weight_decay >= 0.0,
            "weight_decay must be non-negative",
        )?;
        check(self.clip_norm >= 0.0, "clip_norm must be non-negative")?;
        check(
            (0.0..=1.0).contains(&self.drop_ratio) && (0.0..=1.0).contains(&self.mask_ratio),
            "drop_ratio and mask_ratio must be in [0, 1]",
        )?;
        check(
            self.reserve_ratio() > 1e-9,
            "drop_ratio + mask_ratio leave no reserved patches",
        )?;
        check(self.scenes >= 1, "scenes must be >= 1")?;
        check(self.n_points >= self.patches, "n_points must be >= patches")?;
        check(self.fourier_sigma > 0.0, "fourier_sigma must be positive")?;
        Ok(())
    }

    /// Canonical text form; `parse` of the output reproduces the config.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[patchify]");
        let _ = writeln!(s, "group = {}", self.group.name());
        let _ = writeln!(s, "patches = {}", self.patches);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "radius = {}", self.radius);
        let _ = writeln!(s, "kmeans_iters = {}", self.kmeans_iters);
        let _ = writeln!(s, "fpc_random_sample = {}", self.fpc_random_sample);
        let _ = writeln!(s, "\n[encoder]");
        let _ = writeln!(s, "layers = {}", self.encoder.layers);
        let _ = writeln!(s, "channels = {}", self.encoder.channels);
        let _ = writeln!(s, "heads = {}", self.encoder.heads);
        let _ = writeln!(s, "ffn_channels = {}", self.encoder.ffn_channels);
        let _ = writeln!(s, "dropout = {}", self.encoder.dropout);
        let _ = writeln!(s, "pos_injection = {}", self.encoder.pos_injection.name());
        let _ = writeln!(s, "post_norm = {}", self.encoder.post_norm);
        let _ = writeln!(s, "pos_embed = {}", self.pos_embed.name());
        let _ = writeln!(s, "fourier_sigma = {}", self.fourier_sigma);
        let _ = writeln!(s, "\n[decoder]");
        let _ = writeln!(s, "layers = {}", self.decoder.layers);
        let _ = writeln!(s, "channels = {}", self.decoder.channels);
        let _ = writeln!(s, "heads = {}", self.decoder.heads);
        let _ = writeln!(s, "ffn_channels = {}", self.decoder.ffn_channels);
        let _ = writeln!(s, "dropout = {}", self.decoder.dropout);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "base_lr = {}", self.base_lr);
        let _ = writeln!(s, "warmup_epochs = {}", self.warmup_epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "drop_ratio = {}", self.drop_ratio);
        let _ = writeln!(s, "mask_ratio = {}", self.mask_ratio);
        let data = match &self.data {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Files(glob) => glob.clone(),
        };
        let _ = writeln!(s, "data = {data}");
        let _ = writeln!(s, "scenes = {}", self.scenes);
        let _ = writeln!(s, "n_points = {}", self.n_points);
        let _ = writeln!(s, "with_color = {}", self.with_color);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: lineno,
                msg,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("bad section header `{line}`")))?;
                match name {
                    "encoder" | "decoder" | "patchify" | "train" => section = name.to_string(),
                    other => return Err(err(format!("unknown section `[{other}]`"))),
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value)
                .map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match (section, key) {
            ("patchify", "group") => self.group = Grouping::parse(value)?,
            ("patchify", "patches") => self.patches = num(key, value)?,
            ("patchify", "samples") => self.samples = num(key, value)?,
            ("patchify", "radius") => self.radius = num(key, value)?,
            ("patchify", "kmeans_iters") => self.kmeans_iters = num(key, value)?,
            ("patchify", "fpc_random_sample") => self.fpc_random_sample = num(key, value)?,

            ("encoder", "layers") => self.encoder.layers = num(key, value)?,
            ("encoder", "channels") => self.encoder.channels = num(key, value)?,
            ("encoder", "heads") => self.encoder.heads = num(key, value)?,
            ("encoder", "ffn_channels") => self.encoder.ffn_channels = num(key, value)?,
            ("encoder", "dropout") => self.encoder.dropout = num(key, value)?,
            ("encoder", "pos_injection") => {
                self.encoder.pos_injection = PosInjection::parse(value)?
            }
            ("encoder", "post_norm") => self.encoder.post_norm = num(key, value)?,
            ("encoder", "pos_embed") => self.pos_embed = PosEmbedKind::parse(value)?,
            ("encoder", "fourier_sigma") => self.fourier_sigma = num(key, value)?,

            ("decoder", "layers") => self.decoder.layers = num(key, value)?,
            ("decoder", "channels") => self.decoder.channels = num(key, value)?,
            ("decoder", "heads") => self.decoder.heads = num(key, value)?,
            ("decoder", "ffn_channels") => self.decoder.ffn_channels = num(key, value)?,
            ("decoder", "dropout") => self.decoder.dropout = num(key, value)?,

            ("train", "epochs") => self.epochs = num(key, value)?,
            ("train", "batch_size") => self.batch_size = num(key, value)?,
            ("train", "base_lr") => self.base_lr = num(key, value)?,
            ("train", "warmup_epochs") => self.warmup_epochs = num(key, value)?,
            ("train", "seed") => self.seed = num(key, value)?,
            ("train", "weight_decay") => self.weight_decay = num(key, value)?,
            ("train", "clip_norm") => self.clip_norm = num(key, value)?,
            ("train", "drop_ratio") => self.drop_ratio = num(key, value)?,
            ("train", "mask_ratio") => self.mask_ratio = num(key, value)?,
            ("train", "data") => {
                self.data = if value == "synthetic" {
                    DataSource::Synthetic
                } else {
                    DataSource::Files(value.to_string())
                };
            }
            ("train", "scenes") => self.scenes = num(key, value)?,
            ("train", "n_points") => self.n_points = num(key, value)?,
            ("train", "with_color") => self.with_color = num(key, value)?,
            ("train", "augment") => self.augment = num(key, value)?,
            ("train", "checkpoint_every") => self.checkpoint_every = num(key, value)?,

            ("", k) => return Err(Error::Config(format!("key `{k}` outside any section"))),
            (s, k) => {
                return Err(Error::Config(format!(
                    "unknown key `{k}` in section `[{s}]`"
                )))
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_round_trips_serialize() {
        let encoder = EncoderConfig {
            layers: 5,
            ..Default::default()
        };
        let cfg = RunConfig {
            patches: 64,
            samples: 32,
            group: Grouping::Ball,
            encoder,
            drop_ratio: 0.4,
            mask_ratio: 0.35,
            seed: 99,
            data: DataSource::Files("scenes/*.ply".into()),
            ..RunConfig::default()
        };
        let text = cfg.serialize();
        let back = RunConfig::parse(&text, "test").unwrap();
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let err = RunConfig::parse("[train]\nnot_a_key = 3\n", "cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg:2") && msg.contains("not_a_key"), "{msg}");
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(RunConfig::parse("[magic]\n", "cfg").is_err());
    }

    #[test]
    fn comments_and_blank_lines_ok() {
        let cfg = RunConfig::parse(
            "# full-line comment\n\n[train]\nepochs = 3 # trailing comment\n",
            "cfg",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn starved_reserve_rejected() {
        let err = RunConfig::parse("[train]\ndrop_ratio = 0.6\nmask_ratio = 0.4\n", "cfg");
        assert!(err.is_err());
    }

    #[test]
    fn key_outside_section_rejected() {
        assert!(RunConfig::parse("epochs = 1\n", "cfg").is_err());
    }
}

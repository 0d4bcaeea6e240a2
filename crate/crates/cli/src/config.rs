//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known to the command reading the file; anything else is an error.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use pour_monitor::model::{EncoderKind, ModelConfig};
use pour_monitor::simulator::SimConfig;
use pour_monitor::train::{TrainConfig, Variant};

pub struct KeyValues {
    source: String,
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn empty() -> Self {
        Self { source: "<none>".into(), entries: BTreeMap::new() }
    }

    pub fn parse(source: &str, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{source}:{}: expected key=value, got '{line}'", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                bail!("{source}:{}: duplicate key '{k}'", i + 1);
            }
        }
        Ok(Self { source: source.into(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&path.display().to_string(), &text)
    }

    /// Rejects keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        if let Some(k) = self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            bail!("{}: unknown key '{k}' (known: {})", self.source, known.join(", "));
        }
        Ok(())
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.entries.get(key) {
            *slot = v.parse().map_err(|e| anyhow!("{}: bad value '{v}' for {key}: {e}", self.source))?;
        }
        Ok(())
    }
}

pub const SIM_KEYS: [&str; 8] = ["frames", "d_img", "imu_samples", "frame_period", "users", "trials", "noise_scale", "seed"];

pub fn sim_config(kv: &KeyValues) -> Result<SimConfig> {
    kv.check_keys(&SIM_KEYS)?;
    let mut c = SimConfig::default();
    kv.set("frames", &mut c.frames)?;
    kv.set("d_img", &mut c.d_img)?;
    kv.set("imu_samples", &mut c.imu_samples)?;
    kv.set("frame_period", &mut c.frame_period)?;
    kv.set("users", &mut c.users)?;
    kv.set("trials", &mut c.trials)?;
    kv.set("noise_scale", &mut c.noise_scale)?;
    kv.set("seed", &mut c.seed)?;
    c.validate()?;
    Ok(c)
}

pub const TRAIN_KEYS: [&str; 17] = [
    "variant",
    "encoder",
    "scale",
    "hidden_img",
    "hidden_pos",
    "hidden_rot",
    "hidden_fuse",
    "generator_width",
    "discriminator_width",
    "monitor_width",
    "lambda",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "clip_norm",
    "aux_success_only",
];

/// Training configuration; `d_img` and `imu_samples` are taken from the data.
pub fn train_config(kv: &KeyValues) -> Result<TrainConfig> {
    kv.check_keys(&TRAIN_KEYS)?;
    let mut c = TrainConfig::default();
    if let Some(scale) = kv.entries.get("scale") {
        c.model = match scale.as_str() {
            "desk" => ModelConfig::desk_scale(),
            "full" => ModelConfig::full_scale(),
            other => bail!("{}: scale must be desk or full, got '{other}'", kv.source),
        };
    }
    kv.set::<Variant>("variant", &mut c.variant)?;
    kv.set::<EncoderKind>("encoder", &mut c.model.encoder)?;
    let m = &mut c.model;
    kv.set("hidden_img", &mut m.hidden_img)?;
    kv.set("hidden_pos", &mut m.hidden_pos)?;
    kv.set("hidden_rot", &mut m.hidden_rot)?;
    kv.set("hidden_fuse", &mut m.hidden_fuse)?;
    kv.set("generator_width", &mut m.generator_width)?;
    kv.set("discriminator_width", &mut m.discriminator_width)?;
    kv.set("monitor_width", &mut m.monitor_width)?;
    kv.set("lambda", &mut c.lambda)?;
    kv.set("learning_rate", &mut c.learning_rate)?;
    kv.set("batch_size", &mut c.batch_size)?;
    kv.set("epochs", &mut c.epochs)?;
    kv.set("seed", &mut c.seed)?;
    kv.set("clip_norm", &mut c.clip_norm)?;
    kv.set("aux_success_only", &mut c.aux_success_only)?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let kv = KeyValues::parse("t", "users=5\ncolour=blue\n").unwrap();
        let e = sim_config(&kv).unwrap_err().to_string();
        assert!(e.contains("colour"), "{e}");
    }

    #[test]
    fn comments_and_overrides() {
        let kv = KeyValues::parse("t", "# one trial\ntrials = 1\n\nseed=3").unwrap();
        let c = sim_config(&kv).unwrap();
        assert_eq!((c.trials, c.seed, c.users), (1, 3, 5));
    }

    #[test]
    fn malformed_lines() {
        assert!(KeyValues::parse("t", "trials").is_err());
        assert!(KeyValues::parse("t", "a=1\na=2").is_err());
        let kv = KeyValues::parse("t", "trials=many").unwrap();
        assert!(sim_config(&kv).is_err());
    }

    #[test]
    fn train_keys() {
        let kv = KeyValues::parse("t", "variant=iosc\nencoder=flat2\nepochs=3\nlearning_rate=0.001").unwrap();
        let c = train_config(&kv).unwrap();
        assert_eq!(c.variant, Variant::Iosc);
        assert_eq!(c.model.encoder, EncoderKind::Flat2);
        assert_eq!((c.epochs, c.learning_rate), (3, 1e-3));
    }
}

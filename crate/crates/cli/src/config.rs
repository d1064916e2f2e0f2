//! Run configuration: preset defaults, overridden by a `key = value` file,
//! overridden by `--set key=value` flags. Keys are dotted paths into the
//! preset tree (`train.g_lr`, `generator.feature_dim`, `run.total_images`);
//! a key that does not exist in the preset is rejected.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Number, Value};

use cgs_core::discriminator::DiscriminatorConfig;
use cgs_core::generator::GeneratorConfig;
use cgs_core::training::{RunOptions, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub tree: Value,
}

/// Defaults for a preset at a given training resolution.
pub fn preset_defaults(preset: &str, resolution: usize) -> Result<Value> {
    let generator = GeneratorConfig::preset(preset)?;
    let (discriminator, train) = if preset == "desk" {
        (DiscriminatorConfig::desk(resolution), TrainConfig::desk())
    } else {
        (DiscriminatorConfig::paper(resolution), TrainConfig::default())
    };
    Ok(json!({
        "seed": 0,
        "generator": generator,
        "discriminator": discriminator,
        "train": train,
        "run": RunOptions::default(),
    }))
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_set_flag(flag: &str) -> Result<(String, String)> {
    let (k, v) = flag.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got `{flag}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Replaces the leaf at dotted `key`, parsing `raw` according to the type
/// already stored there.
pub fn apply_override(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = &mut *tree;
    for part in key.split('.') {
        node =
            node.as_object_mut().and_then(|o| o.get_mut(part)).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    if node.is_object() {
        bail!("config key `{key}` names a section, not a value");
    }
    *node = parse_like(node, raw).with_context(|| format!("config key `{key}`"))?;
    Ok(())
}

fn parse_like(existing: &Value, raw: &str) -> Result<Value> {
    Ok(match existing {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| anyhow!("expected true or false, got `{raw}`"))?),
        Value::Number(n) if n.is_u64() => match raw.parse::<u64>() {
            Ok(u) => Value::Number(u.into()),
            Err(_) => bail!("expected a non-negative integer, got `{raw}`"),
        },
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| anyhow!("expected a number, got `{raw}`"))?;
            Value::Number(Number::from_f64(f).ok_or_else(|| anyhow!("`{raw}` is not finite"))?)
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let parsed = serde_json::from_str::<Value>(raw)
                .ok()
                .filter(Value::is_array)
                .unwrap_or_else(|| Value::Array(raw.split(',').map(|s| Value::String(s.trim().into())).collect()));
            let elems = parsed.as_array().unwrap();
            let template = items.first().cloned().unwrap_or(Value::Null);
            Value::Array(
                elems
                    .iter()
                    .map(|e| match e {
                        Value::String(s) if !template.is_string() && !template.is_null() => parse_like(&template, s),
                        other => Ok(other.clone()),
                    })
                    .collect::<Result<_>>()?,
            )
        }
        Value::Null | Value::Object(_) => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into())),
    })
}

impl RunConfig {
    /// Preset defaults, then `file`, then `sets` (later wins).
    pub fn build(preset: &str, resolution: usize, file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut tree = preset_defaults(preset, resolution)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_config_text(&text).with_context(|| format!("in {}", path.display()))? {
                apply_override(&mut tree, &k, &v).with_context(|| format!("in {}", path.display()))?;
            }
        }
        for s in sets {
            let (k, v) = parse_set_flag(s)?;
            apply_override(&mut tree, &k, &v)?;
        }
        let cfg = Self { preset: preset.to_string(), tree };
        // Surface type and range errors now rather than mid-run.
        cfg.generator()?.validate()?;
        cfg.discriminator()?.validate()?;
        cfg.train()?.validate()?;
        cfg.run()?;
        Ok(cfg)
    }

    fn section<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_value(self.tree[name].clone()).with_context(|| format!("invalid `{name}` section"))
    }

    pub fn seed(&self) -> u64 {
        self.tree["seed"].as_u64().unwrap_or(0)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.tree["seed"] = seed.into();
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        self.section("generator")
    }

    pub fn discriminator(&self) -> Result<DiscriminatorConfig> {
        self.section("discriminator")
    }

    pub fn train(&self) -> Result<TrainConfig> {
        self.section("train")
    }

    pub fn run(&self) -> Result<RunOptions> {
        self.section("run")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_over_file_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "# desk tweaks\ntrain.g_lr = 0.001\ntrain.views = 2\nrun.total_images=64\n").unwrap();
        let sets = vec!["train.g_lr=0.005".to_string()];
        let cfg = RunConfig::build("desk", 32, Some(&file), &sets).unwrap();
        let t = cfg.train().unwrap();
        assert_eq!(t.g_lr, 0.005);
        assert_eq!(t.views, 2);
        assert_eq!(t.d_lr, 0.002);
        assert_eq!(cfg.run().unwrap().total_images, 64);
        assert_eq!(cfg.discriminator().unwrap().resolution, 32);
    }

    #[test]
    fn unknown_and_mistyped_keys_fail() {
        let err = RunConfig::build("desk", 32, None, &["train.glr=1".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("unknown config key `train.glr`"));
        assert!(RunConfig::build("desk", 32, None, &["train.views=two".into()]).is_err());
        assert!(RunConfig::build("desk", 32, None, &["train".into()]).is_err());
        assert!(RunConfig::build("desk", 32, None, &["train=1".into()]).is_err());
        assert!(RunConfig::build("nope", 32, None, &[]).is_err());
        // Range errors surface at build time too.
        assert!(RunConfig::build("desk", 32, None, &["train.views=3".into()]).is_err());
    }

    #[test]
    fn arrays_and_booleans_parse() {
        let cfg = RunConfig::build(
            "desk",
            32,
            None,
            &["generator.upsample_schedule=2,4".into(), "train.contrastive=true".into()],
        )
        .unwrap();
        assert_eq!(cfg.generator().unwrap().upsample_schedule, vec![2, 4]);
        assert!(cfg.train().unwrap().contrastive);
        let bad = parse_config_text("no equals sign").unwrap_err();
        assert!(bad.to_string().contains("line 1"));
    }
}

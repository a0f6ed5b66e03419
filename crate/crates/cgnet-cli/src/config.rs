//! Run configuration: a flat `key = value` file with `#` comments, merged
//! with command-line overrides. Unknown keys are hard errors.

use anyhow::{anyhow, bail, Context, Result};
use cgnet::model::{ActKind, NetworkConfig, Residual, SurMode};
use cgnet::ops::LossReduction;
use cgnet::train::TrainConfig;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    /// Compute the normalization means from the training manifest.
    pub means_auto: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetworkConfig::default(),
            train: TrainConfig::default(),
            means_auto: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| anyhow!("invalid value '{value}' for key '{key}'"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => bail!("invalid boolean '{value}' for key '{key}'"),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, n: Option<usize>) -> Result<Vec<T>> {
    let items: Result<Vec<T>> = value
        .split(',')
        .map(|s| parse::<T>(key, s.trim()))
        .collect();
    let items = items?;
    if let Some(n) = n {
        if items.len() != n {
            bail!("key '{key}' expects {n} comma-separated values, got {}", items.len());
        }
    }
    Ok(items)
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "classes" => self.net.num_classes = parse(key, value)?,
            "m" => self.net.blocks_stage2 = parse(key, value)?,
            "n" => self.net.blocks_stage3 = parse(key, value)?,
            "channels" => {
                let v = parse_list::<usize>(key, value, Some(3))?;
                self.net.stage_channels = [v[0], v[1], v[2]];
            }
            "dilations" => {
                let v = parse_list::<usize>(key, value, Some(2))?;
                self.net.dilations = [v[0], v[1]];
            }
            "input_injection" => self.net.input_injection = parse_bool(key, value)?,
            "sur_mode" => self.net.sur_mode = value.parse::<SurMode>()?,
            "use_glo" => self.net.use_glo = parse_bool(key, value)?,
            "glo_reduction" => self.net.glo_reduction = parse(key, value)?,
            "residual" => self.net.residual = value.parse::<Residual>()?,
            "activation" => self.net.activation = value.parse::<ActKind>()?,
            "interchannel_1x1" => self.net.interchannel_1x1 = parse_bool(key, value)?,
            "base_lr" => self.train.base_lr = parse(key, value)?,
            "power" => self.train.power = parse(key, value)?,
            "max_iter" => self.train.max_iter = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "adam_eps" => self.train.adam_eps = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "crop" => self.train.crop = parse(key, value)?,
            "scales" => self.train.scales = parse_list(key, value, None)?,
            "means" => {
                if value.trim() == "auto" {
                    self.means_auto = true;
                } else {
                    let v = parse_list::<f64>(key, value, Some(3))?;
                    self.train.means = [v[0], v[1], v[2]];
                    self.means_auto = false;
                }
            }
            "ignore_index" => self.train.ignore_index = parse(key, value)?,
            "loss_reduction" => self.train.loss_reduction = value.parse::<LossReduction>()?,
            "checkpoint_interval" => self.train.checkpoint_interval = parse(key, value)?,
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    /// Merge a config file into this configuration.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected 'key = value'", path.display(), lineno + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        }
        Ok(())
    }

    /// The effective configuration, echoable and reloadable.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "classes = {}", self.net.num_classes);
        let _ = writeln!(s, "m = {}", self.net.blocks_stage2);
        let _ = writeln!(s, "n = {}", self.net.blocks_stage3);
        let _ = writeln!(
            s,
            "channels = {},{},{}",
            self.net.stage_channels[0], self.net.stage_channels[1], self.net.stage_channels[2]
        );
        let _ = writeln!(s, "dilations = {},{}", self.net.dilations[0], self.net.dilations[1]);
        let _ = writeln!(s, "input_injection = {}", self.net.input_injection);
        let _ = writeln!(s, "sur_mode = {}", self.net.sur_mode);
        let _ = writeln!(s, "use_glo = {}", self.net.use_glo);
        let _ = writeln!(s, "glo_reduction = {}", self.net.glo_reduction);
        let _ = writeln!(s, "residual = {}", self.net.residual);
        let _ = writeln!(s, "activation = {}", self.net.activation);
        let _ = writeln!(s, "interchannel_1x1 = {}", self.net.interchannel_1x1);
        let _ = writeln!(s, "base_lr = {}", self.train.base_lr);
        let _ = writeln!(s, "power = {}", self.train.power);
        let _ = writeln!(s, "max_iter = {}", self.train.max_iter);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "beta1 = {}", self.train.beta1);
        let _ = writeln!(s, "beta2 = {}", self.train.beta2);
        let _ = writeln!(s, "weight_decay = {}", self.train.weight_decay);
        let _ = writeln!(s, "adam_eps = {}", self.train.adam_eps);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "crop = {}", self.train.crop);
        let scales: Vec<String> = self.train.scales.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "scales = {}", scales.join(","));
        if self.means_auto {
            let _ = writeln!(s, "means = auto");
        } else {
            let _ = writeln!(
                s,
                "means = {},{},{}",
                self.train.means[0], self.train.means[1], self.train.means[2]
            );
        }
        let _ = writeln!(s, "ignore_index = {}", self.train.ignore_index);
        let _ = writeln!(s, "loss_reduction = {}", self.train.loss_reduction);
        let _ = writeln!(s, "checkpoint_interval = {}", self.train.checkpoint_interval);
        s
    }
}

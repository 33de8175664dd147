//! Flat `key=value` run configuration with layered overrides.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::data::{GenSpec, Layout, SplitMode, SplitSpec};
use crate::error::{Error, Result};
use crate::memory::MemoryMode;
use crate::model::{EncoderConfig, Heads, Metric, ModelConfig, Setting};
use crate::training::{EpisodeShape, TrainConfig};

/// Every accepted key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    // files
    ("data", ""),
    ("eval_data", ""),
    ("run", ""),
    ("out", ""),
    // generator
    ("coarse", "4"),
    ("fine_per_coarse", "3"),
    ("dim", "16"),
    ("per_class", "40"),
    ("coarse_sep", "8"),
    ("fine_sep", "1.5"),
    ("noise", "0.6"),
    ("jitter", "0"),
    // split
    ("mode", "meta"),
    ("fractions", "0.6,0.2,0.2"),
    ("coarse_in_every_split", "false"),
    // model
    ("setting", "supervised"),
    ("encoder", "mlp"),
    ("widths", "64,64"),
    ("channels", "8,8,8,8"),
    ("metric", "auto"),
    ("k", "1"),
    ("memory", "mem1"),
    // ablations
    ("hierarchy", "on"),
    ("attention", "on"),
    ("mlp", "on"),
    ("knn", "on"),
    // training
    ("pretrain_epochs", "30"),
    ("finetune_epochs", "5"),
    ("batch_size", "128"),
    ("lr", "0.1"),
    ("finetune_lr", "0.01"),
    ("momentum", "0.9"),
    ("weight_decay", "0.0001"),
    ("iterations", "2000"),
    ("meta_lr", "0.001"),
    ("lr_halve_every", "10000"),
    ("way", "5"),
    ("shot", "5"),
    ("query", "5"),
    ("mem_size", "12"),
    ("refresh", "3"),
    ("gamma", "0.95"),
    ("mu", "1.05"),
    ("eta", "0.95"),
    ("log_every", "100"),
    // evaluation
    ("episodes", "600"),
    ("eval_way", "5"),
    ("eval_shot", "5"),
    ("eval_query", "15"),
];

/// Keys recomputed from the data on every run; accepted in files and ignored.
pub const DERIVED_PREFIX: &str = "data.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn switch(v: &str, key: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be on or off, got `{v}`"))),
    }
}

fn list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` has a bad entry `{s}`")))
        })
        .collect()
}

impl RunConfig {
    /// Sets `key`, rejecting unknown keys. Derived keys are dropped.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        if key.starts_with(DERIVED_PREFIX) {
            return Ok(());
        }
        if !self.values.contains_key(&key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    /// Parses `key=value` (as used by `--set` and `--ablate`).
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Applies a config file: `key=value` lines, `#` comments and blanks ignored.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("`{key}` has an invalid value `{v}`")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        switch(self.get(key), key)
    }

    /// `key=value` lines in key order, followed by `extra` derived lines.
    pub fn render(&self, extra: &[(String, String)]) -> String {
        let mut s = String::from("# hikfs run config\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in extra {
            s.push_str(&format!("{DERIVED_PREFIX}{k}={v}\n"));
        }
        s
    }

    pub fn gen_spec(&self) -> Result<GenSpec> {
        Ok(GenSpec {
            num_coarse: self.parse("coarse")?,
            fine_per_coarse: self.parse("fine_per_coarse")?,
            dim: self.parse("dim")?,
            per_class: self.parse("per_class")?,
            coarse_sep: self.parse("coarse_sep")?,
            fine_sep: self.parse("fine_sep")?,
            noise: self.parse("noise")?,
            jitter: self.parse("jitter")?,
            seed: self.parse("seed")?,
        })
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let mode = match self.get("mode") {
            "meta" => SplitMode::Meta,
            "supervised" => SplitMode::Supervised,
            m => return Err(Error::Config(format!("unknown split mode `{m}`"))),
        };
        let f: Vec<f64> = list(self.get("fractions"), "fractions")?;
        let fractions: [f64; 3] = match f.as_slice() {
            [a, b] => [*a, 0.0, *b],
            [a, b, c] => [*a, *b, *c],
            _ => return Err(Error::Config("`fractions` needs two or three values".into())),
        };
        Ok(SplitSpec {
            mode,
            fractions,
            seed: self.parse("seed")?,
            coarse_in_every_split: self.flag("coarse_in_every_split")?,
        })
    }

    pub fn setting(&self) -> Result<Setting> {
        match self.get("setting") {
            "supervised" => Ok(Setting::Supervised),
            "meta" => Ok(Setting::Meta),
            s => Err(Error::Config(format!("unknown setting `{s}`"))),
        }
    }

    pub fn memory_mode(&self) -> Result<MemoryMode> {
        match self.get("memory") {
            "mem1" => Ok(MemoryMode::Mem1),
            "mem2" => Ok(MemoryMode::Mem2),
            "mem3" => Ok(MemoryMode::Mem3),
            m => Err(Error::Config(format!("unknown memory mode `{m}`"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            seed: self.parse("seed")?,
            pretrain_epochs: self.parse("pretrain_epochs")?,
            finetune_epochs: self.parse("finetune_epochs")?,
            batch_size: self.parse("batch_size")?,
            lr: self.parse("lr")?,
            finetune_lr: self.parse("finetune_lr")?,
            momentum: self.parse("momentum")?,
            weight_decay: self.parse("weight_decay")?,
            iterations: self.parse("iterations")?,
            meta_lr: self.parse("meta_lr")?,
            lr_halve_every: self.parse("lr_halve_every")?,
            episode: EpisodeShape {
                way: self.parse("way")?,
                shot: self.parse("shot")?,
                query: self.parse("query")?,
            },
            memory_mode: self.memory_mode()?,
            mem_size: self.parse("mem_size")?,
            refresh: self.parse("refresh")?,
            gamma: self.parse("gamma")?,
            mu: self.parse("mu")?,
            eta: self.parse("eta")?,
            log_every: self.parse("log_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_shape(&self) -> Result<EpisodeShape> {
        Ok(EpisodeShape {
            way: self.parse("eval_way")?,
            shot: self.parse("eval_shot")?,
            query: self.parse("eval_query")?,
        })
    }

    /// Validates every data-independent key so usage errors surface before
    /// any file is touched.
    pub fn check(&self) -> Result<()> {
        let setting = self.setting()?;
        self.train_config()?;
        self.eval_shape()?;
        for key in ["hierarchy", "attention", "mlp", "knn", "coarse_in_every_split"] {
            self.flag(key)?;
        }
        Heads::for_setting(setting).ablate(setting, self.flag("mlp")?, self.flag("knn")?)?;
        if !matches!(self.get("metric"), "auto" | "cosine" | "euclidean") {
            return Err(Error::Config(format!("unknown metric `{}`", self.get("metric"))));
        }
        if !matches!(self.get("encoder"), "mlp" | "conv4") {
            return Err(Error::Config(format!("unknown encoder `{}`", self.get("encoder"))));
        }
        list::<usize>(self.get("widths"), "widths")?;
        list::<usize>(self.get("channels"), "channels")?;
        if self.parse::<usize>("k")? == 0 {
            return Err(Error::Config("`k` must be at least 1".into()));
        }
        self.parse::<u64>("seed")?;
        self.parse::<usize>("episodes")?;
        Ok(())
    }

    /// Model configuration for data with `num_fine`/`num_coarse` classes and
    /// the given input layout.
    pub fn model_config(&self, num_fine: usize, num_coarse: usize, layout: Layout) -> Result<ModelConfig> {
        let setting = self.setting()?;
        let encoder = match (self.get("encoder"), layout) {
            ("mlp", l) => EncoderConfig::mlp(l.input_dim(), list(self.get("widths"), "widths")?),
            ("conv4", Layout::Image(side)) => {
                let c: Vec<usize> = list(self.get("channels"), "channels")?;
                let channels: [usize; 4] = c
                    .try_into()
                    .map_err(|_| Error::Config("`channels` needs four values".into()))?;
                EncoderConfig::Conv4 { side, channels }
            }
            ("conv4", Layout::Features(_)) => {
                return Err(Error::Config("the conv4 encoder needs image data".into()))
            }
            (e, _) => return Err(Error::Config(format!("unknown encoder `{e}`"))),
        };
        encoder.validate()?;
        let metric = match (self.get("metric"), setting) {
            ("auto", Setting::Supervised) | ("cosine", _) => Metric::DotCosine,
            ("auto", Setting::Meta) | ("euclidean", _) => Metric::NegEuclidean,
            (m, _) => return Err(Error::Config(format!("unknown metric `{m}`"))),
        };
        let heads = Heads::for_setting(setting).ablate(setting, self.flag("mlp")?, self.flag("knn")?)?;
        let k: usize = self.parse("k")?;
        if k == 0 {
            return Err(Error::Config("`k` must be at least 1".into()));
        }
        Ok(ModelConfig {
            setting,
            encoder,
            num_fine,
            num_coarse,
            heads,
            attention: self.flag("attention")?,
            metric,
            k,
        })
    }
}

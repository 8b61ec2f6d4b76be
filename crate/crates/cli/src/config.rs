//! Flat `key = value` run configuration. Every key has a documented
//! default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// `(key, default, description)`; an empty default means "unset".
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out", "runs/default", "output directory of train, eval and spectra"),
    ("model.stages", "4", "encoder stages"),
    ("model.base_channels", "16", "stage-1 width; stage l has base * 2^(l-1)"),
    ("model.input_size", "64", "square input side (power of two)"),
    ("model.prm", "true", "phase rectification at every encoder stage"),
    ("model.oam", "true", "orthogonal attention on skip connections"),
    ("model.attention", "orthogonal", "orthogonal | global_pool"),
    ("model.ssr", "true", "selective style recomposition"),
    ("model.ssr_stages", "1,2", "encoder stages carrying style recomposition"),
    ("model.tau", "0.3", "fraction of channels recomposed"),
    ("model.lambda", "0.3", "weight kept on the original features"),
    ("model.alpha", "0.95", "style prototype momentum"),
    ("model.ranking", "sigma", "channel ranking statistic: sigma | mu"),
    ("model.upsample", "bilinear", "decoder upsampling: bilinear | nearest"),
    ("model.prm_init", "kaiming", "phase rectification branch init: kaiming | zero | zero_last"),
    ("model.oam_init", "kaiming", "last attention conv init: kaiming | zero"),
    ("train.manifests", "", "comma-separated source-domain manifests"),
    ("train.epochs", "30", "training epochs"),
    ("train.lr", "5e-4", "Adam learning rate"),
    ("train.batch", "8", "mini-batch size"),
    ("train.seed", "0", "initialization and shuffling seed"),
    ("train.resume", "false", "continue from <out>/last.ckpt"),
    ("data.out", "data", "dataset root written by gen-data"),
    ("data.preset", "default", "default (stock domains) | phase_pair (two domains differing only in phase jitter)"),
    ("data.domains", "0,1,2", "stock domain ids to generate (default preset)"),
    ("data.phase_jitter_pair", "0.2,2.5", "jitters of the phase_pair preset"),
    ("data.count", "250", "images per domain (80/20 train/val)"),
    ("data.seed", "0", "generator seed"),
    ("data.size", "64", "image side (power of two)"),
    ("data.targets", "1,3", "targets per image, inclusive range"),
    ("data.diameter", "2,9", "target diameter in pixels, inclusive range"),
    ("data.scr", "2,10", "signal-to-clutter ratio range"),
    ("style.beta", "", "override: background spectral slope, [0.5, 3]"),
    ("style.mean", "", "override: background mean"),
    ("style.spread", "", "override: background standard deviation"),
    ("style.clutter_density", "", "override: clutter blobs per 64x64 area"),
    ("style.clutter_scale", "", "override: clutter blob sigma in pixels"),
    ("style.noise_sigma", "", "override: sensor noise sigma"),
    ("style.phase_jitter", "", "override: per-image phase jitter in radians"),
    ("eval.manifest", "", "target-domain manifest"),
    ("eval.checkpoint", "", "model checkpoint (default <out>/best.ckpt)"),
    ("eval.split", "val", "entries evaluated: val | train | all"),
    ("eval.name", "", "dataset label in the report (default: manifest directory name)"),
    ("eval.threshold", "0.5", "probability threshold"),
    ("eval.match_radius", "3", "target match radius in pixels"),
    ("eval.match_rule", "neighborhood", "neighborhood | greedy"),
    ("eval.roc_steps", "20", "ROC thresholds, evenly spaced in (0, 1)"),
    ("eval.allow_seen_domains", "false", "permit evaluating on a training domain"),
    ("eval.dump_activations", "false", "write per-stage decoder activation PGMs"),
    ("eval.oracle", "false", "use the ground truth as the prediction (plumbing check)"),
    ("spectra.manifests", "", "comma-separated manifests to profile"),
];

pub fn is_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

pub const RESOLVED_FILE: &str = "resolved.conf";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| CliError::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut c = RunConfig::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Every key with its value, preceded by its description.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, doc) in KEYS {
            writeln!(s, "# {doc}\n{k} = {}", self.values[*k]).unwrap();
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(RESOLVED_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
    }

    /// `None` when the key is unset.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Config(format!("{key}: cannot parse list item {s:?}")))
            })
            .collect()
    }

    pub fn get_pair<T: FromStr + Copy>(&self, key: &str) -> Result<(T, T), CliError> {
        match self.get_list::<T>(key)?[..] {
            [a, b] => Ok((a, b)),
            _ => Err(CliError::Config(format!("{key}: expected two comma-separated values"))),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }
}

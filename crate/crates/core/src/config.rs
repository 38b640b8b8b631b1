//! Run configuration: one flat JSON object, strict key checking, `key=value`
//! overrides and an echo that parses back to the same resolved values.
//!
//! Precedence, lowest first: built-in defaults, the config file, the
//! dataset-root environment variable, `--set` overrides, `--seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attention::GuidanceMode;
use crate::dataio::{default_patch, DatasetKind, DatasetSpec, Split, StreamConfig};
use crate::dcn::DcnConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalOptions;
use crate::model::{Decomposition, LossReduction, RsagConfig, DEFAULT_LOSS_WEIGHT};
use crate::optim::AdamConfig;

/// Environment variable that overrides `dataset_root`.
pub const DATA_ROOT_ENV: &str = "RSAG_DATA_ROOT";
pub const ECHO_FILE: &str = "config.json";

/// Keys a checkpoint contributes as defaults when a run loads it.
pub const ARCHITECTURE_KEYS: [&str; 15] = [
    "scale",
    "recursion_steps",
    "dcn_layers",
    "dcn_width",
    "base_channels",
    "pyramid_levels",
    "cbam_reduction",
    "lf_fusion_levels",
    "share_lfe",
    "share_hlf",
    "guidance",
    "step0_guidance",
    "decomposition",
    "dataset",
    "dataset_range",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub scale: usize,
    pub recursion_steps: usize,
    pub dcn_layers: usize,
    pub dcn_width: usize,
    pub base_channels: usize,
    pub pyramid_levels: usize,
    pub cbam_reduction: usize,
    pub lf_fusion_levels: usize,
    pub share_lfe: bool,
    pub share_hlf: bool,
    pub guidance: GuidanceMode,
    /// Guidance at step 0; follows `guidance` when unset.
    pub step0_guidance: Option<GuidanceMode>,
    pub decomposition: Decomposition,
    /// `recursion_steps + 1` weights; all 0.5 when unset.
    pub loss_weights: Option<Vec<f64>>,
    pub loss_reduction: LossReduction,
    pub learning_rate: f64,
    pub lr_halve_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,

    pub dataset: DatasetKind,
    pub dataset_root: Option<PathBuf>,
    pub dataset_range: Option<f64>,
    pub train_split: Split,
    pub eval_split: Split,
    /// Patch side; 96 below ×16, 128 at ×16 when unset.
    pub patch: Option<usize>,
    /// Patch stride; equals `patch` when unset.
    pub stride: Option<usize>,
    pub batch_size: usize,

    pub steps: usize,
    pub log_every: usize,
    /// Extra checkpoints every this many steps (0: final only).
    pub checkpoint_every: usize,

    pub checkpoint: Option<PathBuf>,
    pub eval_margin: usize,
    /// Inference tile side in pixels (0 disables tiling).
    pub tile: usize,
    pub tile_margin: usize,
    pub error_maps: bool,
    /// Single-input mode for infer, decompose and viz.
    pub input_depth: Option<PathBuf>,
    pub input_image: Option<PathBuf>,
    /// Treat `input_depth` as already low-resolution.
    pub input_is_lr: bool,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let m = RsagConfig::default();
        let adam = AdamConfig::default();
        Self {
            scale: m.scale,
            recursion_steps: m.recursion_steps,
            dcn_layers: m.dcn.layers,
            dcn_width: m.dcn.width,
            base_channels: m.base_channels,
            pyramid_levels: m.pyramid_levels,
            cbam_reduction: m.cbam_reduction,
            lf_fusion_levels: m.lf_fusion_levels,
            share_lfe: m.share_lfe,
            share_hlf: m.share_hlf,
            guidance: m.guidance,
            step0_guidance: None,
            decomposition: m.decomposition,
            loss_weights: None,
            loss_reduction: m.loss_reduction,
            learning_rate: adam.learning_rate,
            lr_halve_every: adam.halve_every,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            seed: 0,
            dataset: DatasetKind::Middlebury2005,
            dataset_root: None,
            dataset_range: None,
            train_split: Split::Train,
            eval_split: Split::Test,
            patch: None,
            stride: None,
            batch_size: 8,
            steps: 1000,
            log_every: 10,
            checkpoint_every: 0,
            checkpoint: None,
            eval_margin: 0,
            tile: 256,
            tile_margin: 32,
            error_maps: false,
            input_depth: None,
            input_image: None,
            input_is_lr: false,
        }
    }
}

/// Parse `key=value`; the value is read as JSON, else taken as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' is not of the form key=value")))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override '{s}' has an empty key")));
    }
    let value = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((key.to_string(), value))
}

fn from_value(value: Value) -> Result<ConfigFile> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("key '{path}': {inner}"))
        }
    })
}

impl ConfigFile {
    /// Build from config text (empty means defaults) and overrides.
    pub fn parse(text: &str, env_root: Option<&str>, overrides: &[(String, Value)], seed: Option<u64>) -> Result<Self> {
        Self::parse_layered(Map::new(), text, env_root, overrides, seed)
    }

    /// As [`ConfigFile::parse`], with `base` keys underneath the file.
    pub fn parse_layered(
        base: Map<String, Value>,
        text: &str,
        env_root: Option<&str>,
        overrides: &[(String, Value)],
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut root = base;
        if !text.trim().is_empty() {
            match serde_json::from_str::<Value>(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))? {
                Value::Object(m) => root.extend(m),
                other => return Err(Error::Config(format!("config must be a JSON object, found {other}"))),
            }
        }
        if let Some(r) = env_root.filter(|r| !r.is_empty()) {
            root.insert("dataset_root".into(), Value::String(r.to_string()));
        }
        for (k, v) in overrides {
            root.insert(k.clone(), v.clone());
        }
        if let Some(s) = seed {
            root.insert("seed".into(), Value::from(s));
        }
        from_value(Value::Object(root))?.resolve()
    }

    pub fn load(path: &Path, env_root: Option<&str>, overrides: &[(String, Value)], seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        Self::parse(&text, env_root, overrides, seed)
    }

    /// The architecture subset of a stored configuration echo.
    pub fn architecture_of(echo: &Value) -> Map<String, Value> {
        let mut base = Map::new();
        if let Value::Object(m) = echo {
            for k in ARCHITECTURE_KEYS {
                if let Some(v) = m.get(k) {
                    base.insert(k.to_string(), v.clone());
                }
            }
        }
        base
    }

    /// Fill derived defaults and validate.
    pub fn resolve(mut self) -> Result<Self> {
        self.loss_weights.get_or_insert_with(|| vec![DEFAULT_LOSS_WEIGHT; self.recursion_steps + 1]);
        self.step0_guidance.get_or_insert(self.guidance);
        let patch = *self.patch.get_or_insert(default_patch(self.scale));
        self.stride.get_or_insert(patch);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.dataset_spec(self.eval_split).validate()?;
        let patch = self.patch.unwrap_or(0);
        let div = self.model().patch_divisor();
        if patch == 0 || patch % div != 0 {
            return Err(Error::Config(format!(
                "key 'patch': {patch} must be a positive multiple of {div}"
            )));
        }
        if self.stride == Some(0) {
            return Err(Error::Config("key 'stride': must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("key 'batch_size': must be positive".into()));
        }
        if self.tile != 0 && self.tile % self.model().pyramid().divisor() != 0 {
            return Err(Error::Config(format!(
                "key 'tile': must be a multiple of {}",
                self.model().pyramid().divisor()
            )));
        }
        if self.tile_margin % self.model().pyramid().divisor() != 0 {
            return Err(Error::Config(format!(
                "key 'tile_margin': must be a multiple of {}",
                self.model().pyramid().divisor()
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> RsagConfig {
        RsagConfig {
            scale: self.scale,
            recursion_steps: self.recursion_steps,
            dcn: DcnConfig {
                layers: self.dcn_layers,
                width: self.dcn_width,
            },
            base_channels: self.base_channels,
            pyramid_levels: self.pyramid_levels,
            cbam_reduction: self.cbam_reduction,
            lf_fusion_levels: self.lf_fusion_levels,
            share_lfe: self.share_lfe,
            share_hlf: self.share_hlf,
            guidance: self.guidance,
            step0_guidance: self.step0_guidance.unwrap_or(self.guidance),
            decomposition: self.decomposition,
            loss_weights: self
                .loss_weights
                .clone()
                .unwrap_or_else(|| vec![DEFAULT_LOSS_WEIGHT; self.recursion_steps + 1]),
            loss_reduction: self.loss_reduction,
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                halve_every: self.lr_halve_every,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                epsilon: self.adam_epsilon,
            },
            seed: self.seed,
        }
    }

    pub fn dataset_spec(&self, split: Split) -> DatasetSpec {
        DatasetSpec {
            root: self.dataset_root.clone().unwrap_or_default(),
            kind: self.dataset,
            split,
            dataset_range: self.dataset_range,
        }
    }

    pub fn stream(&self) -> StreamConfig {
        let patch = self.patch.unwrap_or(default_patch(self.scale));
        StreamConfig {
            scale: self.scale,
            patch,
            stride: self.stride.unwrap_or(patch),
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn eval_options(&self, trained_range: Option<f64>) -> EvalOptions {
        EvalOptions {
            scale: self.scale,
            margin: self.eval_margin,
            tile: (self.tile > 0).then_some(self.tile),
            tile_margin: self.tile_margin,
            trained_range,
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.echo())?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Eval,
    Infer,
    Decompose,
    Viz,
}

/// One CLI invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<(String, Value)>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Parse the configuration and check what the command needs.
    pub fn resolve(&self, env_root: Option<&str>) -> Result<ConfigFile> {
        self.resolve_layered(Map::new(), env_root)
    }

    /// As [`RunConfig::resolve`], with `base` keys underneath the file.
    pub fn resolve_layered(&self, base: Map<String, Value>, env_root: Option<&str>) -> Result<ConfigFile> {
        let text = match &self.config_path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::load(p, e))?,
            None => String::new(),
        };
        let cfg = ConfigFile::parse_layered(base, &text, env_root, &self.overrides, self.seed)?;
        self.check_paths(&cfg)?;
        Ok(cfg)
    }

    fn check_paths(&self, cfg: &ConfigFile) -> Result<()> {
        let single = cfg.input_depth.is_some() || cfg.input_image.is_some();
        if single && (cfg.input_depth.is_none() || cfg.input_image.is_none()) {
            return Err(Error::Config("input_depth and input_image must be given together".into()));
        }
        let needs_data = match self.command {
            Command::Train | Command::Eval => true,
            Command::Infer | Command::Decompose | Command::Viz => !single,
        };
        if needs_data {
            match &cfg.dataset_root {
                None => {
                    return Err(Error::Config(format!(
                        "missing required key 'dataset_root' (or set {DATA_ROOT_ENV})"
                    )))
                }
                Some(r) if !r.is_dir() => {
                    return Err(Error::Config(format!("key 'dataset_root': {} is not a directory", r.display())))
                }
                _ => {}
            }
        }
        let needs_checkpoint = matches!(self.command, Command::Eval | Command::Infer);
        match &cfg.checkpoint {
            None if needs_checkpoint => return Err(Error::Config("missing required key 'checkpoint'".into())),
            Some(c) if !c.is_file() => {
                return Err(Error::Config(format!("key 'checkpoint': {} does not exist", c.display())))
            }
            _ => {}
        }
        for (key, p) in [("input_depth", &cfg.input_depth), ("input_image", &cfg.input_image)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("key '{key}': {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

//! `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt;

use crate::data::TransformKind;
use crate::experiments::{LrSchedule, Optimizer, TrainConfig};
use crate::models::{deep_backbone, default_backbone, parse_layers, Layer, LocSpec, NetworkSpec};
use crate::spatial::{AffineParams, HeadMode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Keys every config must define (the training fields).
pub const REQUIRED_KEYS: [&str; 10] = [
    "seed",
    "model",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "augmentation",
    "augmentation_range",
    "train_size",
    "test_size",
];

/// Optional keys and their defaults.
pub const OPTIONAL_KEYS: [(&str, &str); 15] = [
    ("canvas", "28"),
    ("data_seed", "0"),
    ("online_augmentation", "false"),
    ("lr_schedule", "constant"),
    ("backbone", "default"),
    ("loc_mode", "full_affine"),
    ("loc_conv", "16,16"),
    ("loc_hidden", "32"),
    ("models", ""),
    ("columns", ""),
    ("sweep_images", "100"),
    ("sweep_angles", "72"),
    ("align_layer", "1"),
    ("align_transform", "rotation:90"),
    ("align_examples", "8"),
];

/// One column of a comparison table: an augmentation on a canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub kind: TransformKind,
    /// Degrees for rotations, pixels for translations.
    pub range: f64,
    pub canvas: usize,
}

impl Column {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub backbone: Vec<Layer>,
    pub loc: LocSpec,
    pub models: Vec<String>,
    pub columns: Vec<Column>,
    pub sweep_images: usize,
    pub sweep_angles: usize,
    pub align_layer: usize,
    pub align_transform: AffineSpec,
    pub align_examples: usize,
    /// Every key with its resolved value, for snapshots.
    pub entries: BTreeMap<String, String>,
}

/// Transform named in a config: `identity`, `rotation:DEG`, `translation:DY:DX`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AffineSpec {
    Identity,
    Rotation(f64),
    Translation(i32, i32),
}

impl AffineSpec {
    pub fn parse(s: &str) -> Option<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        match parts[..] {
            ["identity"] => Some(AffineSpec::Identity),
            ["rotation", d] => d.parse().ok().filter(|v: &f64| v.is_finite()).map(AffineSpec::Rotation),
            ["translation", dy, dx] => Some(AffineSpec::Translation(dy.parse().ok()?, dx.parse().ok()?)),
            _ => None,
        }
    }

    pub fn params(&self, height: usize, width: usize) -> AffineParams {
        match *self {
            AffineSpec::Identity => AffineParams::identity(),
            AffineSpec::Rotation(deg) => AffineParams::rotation(deg.to_radians()),
            AffineSpec::Translation(dy, dx) => AffineParams::pixel_shift(f64::from(dy), f64::from(dx), height, width),
        }
    }
}

/// Raw `key -> (value, line)` pairs.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (String, usize)>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| ConfigError {
            line: Some(line),
            message: format!("expected key = value, got `{content}`"),
        })?;
        let k = k.trim().to_string();
        if !REQUIRED_KEYS.contains(&k.as_str()) && !OPTIONAL_KEYS.iter().any(|(o, _)| *o == k) {
            return Err(ConfigError { line: Some(line), message: format!("unknown key `{k}`") });
        }
        if out.insert(k.clone(), (v.trim().to_string(), line)).is_some() {
            return Err(ConfigError { line: Some(line), message: format!("duplicate key `{k}`") });
        }
    }
    Ok(out)
}

pub fn backbone_preset(name: &str) -> Option<Vec<Layer>> {
    match name {
        "default" => Some(default_backbone()),
        "small" => parse_layers("conv(8) relu pool conv(16) relu pool dense(32) relu dense(10)").ok(),
        "deep8" => Some(deep_backbone([32, 32, 64, 64, 64, 64, 128, 128], 128)),
        "deep8_small" => Some(deep_backbone([8, 8, 16, 16, 16, 16, 32, 32], 32)),
        _ => None,
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl RunConfig {
    /// Parses config text; `seed_override` stands in for a missing or
    /// different `seed` key.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        let mut entries: BTreeMap<String, String> = pairs.iter().map(|(k, (v, _))| (k.clone(), v.clone())).collect();
        if let Some(s) = seed_override {
            entries.insert("seed".into(), s.to_string());
        }
        for key in REQUIRED_KEYS {
            if !entries.contains_key(key) {
                return Err(ConfigError { line: None, message: format!("missing required key `{key}`") });
            }
        }
        for (k, d) in OPTIONAL_KEYS {
            entries.entry(k.to_string()).or_insert_with(|| d.to_string());
        }
        let line_of = |k: &str| pairs.get(k).map(|(_, l)| *l);
        let err = |k: &str, what: &str| ConfigError {
            line: line_of(k),
            message: format!("`{k}`: expected {what}, got `{}`", entries[k]),
        };
        let num = |k: &str| entries[k].parse::<usize>().map_err(|_| err(k, "a non-negative integer"));
        let get = |k: &str| entries[k].as_str();

        let augmentation = TransformKind::parse(get("augmentation")).ok_or_else(|| err("augmentation", "none, rotation or translation"))?;
        let range: f64 = get("augmentation_range").parse().map_err(|_| err("augmentation_range", "a number"))?;
        let train = TrainConfig {
            epochs: num("epochs")?,
            batch_size: num("batch_size")?,
            learning_rate: get("learning_rate").parse().map_err(|_| err("learning_rate", "a number"))?,
            lr_schedule: LrSchedule::parse(get("lr_schedule")).ok_or_else(|| err("lr_schedule", "constant or cosine"))?,
            optimizer: Optimizer::parse(get("optimizer")).ok_or_else(|| err("optimizer", "adam or sgd_momentum"))?,
            seed: get("seed").parse().map_err(|_| err("seed", "an unsigned integer"))?,
            model: get("model").to_string(),
            augmentation,
            augmentation_range: column_range(augmentation, range),
            train_size: num("train_size")?,
            test_size: num("test_size")?,
            canvas: num("canvas")?,
            data_seed: get("data_seed").parse().map_err(|_| err("data_seed", "an unsigned integer"))?,
            online_augmentation: get("online_augmentation").parse().map_err(|_| err("online_augmentation", "true or false"))?,
        };
        if !(train.learning_rate > 0.0) {
            return Err(err("learning_rate", "a positive number"));
        }
        if train.batch_size == 0 {
            return Err(err("batch_size", "at least 1"));
        }
        let backbone = match backbone_preset(get("backbone")) {
            Some(b) => b,
            None => parse_layers(get("backbone")).map_err(|_| err("backbone", "a preset or layer list"))?,
        };
        let loc = LocSpec {
            mode: HeadMode::parse(get("loc_mode")).ok_or_else(|| err("loc_mode", "full_affine or rotation_only"))?,
            conv_channels: list(get("loc_conv")).ok_or_else(|| err("loc_conv", "a list of integers"))?,
            hidden: list(get("loc_hidden")).ok_or_else(|| err("loc_hidden", "a list of integers"))?,
        };
        let models: Vec<String> = list::<String>(get("models")).unwrap_or_default();
        let columns = if get("columns").is_empty() {
            vec![Column { kind: augmentation, range, canvas: train.canvas }]
        } else {
            get("columns")
                .split(',')
                .map(|c| {
                    let parts: Vec<&str> = c.split(':').map(str::trim).collect();
                    match parts[..] {
                        [k, r, cv] => Some(Column {
                            kind: TransformKind::parse(k)?,
                            range: r.parse().ok()?,
                            canvas: cv.parse().ok()?,
                        }),
                        _ => None,
                    }
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err("columns", "kind:range:canvas entries"))?
        };
        let cfg = RunConfig {
            train,
            backbone,
            loc,
            models,
            columns,
            sweep_images: num("sweep_images")?,
            sweep_angles: num("sweep_angles")?,
            align_layer: num("align_layer")?,
            align_transform: AffineSpec::parse(get("align_transform"))
                .ok_or_else(|| err("align_transform", "identity, rotation:DEG or translation:DY:DX"))?,
            align_examples: num("align_examples")?,
            entries,
        };
        for name in std::iter::once(&cfg.train.model).chain(&cfg.models) {
            cfg.spec_for(name, cfg.train.canvas).map_err(|e| ConfigError {
                line: line_of(if *name == cfg.train.model { "model" } else { "models" }),
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn spec_for(&self, model: &str, canvas: usize) -> crate::Result<NetworkSpec> {
        NetworkSpec::named(model, (1, canvas, canvas), self.backbone.clone(), self.loc.clone())
    }

    pub fn spec(&self) -> crate::Result<NetworkSpec> {
        self.spec_for(&self.train.model, self.train.canvas)
    }

    /// Training config for one comparison cell.
    pub fn cell_config(&self, model: &str, column: &Column, seed: u64) -> TrainConfig {
        TrainConfig {
            model: model.to_string(),
            seed,
            augmentation: column.kind,
            augmentation_range: column_range(column.kind, column.range),
            canvas: column.canvas,
            ..self.train.clone()
        }
    }

    /// `key=value` lines in key order.
    pub fn snapshot(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Config ranges are degrees for rotations; the library uses radians.
fn column_range(kind: TransformKind, range: f64) -> f64 {
    match kind {
        TransformKind::Rotation => range.to_radians(),
        _ => range,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "seed = 3\nmodel = stn_sl1\nepochs = 2\nbatch_size = 16\nlearning_rate = 0.001\noptimizer = adam\naugmentation = rotation\naugmentation_range = 90\ntrain_size = 100\ntest_size = 50\n";

    #[test]
    fn parses_and_snapshots() {
        let c = RunConfig::parse(&format!("# comment\n{BASE}backbone = small  # trailing\n"), None).unwrap();
        assert_eq!(c.train.seed, 3);
        assert!((c.train.augmentation_range - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(c.columns.len(), 1);
        assert!(c.snapshot().contains("backbone=small\n"));
        let again = RunConfig::parse(&c.snapshot(), None).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn errors_name_lines_and_keys() {
        let e = RunConfig::parse(&format!("{BASE}colour = red\n"), None).unwrap_err();
        assert_eq!(e.line, Some(11));
        assert!(e.message.contains("colour"));
        let e = RunConfig::parse(&BASE.replace("seed = 3\n", ""), None).unwrap_err();
        assert!(e.to_string().contains("`seed`"));
        assert!(RunConfig::parse(&BASE.replace("seed = 3\n", ""), Some(4)).is_ok());
        let e = RunConfig::parse(&BASE.replace("epochs = 2", "epochs = two"), None).unwrap_err();
        assert_eq!(e.line, Some(3));
        let e = RunConfig::parse(&BASE.replace("stn_sl1", "stn_sl9"), None).unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(RunConfig::parse("just text\n", None).unwrap_err().line == Some(1));
    }
}

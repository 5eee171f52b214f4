//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! seed = 7
//! data.kind = two-surfaces-seg
//! layer.0.type = deform
//! layer.0.out = 8
//! ```
//!
//! `#` starts a comment. Keys may appear once. Unknown keys are rejected so
//! that typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deformconv_core::deform::{AnchorGrid, DEFAULT_NEIGHBOR_CAP, DEFAULT_UNIT};
use deformconv_core::nn::{Neighborhood, StackBuilder, DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
use deformconv_core::pointcloud::SynthKind;
use deformconv_core::baselines::DEFAULT_HIDDEN;

use crate::error::{CliError, CliResult};

/// Raw key/value pairs with the line each came from.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
    origin: String,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(CliError::config(format!("{origin}:{}: bad key `{k}`", i + 1)));
            }
            if let Some((_, first)) = entries.insert(k.to_string(), (v.to_string(), i + 1)) {
                return Err(CliError::config(format!(
                    "{origin}:{}: key `{k}` already set on line {first}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            entries,
            origin: origin.to_string(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn err(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        match self.entries.get(key) {
            Some((_, line)) => CliError::config(format!("{}:{line}: `{key}`: {msg}", self.origin)),
            None => CliError::config(format!("{}: `{key}`: {msg}", self.origin)),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| self.err(key, format!("cannot parse `{v}`: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> CliResult<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>().map_err(|e| self.err(key, format!("cannot parse `{s}`: {e}"))))
                    .collect()
            })
            .transpose()
    }
}

const KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "checkpoint",
    "data.path",
    "data.kind",
    "data.clouds",
    "data.points",
    "data.noise",
    "data.train",
    "data.seed",
    "model.radius",
    "model.cap",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "export.layer",
    "bench.sizes",
    "bench.k",
    "bench.cap",
    "bench.channels",
    "bench.reps",
    "bench.density",
    "compare.pitch",
    "compare.displacement",
    "compare.hidden",
];

const LAYER_FIELDS: &[&str] = &["type", "out", "k", "a", "hidden", "from"];

/// Synthetic data settings, or a directory written by `gen-data`.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub clouds: usize,
    pub points: usize,
    pub noise: f64,
    /// The first `train` clouds form the training split, the rest the test split.
    pub train: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerDesc {
    Deform { out: usize, k: usize, a: [f64; 3] },
    Separable { out: usize, k: usize, a: [f64; 3] },
    Pcc { out: usize, hidden: Vec<usize> },
    Linear { out: usize },
    Relu,
    Concat { from: usize },
    MaxPool,
}

impl LayerDesc {
    pub fn grid(&self) -> Option<CliResult<AnchorGrid<f64>>> {
        match self {
            LayerDesc::Deform { k, a, .. } | LayerDesc::Separable { k, a, .. } => {
                Some(AnchorGrid::new(*k, *a).map_err(CliError::from))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// Defaults to the largest filter support among the convolution layers.
    pub radius: Option<f64>,
    pub cap: usize,
    pub layers: Vec<LayerDesc>,
}

impl ModelSpec {
    pub fn neighborhood(&self) -> CliResult<Neighborhood<f64>> {
        let radius = match self.radius {
            Some(r) => r,
            None => {
                let mut r = AnchorGrid::cubic(3, DEFAULT_UNIT)?.support_radius();
                for l in &self.layers {
                    if let Some(g) = l.grid() {
                        r = r.max(g?.support_radius());
                    }
                }
                r
            }
        };
        Ok(Neighborhood { radius, cap: self.cap })
    }

    pub fn builder(&self, in_dim: usize) -> CliResult<StackBuilder<f64>> {
        let mut b = StackBuilder::new(in_dim, self.neighborhood()?);
        for l in &self.layers {
            b = match l {
                LayerDesc::Deform { out, .. } => b.deform(*out, l.grid().expect("conv layer")?),
                LayerDesc::Separable { out, .. } => b.separable(*out, l.grid().expect("conv layer")?),
                LayerDesc::Pcc { out, hidden } => b.pcc(*out, hidden),
                LayerDesc::Linear { out } => b.linear(*out),
                LayerDesc::Relu => b.relu(),
                LayerDesc::Concat { from } => b.concat(*from),
                LayerDesc::MaxPool => b.max_pool(),
            };
        }
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub sizes: Vec<usize>,
    pub ks: Vec<usize>,
    pub cap: usize,
    pub channels: usize,
    pub reps: usize,
    /// Points per cubic meter of the random benchmark clouds.
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSettings {
    pub pitch: f64,
    pub displacement: f64,
    pub hidden: Vec<usize>,
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub data: DataSource,
    pub model: ModelSpec,
    pub train: TrainSettings,
    pub export_layer: usize,
    pub bench: BenchSettings,
    pub compare: CompareSettings,
}

impl RunConfig {
    /// Validates `raw`; `seed` and `out_dir` override the file's values.
    pub fn from_raw(raw: &RawConfig, seed: Option<u64>, out_dir: Option<PathBuf>) -> CliResult<Self> {
        for key in raw.keys() {
            if !known_key(key) {
                return Err(raw.err(key, "unknown key"));
            }
        }
        let seed = match seed {
            Some(s) => s,
            None => raw
                .get("seed")?
                .ok_or_else(|| CliError::config("a seed is required (`seed = N` or --seed N)"))?,
        };
        let out_dir = out_dir
            .or(raw.get::<String>("out_dir")?.map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));

        let data = match raw.get::<String>("data.path")? {
            Some(p) => DataSource::Dir(PathBuf::from(p)),
            None => {
                let kind: SynthKind = raw
                    .get::<String>("data.kind")?
                    .unwrap_or_else(|| "two-surfaces-seg".into())
                    .parse()
                    .map_err(|e| raw.err("data.kind", e))?;
                let clouds = raw.get_or("data.clouds", 500)?;
                let train = raw.get_or("data.train", clouds * 4 / 5)?;
                if train > clouds {
                    return Err(raw.err("data.train", format!("exceeds data.clouds = {clouds}")));
                }
                DataSource::Synth(SynthSpec {
                    kind,
                    clouds,
                    points: raw.get_or("data.points", 256)?,
                    noise: raw.get_or("data.noise", 0.01)?,
                    train,
                    seed: raw.get_or("data.seed", seed)?,
                })
            }
        };

        let model = ModelSpec {
            radius: raw.get("model.radius")?,
            cap: raw.get_or("model.cap", DEFAULT_NEIGHBOR_CAP)?,
            layers: parse_layers(raw)?,
        };
        if let Some(r) = model.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(raw.err("model.radius", "must be positive"));
            }
        }
        if model.cap == 0 {
            return Err(raw.err("model.cap", "must be at least 1"));
        }

        let train = TrainSettings {
            epochs: raw.get_or("train.epochs", 30)?,
            batch_size: raw.get_or("train.batch_size", 8)?,
            lr: raw.get_or("train.lr", DEFAULT_LR)?,
            weight_decay: raw.get_or("train.weight_decay", DEFAULT_WEIGHT_DECAY)?,
        };
        if train.batch_size == 0 {
            return Err(raw.err("train.batch_size", "must be at least 1"));
        }
        if !(train.lr > 0.0) || !(train.weight_decay >= 0.0) {
            return Err(CliError::config("train.lr must be positive and train.weight_decay non-negative"));
        }

        let bench = BenchSettings {
            sizes: raw.list("bench.sizes")?.unwrap_or_else(|| vec![1000, 10_000]),
            ks: raw.list("bench.k")?.unwrap_or_else(|| vec![3, 7]),
            cap: raw.get_or("bench.cap", DEFAULT_NEIGHBOR_CAP)?,
            channels: raw.get_or("bench.channels", 4)?,
            reps: raw.get_or("bench.reps", 5)?,
            density: raw.get_or("bench.density", 100.0)?,
        };
        if bench.sizes.iter().any(|&m| m == 0) || bench.reps == 0 || bench.cap == 0 || bench.channels == 0 {
            return Err(CliError::config("bench sizes, reps, cap and channels must be positive"));
        }
        if !(bench.density > 0.0) {
            return Err(raw.err("bench.density", "must be positive"));
        }

        let compare = CompareSettings {
            pitch: raw.get_or("compare.pitch", DEFAULT_UNIT)?,
            displacement: raw.get_or("compare.displacement", 0.05)?,
            hidden: raw.list("compare.hidden")?.unwrap_or_else(|| DEFAULT_HIDDEN.to_vec()),
        };

        Ok(Self {
            seed,
            out_dir,
            checkpoint: raw.get::<String>("checkpoint")?.map(PathBuf::from),
            data,
            model,
            train,
            export_layer: raw.get_or("export.layer", 0)?,
            bench,
            compare,
        })
    }
}

fn known_key(key: &str) -> bool {
    if KEYS.contains(&key) {
        return true;
    }
    let mut parts = key.split('.');
    matches!(
        (parts.next(), parts.next(), parts.next(), parts.next()),
        (Some("layer"), Some(i), Some(f), None) if i.parse::<usize>().is_ok() && LAYER_FIELDS.contains(&f)
    )
}

fn parse_unit(raw: &RawConfig, key: &str) -> CliResult<[f64; 3]> {
    match raw.list::<f64>(key)? {
        None => Ok([DEFAULT_UNIT; 3]),
        Some(v) if v.len() == 1 => Ok([v[0]; 3]),
        Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
        Some(_) => Err(raw.err(key, "expected one or three unit lengths")),
    }
}

fn parse_layers(raw: &RawConfig) -> CliResult<Vec<LayerDesc>> {
    let count = raw
        .keys()
        .filter_map(|k| k.strip_prefix("layer.")?.split('.').next()?.parse::<usize>().ok())
        .max()
        .map_or(0, |m| m + 1);
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let key = |f: &str| format!("layer.{i}.{f}");
        let kind: String = raw
            .get(&key("type"))?
            .ok_or_else(|| CliError::config(format!("layer {i} has no `layer.{i}.type`")))?;
        let out = || -> CliResult<usize> {
            match raw.get::<usize>(&key("out"))? {
                Some(0) => Err(raw.err(&key("out"), "must be at least 1")),
                Some(o) => Ok(o),
                None => Err(CliError::config(format!("layer {i} ({kind}) needs `layer.{i}.out`"))),
            }
        };
        let layer = match kind.as_str() {
            "deform" | "separable" => {
                let k = raw.get_or(&key("k"), 3)?;
                let a = parse_unit(raw, &key("a"))?;
                if kind == "deform" {
                    LayerDesc::Deform { out: out()?, k, a }
                } else {
                    LayerDesc::Separable { out: out()?, k, a }
                }
            }
            "pcc" => LayerDesc::Pcc {
                out: out()?,
                hidden: raw.list(&key("hidden"))?.unwrap_or_else(|| DEFAULT_HIDDEN.to_vec()),
            },
            "linear" => LayerDesc::Linear { out: out()? },
            "relu" => LayerDesc::Relu,
            "concat" => LayerDesc::Concat {
                from: raw
                    .get(&key("from"))?
                    .ok_or_else(|| CliError::config(format!("layer {i} (concat) needs `layer.{i}.from`")))?,
            },
            "maxpool" => LayerDesc::MaxPool,
            other => return Err(raw.err(&key("type"), format!("unknown layer type `{other}`"))),
        };
        if let Some(g) = layer.grid() {
            g.map_err(|e| CliError::config(format!("layer {i}: {e}")))?;
        }
        layers.push(layer);
    }
    if layers.is_empty() {
        layers = default_layers();
    }
    Ok(layers)
}

/// Two deformable layers of 8 and 16 channels and a pointwise head.
pub fn default_layers() -> Vec<LayerDesc> {
    let a = [DEFAULT_UNIT; 3];
    vec![
        LayerDesc::Deform { out: 8, k: 3, a },
        LayerDesc::Relu,
        LayerDesc::Deform { out: 16, k: 3, a },
        LayerDesc::Relu,
        LayerDesc::Linear { out: 2 },
    ]
}

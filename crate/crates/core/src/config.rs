//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! net.input = 3x32x32
//! net.classes = 10
//! net.layer1.kind = dau
//! net.layer1.features = 32
//! net.layer1.units = 4
//! net.layer1.sigma = 0.5
//! train.base_lr = 0.01
//! train.lr_steps = 15:0.001
//! ```
//!
//! Every key must be known; missing keys take their defaults. When any
//! `net.layerN.kind` key is present the whole layer list comes from the
//! keys; otherwise `net.layerN.*` keys adjust fields of the default layers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::dau::{DmuMode, DEFAULT_MAX_DISPLACEMENT};
use crate::error::{Error, Result};
use crate::network::{LayerSpec, NetworkSpec};
use crate::train::TrainConfig;

/// Raw keys and values, before interpretation.
pub type Properties = BTreeMap<String, String>;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are rejected.
pub fn parse_properties(text: &str) -> Result<Properties> {
    let mut map = Properties::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = split_assignment(line).ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(map)
}

fn split_assignment(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    if k.is_empty() || k.contains(char::is_whitespace) {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

/// Applies a command-line `key=value` override; it replaces any file value.
pub fn apply_override(map: &mut Properties, assignment: &str) -> Result<()> {
    let (k, v) = split_assignment(assignment)
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    map.insert(k, v);
    Ok(())
}

fn take<T: FromStr>(map: &mut Properties, key: &str) -> Result<Option<T>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
    }
}

fn take_or<T: FromStr>(map: &mut Properties, key: &str, default: T) -> Result<T> {
    Ok(take(map, key)?.unwrap_or(default))
}

fn required<T: FromStr>(map: &mut Properties, key: &str) -> Result<T> {
    take(map, key)?.ok_or_else(|| Error::Config(format!("missing key {key}")))
}

fn parse_dims(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split('x')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: expected CxHxW, got {v:?}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected CxHxW, got {v:?}")))
}

fn parse_lr_steps(v: &str) -> Result<Vec<(usize, f64)>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let bad = || Error::Config(format!("train.lr_steps: expected epoch:lr, got {item:?}"));
            let (e, lr) = item.split_once(':').ok_or_else(bad)?;
            Ok((e.trim().parse().map_err(|_| bad())?, lr.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Reads the `net.*` keys into a spec.
pub fn spec_from_properties(map: &mut Properties, default: &NetworkSpec) -> Result<NetworkSpec> {
    let input = match map.remove("net.input") {
        Some(v) => parse_dims("net.input", &v)?,
        None => default.input,
    };
    let classes = take_or(map, "net.classes", default.classes)?;
    let mut indices: Vec<usize> = Vec::new();
    for key in map.keys() {
        if let Some(rest) = key.strip_prefix("net.layer") {
            let num = rest.split('.').next().unwrap_or("");
            let i: usize = num
                .parse()
                .map_err(|_| Error::Config(format!("unknown key {key}")))?;
            if !indices.contains(&i) {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    let full_list = indices.iter().any(|i| map.contains_key(&format!("net.layer{i}.kind")));
    let layers = if !full_list {
        overlay_layers(map, &default.layers, &indices)?
    } else {
        if indices != (1..=indices.len()).collect::<Vec<_>>() {
            return Err(Error::Config(format!("layers must be numbered 1..N without gaps, got {indices:?}")));
        }
        let mut layers = Vec::with_capacity(indices.len());
        for i in indices {
            let key = |f: &str| format!("net.layer{i}.{f}");
            let kind: String = required(map, &key("kind"))?;
            let layer = match kind.as_str() {
                "dau" => LayerSpec::Dau {
                    features: required(map, &key("features"))?,
                    units: required(map, &key("units"))?,
                    sigma: required(map, &key("sigma"))?,
                    max_displacement: take_or(map, &key("max_displacement"), DEFAULT_MAX_DISPLACEMENT)?,
                },
                "conv" => LayerSpec::Conv {
                    features: required(map, &key("features"))?,
                    kernel: required(map, &key("kernel"))?,
                },
                "batchnorm" => LayerSpec::BatchNorm,
                "relu" => LayerSpec::Relu,
                "maxpool" => LayerSpec::MaxPool,
                "fc" => LayerSpec::Fc {
                    outputs: required(map, &key("outputs"))?,
                },
                other => return Err(Error::Config(format!("{}: unknown layer kind {other:?}", key("kind")))),
            };
            layers.push(layer);
        }
        layers
    };
    let spec = NetworkSpec { input, classes, layers };
    spec.shapes().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

/// Field overrides on the default layer list, e.g. `net.layer1.features = 8`.
fn overlay_layers(map: &mut Properties, default: &[LayerSpec], indices: &[usize]) -> Result<Vec<LayerSpec>> {
    let mut layers = default.to_vec();
    for &i in indices {
        let layer = layers
            .get_mut(i.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("net.layer{i}: no such layer (give net.layer{i}.kind to define it)")))?;
        let key = |f: &str| format!("net.layer{i}.{f}");
        match layer {
            LayerSpec::Dau {
                features,
                units,
                sigma,
                max_displacement,
            } => {
                *features = take_or(map, &key("features"), *features)?;
                *units = take_or(map, &key("units"), *units)?;
                *sigma = take_or(map, &key("sigma"), *sigma)?;
                *max_displacement = take_or(map, &key("max_displacement"), *max_displacement)?;
            }
            LayerSpec::Conv { features, kernel } => {
                *features = take_or(map, &key("features"), *features)?;
                *kernel = take_or(map, &key("kernel"), *kernel)?;
            }
            LayerSpec::Fc { outputs } => *outputs = take_or(map, &key("outputs"), *outputs)?,
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::MaxPool => {}
        }
    }
    Ok(layers)
}

/// Canonical `net.*` lines for a spec.
pub fn spec_to_text(spec: &NetworkSpec) -> String {
    let mut s = String::new();
    let [c, h, w] = spec.input;
    let _ = writeln!(s, "net.input = {c}x{h}x{w}");
    let _ = writeln!(s, "net.classes = {}", spec.classes);
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = format!("net.layer{}", i + 1);
        let _ = writeln!(s, "{p}.kind = {}", layer.kind());
        match layer {
            LayerSpec::Dau {
                features,
                units,
                sigma,
                max_displacement,
            } => {
                let _ = writeln!(s, "{p}.features = {features}");
                let _ = writeln!(s, "{p}.units = {units}");
                let _ = writeln!(s, "{p}.sigma = {sigma}");
                let _ = writeln!(s, "{p}.max_displacement = {max_displacement}");
            }
            LayerSpec::Conv { features, kernel } => {
                let _ = writeln!(s, "{p}.features = {features}");
                let _ = writeln!(s, "{p}.kernel = {kernel}");
            }
            LayerSpec::Fc { outputs } => {
                let _ = writeln!(s, "{p}.outputs = {outputs}");
            }
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::MaxPool => {}
        }
    }
    s
}

/// Parses a spec written by [`spec_to_text`]; every key must be consumed.
pub fn spec_from_text(text: &str) -> Result<NetworkSpec> {
    let mut map = parse_properties(text)?;
    for key in ["net.input", "net.classes", "net.layer1.kind"] {
        if !map.contains_key(key) {
            return Err(Error::Config(format!("missing key {key}")));
        }
    }
    let spec = spec_from_properties(&mut map, &RunConfig::default().net)?;
    reject_leftovers(&map)?;
    Ok(spec)
}

fn reject_leftovers(map: &Properties) -> Result<()> {
    match map.keys().next() {
        None => Ok(()),
        Some(k) => Err(Error::Config(format!("unknown key {k}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    /// Use only the first `n` training records; `None` keeps all.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

/// Everything a run needs besides paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub net: NetworkSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Write a checkpoint every `n` epochs (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    /// The desk-scale CIFAR-10 protocol: the shallow DAU net, 10,000
    /// training images, 20 epochs, batch 128, rate 0.01 then 0.001 from
    /// epoch 15.
    fn default() -> Self {
        Self {
            net: NetworkSpec::shallow_dau([32, 32, 64], [4, 4, 4], 0.5),
            train: TrainConfig {
                batch_size: 128,
                epochs: 20,
                lr_steps: vec![(15, 0.001)],
                ..TrainConfig::default()
            },
            data: DataConfig {
                train_limit: Some(10_000),
                test_limit: None,
            },
            checkpoint_every: 5,
        }
    }
}

fn limit(v: usize) -> Option<usize> {
    (v > 0).then_some(v)
}

impl RunConfig {
    /// Interprets all keys, starting from [`RunConfig::default`].
    pub fn from_properties(mut map: Properties) -> Result<Self> {
        let d = Self::default();
        let net = spec_from_properties(&mut map, &d.net)?;
        let m = &mut map;
        let lr_steps = match m.remove("train.lr_steps") {
            Some(v) => parse_lr_steps(&v)?,
            None => d.train.lr_steps.clone(),
        };
        let dmu_mode = match m.remove("train.dmu_mode") {
            Some(v) => v.parse::<DmuMode>().map_err(|e| Error::Config(format!("train.dmu_mode: {e}")))?,
            None => d.train.dmu_mode,
        };
        let train = TrainConfig {
            batch_size: take_or(m, "train.batch_size", d.train.batch_size)?,
            epochs: take_or(m, "train.epochs", d.train.epochs)?,
            base_lr: take_or(m, "train.base_lr", d.train.base_lr)?,
            lr_steps,
            momentum: take_or(m, "train.momentum", d.train.momentum)?,
            weight_decay: take_or(m, "train.weight_decay", d.train.weight_decay)?,
            seed: take_or(m, "train.seed", d.train.seed)?,
            dmu_mode,
            decay_on_displacements: take_or(m, "train.decay_on_displacements", d.train.decay_on_displacements)?,
            mu_lr_mult: take_or(m, "train.mu_lr_mult", d.train.mu_lr_mult)?,
            mirror: take_or(m, "train.mirror", d.train.mirror)?,
        };
        let data = DataConfig {
            train_limit: limit(take_or(m, "data.train_limit", d.data.train_limit.unwrap_or(0))?),
            test_limit: limit(take_or(m, "data.test_limit", d.data.test_limit.unwrap_or(0))?),
        };
        let checkpoint_every = take_or(m, "train.checkpoint_every", d.checkpoint_every)?;
        reject_leftovers(&map)?;
        train.validate()?;
        Ok(Self {
            net,
            train,
            data,
            checkpoint_every,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_properties(parse_properties(text)?)
    }

    /// Every setting as `key = value` lines; parses back to `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = spec_to_text(&self.net);
        let steps: Vec<String> = t.lr_steps.iter().map(|(e, lr)| format!("{e}:{lr}")).collect();
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.base_lr = {}", t.base_lr);
        let _ = writeln!(s, "train.lr_steps = {}", steps.join(","));
        let _ = writeln!(s, "train.momentum = {}", t.momentum);
        let _ = writeln!(s, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.dmu_mode = {}", t.dmu_mode);
        let _ = writeln!(s, "train.decay_on_displacements = {}", t.decay_on_displacements);
        let _ = writeln!(s, "train.mu_lr_mult = {}", t.mu_lr_mult);
        let _ = writeln!(s, "train.mirror = {}", t.mirror);
        let _ = writeln!(s, "train.checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "data.train_limit = {}", self.data.train_limit.unwrap_or(0));
        let _ = writeln!(s, "data.test_limit = {}", self.data.test_limit.unwrap_or(0));
        s
    }
}

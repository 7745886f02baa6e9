//! Displacement statistics, amplification-threshold pruning and parameter
//! accounting for trained networks.
//!
//! Functions take 0-based positions in the layer list. Every `layer` field of
//! the produced records and reports is 1-based, matching the `net.layerN`
//! configuration keys.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::dau::{init_grid, DauLayerParams};
use crate::error::{Error, Result};
use crate::network::{Layer, Network};

pub const DEFAULT_BIN_WIDTH: f64 = 0.25;
pub const DEFAULT_FRACTIONS: [f64; 3] = [1.0, 0.9, 0.75];

/// One active unit of a DAU layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitRecord {
    pub layer: usize,
    pub feature: usize,
    pub channel: usize,
    pub unit: usize,
    pub mu_x: f64,
    pub mu_y: f64,
    pub abs_w: f64,
}

impl UnitRecord {
    pub fn distance(&self) -> f64 {
        self.mu_x.hypot(self.mu_y)
    }
}

/// `|w|`-weighted histogram of unit distances to the filter center.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisplacementStats {
    pub layer: usize,
    pub retained_fraction: f64,
    pub bin_width: f64,
    /// `bins + 1` edges starting at 0; bin `i` is `[edges[i], edges[i + 1])`.
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    /// Retained units, largest `|w|` first.
    pub records: Vec<UnitRecord>,
}

impl DisplacementStats {
    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }
}

/// Retained units plus the layer's initialization positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterExport {
    pub layer: usize,
    pub retained_fraction: f64,
    pub records: Vec<UnitRecord>,
    pub init_points: Vec<[f64; 2]>,
}

fn unit_records(index: usize, p: &DauLayerParams) -> Vec<UnitRecord> {
    let layer = index + 1;
    let mut out = Vec::with_capacity(p.active_units());
    for f in 0..p.out_features {
        for s in 0..p.in_channels {
            for k in 0..p.units {
                let i = p.unit_index(f, s, k);
                if p.active[i] {
                    out.push(UnitRecord {
                        layer,
                        feature: f,
                        channel: s,
                        unit: k,
                        mu_x: p.mu[i][0] as f64,
                        mu_y: p.mu[i][1] as f64,
                        abs_w: (p.w[i] as f64).abs(),
                    });
                }
            }
        }
    }
    out
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("retained fraction must be in (0, 1], got {fraction}")))
    }
}

/// Number of units kept out of `total`: `ceil(fraction * total)`, with a
/// small guard so that e.g. `2/3 * 3` keeps 2 rather than 3 after rounding.
pub fn retained_count(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64 - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// The `ceil(fraction * n)` active units with the largest `|w|`; ties go to
/// the lowest unit index.
fn top_units(layer: usize, p: &DauLayerParams, fraction: f64) -> Result<Vec<UnitRecord>> {
    check_fraction(fraction)?;
    let mut records = unit_records(layer, p);
    let keep = retained_count(fraction, records.len());
    // Stable sort keeps index order among equal magnitudes.
    records.sort_by(|a, b| b.abs_w.total_cmp(&a.abs_w));
    records.truncate(keep);
    Ok(records)
}

/// Bin count covering `[0, R_d + 1]` and every reachable distance (at most
/// `sqrt(2) * R_d` for clamped displacements).
fn bin_count(max_displacement: f64, bin_width: f64) -> usize {
    let span = ((max_displacement + 1.0) / bin_width).ceil() as usize;
    let reach = (std::f64::consts::SQRT_2 * max_displacement / bin_width).floor() as usize + 1;
    span.max(reach)
}

pub fn distance_histogram(net: &Network, layer: usize, retained_fraction: f64, bin_width: f64) -> Result<DisplacementStats> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::InvalidParam(format!("bin width must be > 0, got {bin_width}")));
    }
    let p = net.dau(layer)?;
    let records = top_units(layer, p, retained_fraction)?;
    let bins = bin_count(p.max_displacement, bin_width);
    let edges = (0..=bins).map(|i| i as f64 * bin_width).collect();
    let mut mass = vec![0.0; bins];
    for r in &records {
        let b = ((r.distance() / bin_width).floor() as usize).min(bins - 1);
        mass[b] += r.abs_w;
    }
    Ok(DisplacementStats {
        layer: layer + 1,
        retained_fraction,
        bin_width,
        edges,
        mass,
        records,
    })
}

pub fn scatter_export(net: &Network, layer: usize, retained_fraction: f64) -> Result<ScatterExport> {
    let p = net.dau(layer)?;
    let records = top_units(layer, p, retained_fraction)?;
    let r = p.max_displacement;
    let init_points = init_grid(p.units)
        .into_iter()
        .map(|[x, y]| [x.clamp(-r, r), y.clamp(-r, r)])
        .collect();
    Ok(ScatterExport {
        layer: layer + 1,
        retained_fraction,
        records,
        init_points,
    })
}

/// Columns: `bin_lo,bin_hi,mass`.
pub fn write_histogram_csv(out: impl Write, stats: &DisplacementStats) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_lo", "bin_hi", "mass"])?;
    for (i, m) in stats.mass.iter().enumerate() {
        w.write_record([stats.edges[i].to_string(), stats.edges[i + 1].to_string(), m.to_string()])?;
    }
    w.flush()
}

/// Columns: `kind,layer,feature,channel,unit,mu_x,mu_y,abs_w`. Unit rows have
/// kind `unit`; initialization points have kind `init` and leave feature,
/// channel and `abs_w` empty.
pub fn write_scatter_csv(out: impl Write, export: &ScatterExport) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "layer", "feature", "channel", "unit", "mu_x", "mu_y", "abs_w"])?;
    for r in &export.records {
        w.write_record([
            "unit".to_string(),
            r.layer.to_string(),
            r.feature.to_string(),
            r.channel.to_string(),
            r.unit.to_string(),
            r.mu_x.to_string(),
            r.mu_y.to_string(),
            r.abs_w.to_string(),
        ])?;
    }
    for (k, [x, y]) in export.init_points.iter().enumerate() {
        w.write_record([
            "init".to_string(),
            export.layer.to_string(),
            String::new(),
            String::new(),
            k.to_string(),
            x.to_string(),
            y.to_string(),
            String::new(),
        ])?;
    }
    w.flush()
}

/// Reference magnitude that `tau` is relative to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    /// Largest `|w|` within the same DAU layer.
    #[default]
    LayerMax,
    /// Largest `|w|` across every DAU layer of the network.
    GlobalMax,
    /// Largest `|w|` within the same output feature (all channels and units).
    FilterMax,
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer-max" => Ok(Self::LayerMax),
            "global-max" => Ok(Self::GlobalMax),
            "filter-max" => Ok(Self::FilterMax),
            other => Err(Error::Config(format!(
                "unknown threshold policy '{other}' (layer-max|global-max|filter-max)"
            ))),
        }
    }
}

impl std::fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LayerMax => "layer-max",
            Self::GlobalMax => "global-max",
            Self::FilterMax => "filter-max",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPruneRow {
    pub layer: usize,
    pub units: usize,
    /// Units that were active before and are inactive now.
    pub removed: usize,
    pub active_after: usize,
    pub removed_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub tau: f64,
    pub policy: ThresholdPolicy,
    pub layers: Vec<LayerPruneRow>,
    pub total_units: usize,
    pub removed: usize,
    pub removed_pct: f64,
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

fn max_abs(v: impl Iterator<Item = f32>) -> f64 {
    v.map(|x| (x as f64).abs()).fold(0.0, f64::max)
}

/// Deactivates every active unit with `|w| < tau * reference` and zeroes its
/// amplification. `tau = 0` leaves the network untouched.
pub fn prune_by_relative_threshold(net: &Network, tau: f64, policy: ThresholdPolicy) -> Result<(Network, PruneReport)> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::InvalidParam(format!("tau must be a finite value >= 0, got {tau}")));
    }
    let mut out = net.clone();
    let global = net
        .dau_layers()
        .into_iter()
        .map(|l| net.dau(l).map(|p| max_abs(p.w.iter().copied())))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let mut rows = Vec::new();
    for l in net.dau_layers() {
        let p = out.dau_mut(l)?;
        let layer_max = max_abs(p.w.iter().copied());
        let per_filter = p.in_channels * p.units;
        let mut removed = 0;
        for f in 0..p.out_features {
            let span = f * per_filter..(f + 1) * per_filter;
            let reference = match policy {
                ThresholdPolicy::LayerMax => layer_max,
                ThresholdPolicy::GlobalMax => global,
                ThresholdPolicy::FilterMax => max_abs(p.w[span.clone()].iter().copied()),
            };
            let threshold = tau * reference;
            for i in span {
                if p.active[i] && (p.w[i] as f64).abs() < threshold {
                    p.active[i] = false;
                    p.w[i] = 0.0;
                    removed += 1;
                }
            }
        }
        rows.push(LayerPruneRow {
            layer: l + 1,
            units: p.num_units(),
            removed,
            active_after: p.active_units(),
            removed_pct: pct(removed, p.num_units()),
        });
    }
    let total_units = rows.iter().map(|r| r.units).sum();
    let removed = rows.iter().map(|r| r.removed).sum();
    let report = PruneReport {
        tau,
        policy,
        layers: rows,
        total_units,
        removed,
        removed_pct: pct(removed, total_units),
    };
    Ok((out, report))
}

impl PruneReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("tau {}  policy {}\n", self.tau, self.policy);
        let _ = writeln!(s, "{:>6} {:>10} {:>10} {:>12} {:>10}", "layer", "units", "removed", "active_after", "removed%");
        for r in &self.layers {
            let _ = writeln!(
                s,
                "{:>6} {:>10} {:>10} {:>12} {:>10.3}",
                r.layer, r.units, r.removed, r.active_after, r.removed_pct
            );
        }
        let _ = writeln!(
            s,
            "{:>6} {:>10} {:>10} {:>12} {:>10.3}",
            "total",
            self.total_units,
            self.removed,
            self.total_units - self.removed,
            self.removed_pct
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerParamRow {
    pub layer: usize,
    pub kind: &'static str,
    /// Output features (filters); channels for batch norm, outputs for FC.
    pub filters: usize,
    /// Units of one 2-D filter: `K` for DAU, `kH * kW` for dense conv.
    pub units_per_filter: usize,
    /// Parameters of one 2-D filter: `3K` for DAU, `kH * kW` for dense conv.
    pub params_per_filter: usize,
    /// Active units (DAU) or weights (other layers).
    pub units: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterReport {
    pub layers: Vec<LayerParamRow>,
    /// Sum over DAU layers: `3 * active units + F`.
    pub dau_params: usize,
    /// Every trainable parameter of the network.
    pub total_params: usize,
}

pub fn parameter_report(net: &Network) -> ParameterReport {
    let mut rows = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let row = match layer {
            Layer::Dau { params: p, .. } => LayerParamRow {
                layer: i + 1,
                kind: "dau",
                filters: p.out_features,
                units_per_filter: p.units,
                params_per_filter: 3 * p.units,
                units: p.active_units(),
                params: 3 * p.active_units() + p.out_features,
            },
            Layer::Conv(p) => {
                let per = p.kernel_h * p.kernel_w;
                LayerParamRow {
                    layer: i + 1,
                    kind: "conv",
                    filters: p.out_features,
                    units_per_filter: per,
                    params_per_filter: per,
                    units: p.weights.len(),
                    params: p.weights.len() + p.bias.len(),
                }
            }
            Layer::BatchNorm(s) => LayerParamRow {
                layer: i + 1,
                kind: "batchnorm",
                filters: s.channels(),
                units_per_filter: 0,
                params_per_filter: 0,
                units: 0,
                params: 2 * s.channels(),
            },
            Layer::Fc(p) => LayerParamRow {
                layer: i + 1,
                kind: "fc",
                filters: p.out_features,
                units_per_filter: 0,
                params_per_filter: 0,
                units: p.weights.len(),
                params: p.weights.len() + p.bias.len(),
            },
            Layer::Relu | Layer::MaxPool => continue,
        };
        rows.push(row);
    }
    let dau_params = rows.iter().filter(|r| r.kind == "dau").map(|r| r.params).sum();
    let total_params = rows.iter().map(|r| r.params).sum();
    ParameterReport {
        layers: rows,
        dau_params,
        total_params,
    }
}

impl ParameterReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>6} {:>10} {:>8} {:>14} {:>16} {:>10} {:>10}\n",
            "layer", "kind", "filters", "units/filter", "params/filter", "units", "params"
        );
        for r in &self.layers {
            let _ = writeln!(
                s,
                "{:>6} {:>10} {:>8} {:>14} {:>16} {:>10} {:>10}",
                r.layer, r.kind, r.filters, r.units_per_filter, r.params_per_filter, r.units, r.params
            );
        }
        let _ = writeln!(s, "dau params {}", self.dau_params);
        let _ = writeln!(s, "total params {}", self.total_params);
        s
    }
}

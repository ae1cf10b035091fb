//! Conductance drift models and the weight ↔ conductance mapping.
//!
//! The analytic model draws an additive log-time Gaussian drift followed by a
//! multiplicative device-variation factor:
//!
//! ```text
//! g_drift ~ N(a_mu·ln t, (a_sigma·ln t + b_sigma)²)
//! g_real  = (g_target + g_drift) · (1 + ε),   ε ~ N(0, sigma_eps²)
//! ```
//!
//! The measured model replaces this with per-state Gaussians read from a
//! table, linearly interpolated between programmed levels.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{dequantize, QuantizedTensor};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticDriftParams {
    /// µS per unit of ln(t).
    pub a_mu: f64,
    /// µS per unit of ln(t).
    pub a_sigma: f64,
    /// µS.
    pub b_sigma: f64,
    pub sigma_eps: f64,
}

impl Default for AnalyticDriftParams {
    fn default() -> Self {
        Self {
            a_mu: 0.089,
            a_sigma: 0.042,
            b_sigma: 0.4118,
            sigma_eps: 0.05,
        }
    }
}

impl AnalyticDriftParams {
    /// All stochastic terms off; only the mean drift remains.
    pub fn noiseless(self) -> Self {
        Self {
            a_sigma: 0.0,
            b_sigma: 0.0,
            sigma_eps: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.a_mu, self.a_sigma, self.b_sigma, self.sigma_eps];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("drift parameters must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

fn check_time(t: f64) -> Result<()> {
    if t.is_nan() || t < 1.0 {
        Err(Error::Domain(format!("drift time must be >= 1 s, got {t}")))
    } else {
        Ok(())
    }
}

/// Mean additive drift in µS after `t` seconds.
pub fn drift_mean(t: f64, params: &AnalyticDriftParams) -> Result<f64> {
    check_time(t)?;
    Ok(params.a_mu * t.ln())
}

/// Standard deviation of the additive drift in µS after `t` seconds.
pub fn drift_std(t: f64, params: &AnalyticDriftParams) -> Result<f64> {
    check_time(t)?;
    Ok(params.a_sigma * t.ln() + params.b_sigma)
}

/// One draw of the drifted conductance. May be negative; clamping is the
/// caller's policy (see [`DriftModel::sample`]).
pub fn sample_drifted_conductance<R: Rng + ?Sized>(
    g_target: f64,
    t: f64,
    params: &AnalyticDriftParams,
    rng: &mut R,
) -> Result<f64> {
    if g_target.is_nan() || g_target < 0.0 {
        return Err(Error::Domain(format!("target conductance must be >= 0, got {g_target}")));
    }
    let mu = drift_mean(t, params)?;
    let sigma = drift_std(t, params)?;
    Ok(analytic_draw(g_target, mu, sigma, params.sigma_eps, rng))
}

#[inline]
fn analytic_draw<R: Rng + ?Sized>(g: f64, mu: f64, sigma: f64, sigma_eps: f64, rng: &mut R) -> f64 {
    let z_drift: f64 = rng.sample(StandardNormal);
    let z_eps: f64 = rng.sample(StandardNormal);
    (g + mu + sigma * z_drift) * (1.0 + sigma_eps * z_eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftLevel {
    pub g_level: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// Per-state drift statistics measured at a single reference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredDriftTable {
    pub reference_time: f64,
    entries: Vec<DriftLevel>,
}

pub const MEASURED_TABLE_HEADER: [&str; 3] = ["g_level_uS", "mu_uS", "sigma_uS"];

impl MeasuredDriftTable {
    pub fn new(reference_time: f64, entries: Vec<DriftLevel>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::Config(format!(
                "measured drift table needs at least 2 levels, got {}",
                entries.len()
            )));
        }
        if !(reference_time.is_finite() && reference_time >= 1.0) {
            return Err(Error::Config(format!("reference time must be >= 1 s, got {reference_time}")));
        }
        for pair in entries.windows(2) {
            if !(pair[1].g_level > pair[0].g_level) {
                return Err(Error::Config(format!(
                    "levels must be strictly increasing: {} then {}",
                    pair[0].g_level, pair[1].g_level
                )));
            }
        }
        if let Some(e) = entries.iter().find(|e| !(e.sigma >= 0.0) || !e.mu.is_finite()) {
            return Err(Error::Config(format!("invalid level statistics {e:?}")));
        }
        Ok(Self {
            reference_time,
            entries,
        })
    }

    pub fn entries(&self) -> &[DriftLevel] {
        &self.entries
    }

    /// Linear interpolation of (μ, σ) in `g`, clamped to the end levels.
    pub fn interpolate(&self, g: f64) -> (f64, f64) {
        let first = self.entries[0];
        let last = self.entries[self.entries.len() - 1];
        if g <= first.g_level {
            return (first.mu, first.sigma);
        }
        if g >= last.g_level {
            return (last.mu, last.sigma);
        }
        let hi = self.entries.partition_point(|e| e.g_level <= g);
        let (a, b) = (self.entries[hi - 1], self.entries[hi]);
        if a.g_level == g {
            return (a.mu, a.sigma);
        }
        let f = (g - a.g_level) / (b.g_level - a.g_level);
        (a.mu + f * (b.mu - a.mu), a.sigma + f * (b.sigma - a.sigma))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    /// Parses `# reference_time_s=<float>` plus a `g_level_uS,mu_uS,sigma_uS` table.
    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut reference_time = None;
        let mut offset = 0u64;
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(rest) = trimmed.strip_prefix('#') {
                let rest = rest.trim();
                match rest.strip_prefix("reference_time_s=") {
                    Some(v) => {
                        let v: f64 = v.trim().parse().map_err(|_| {
                            Error::format(origin, Some(offset), format!("bad reference time {v:?}"))
                        })?;
                        if reference_time.replace(v).is_some() {
                            return Err(Error::format(origin, Some(offset), "duplicate reference_time_s"));
                        }
                    }
                    None => {
                        return Err(Error::format(origin, Some(offset), format!("unknown directive {rest:?}")))
                    }
                }
            }
            offset += line.len() as u64 + 1;
        }
        let reference_time =
            reference_time.ok_or_else(|| Error::format(origin, None, "missing `# reference_time_s=` line"))?;

        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != MEASURED_TABLE_HEADER {
            return Err(Error::format(
                origin,
                Some(0),
                format!("expected header {:?}, found {:?}", MEASURED_TABLE_HEADER.join(","), header),
            ));
        }
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let at = rec.position().map(|p| p.byte());
            if rec.len() != 3 {
                return Err(Error::format(origin, at, format!("expected 3 fields, found {}", rec.len())));
            }
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| Error::format(origin, at, format!("not a number: {:?}", &rec[i])))
            };
            entries.push(DriftLevel {
                g_level: num(0)?,
                mu: num(1)?,
                sigma: num(2)?,
            });
        }
        Self::new(reference_time, entries)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# reference_time_s={}\n{}\n", self.reference_time, MEASURED_TABLE_HEADER.join(","));
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.g_level, e.mu, e.sigma));
        }
        out
    }
}

/// One draw from the measured per-state model: `g_target + N(μ(g), σ(g)²)`.
pub fn sample_measured_drift<R: Rng + ?Sized>(g_target: f64, table: &MeasuredDriftTable, rng: &mut R) -> f64 {
    let (mu, sigma) = table.interpolate(g_target);
    let z: f64 = rng.sample(StandardNormal);
    g_target + mu + sigma * z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DriftKind {
    Analytic(AnalyticDriftParams),
    /// Time-independent snapshot taken at the table's reference time.
    Measured(MeasuredDriftTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    pub kind: DriftKind,
    /// Clamp sampled conductances at 0 µS.
    pub clamp_negative: bool,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self::analytic(AnalyticDriftParams::default())
    }
}

impl DriftModel {
    pub fn analytic(params: AnalyticDriftParams) -> Self {
        Self {
            kind: DriftKind::Analytic(params),
            clamp_negative: true,
        }
    }

    pub fn measured(table: MeasuredDriftTable) -> Self {
        Self {
            kind: DriftKind::Measured(table),
            clamp_negative: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            DriftKind::Analytic(p) => p.validate(),
            DriftKind::Measured(_) => Ok(()),
        }
    }

    /// Draws drifted conductances for every target in `targets`, writing into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, targets: &[f64], t: f64, rng: &mut R, out: &mut Vec<f64>) -> Result<()> {
        check_time(t)?;
        out.clear();
        out.reserve(targets.len());
        match &self.kind {
            DriftKind::Analytic(p) => {
                let mu = drift_mean(t, p)?;
                let sigma = drift_std(t, p)?;
                out.extend(targets.iter().map(|&g| analytic_draw(g, mu, sigma, p.sigma_eps, rng)));
            }
            DriftKind::Measured(table) => {
                out.extend(targets.iter().map(|&g| sample_measured_drift(g, table, rng)));
            }
        }
        if self.clamp_negative {
            for g in out.iter_mut() {
                *g = g.max(0.0);
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, g_target: f64, t: f64, rng: &mut R) -> Result<f64> {
        let mut out = Vec::with_capacity(1);
        self.sample_into(&[g_target], t, rng, &mut out)?;
        Ok(out[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    #[default]
    SingleDeviceAffine,
    DifferentialPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConductanceMap {
    pub g_min: f64,
    pub g_max: f64,
    pub encoding: Encoding,
    pub w_absmax: f64,
}

impl Default for ConductanceMap {
    fn default() -> Self {
        Self {
            g_min: 5.0,
            g_max: 40.0,
            encoding: Encoding::SingleDeviceAffine,
            w_absmax: 1.0,
        }
    }
}

/// Conductances for one tensor. Differential encoding stores `w ∝ g⁺ − g⁻`.
#[derive(Debug, Clone, PartialEq)]
pub enum Conductances {
    Single(Vec<f64>),
    Differential { pos: Vec<f64>, neg: Vec<f64> },
}

impl ConductanceMap {
    pub fn with_absmax(self, w_absmax: f64) -> Self {
        Self { w_absmax, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g_min.is_finite() && self.g_max.is_finite() && self.g_min >= 0.0 && self.g_min < self.g_max) {
            return Err(Error::Config(format!(
                "conductance range must satisfy 0 <= g_min < g_max, got [{}, {}]",
                self.g_min, self.g_max
            )));
        }
        if !(self.w_absmax.is_finite() && self.w_absmax > 0.0) {
            return Err(Error::Config(format!("w_absmax must be > 0, got {}", self.w_absmax)));
        }
        Ok(())
    }

    fn span(&self) -> f64 {
        self.g_max - self.g_min
    }

    pub fn weights_to_conductance(&self, w: &[f64]) -> Result<Conductances> {
        self.validate()?;
        // tolerate the last-ulp excess of scale·max_level over w_absmax
        let limit = self.w_absmax * (1.0 + 1e-12);
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(v.abs() <= limit)) {
            return Err(Error::Range(format!(
                "weight {v} at index {i} outside ±{}",
                self.w_absmax
            )));
        }
        let span = self.span();
        Ok(match self.encoding {
            Encoding::SingleDeviceAffine => Conductances::Single(
                w.iter()
                    .map(|&v| self.g_min + (v + self.w_absmax) / (2.0 * self.w_absmax) * span)
                    .collect(),
            ),
            Encoding::DifferentialPair => {
                let mut pos = Vec::with_capacity(w.len());
                let mut neg = Vec::with_capacity(w.len());
                for &v in w {
                    let dg = v.abs() / self.w_absmax * span;
                    if v >= 0.0 {
                        pos.push(self.g_min + dg);
                        neg.push(self.g_min);
                    } else {
                        pos.push(self.g_min);
                        neg.push(self.g_min + dg);
                    }
                }
                Conductances::Differential { pos, neg }
            }
        })
    }

    /// Exact inverse of the affine map, applied without clamping.
    pub fn conductance_to_weights(&self, g: &Conductances) -> Vec<f64> {
        let span = self.span();
        match g {
            Conductances::Single(g) => g
                .iter()
                .map(|&x| (x - self.g_min) / span * 2.0 * self.w_absmax - self.w_absmax)
                .collect(),
            Conductances::Differential { pos, neg } => pos
                .iter()
                .zip(neg)
                .map(|(p, n)| (p - n) / span * self.w_absmax)
                .collect(),
        }
    }

    /// Inverse map expressed as a correction to the original weights, so an
    /// unchanged conductance returns `w` bit for bit.
    pub fn apply_conductance_change(&self, w: &[f64], before: &Conductances, after: &Conductances) -> Vec<f64> {
        let span = self.span();
        match (before, after) {
            (Conductances::Single(g0), Conductances::Single(g1)) => w
                .iter()
                .zip(g0.iter().zip(g1))
                .map(|(w, (a, b))| w + (b - a) / span * 2.0 * self.w_absmax)
                .collect(),
            (Conductances::Differential { pos: p0, neg: n0 }, Conductances::Differential { pos: p1, neg: n1 }) => (0..w
                .len())
                .map(|i| w[i] + ((p1[i] - p0[i]) - (n1[i] - n0[i])) / span * self.w_absmax)
                .collect(),
            _ => panic!("conductance encodings differ"),
        }
    }
}

/// Weights of every drifted layer for one drift instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftedWeights {
    pub values: Vec<Vec<f64>>,
    pub drift_time: f64,
    pub seed: u64,
}

/// Dequantize, map to conductance, sample one drifted conductance per device
/// and map back. Each layer uses its own full-scale weight as `w_absmax`.
pub fn inject_drift(
    layers: &[&QuantizedTensor],
    t: f64,
    model: &DriftModel,
    map: &ConductanceMap,
    seed: u64,
) -> Result<DriftedWeights> {
    check_time(t)?;
    let mut rng = rng_from_seed(seed);
    let mut buf = Vec::new();
    let mut values = Vec::with_capacity(layers.len());
    for q in layers {
        let w = dequantize(q);
        let layer_map = map.with_absmax(q.abs_max());
        let g = layer_map.weights_to_conductance(&w)?;
        let drifted = match &g {
            Conductances::Single(g) => {
                model.sample_into(g, t, &mut rng, &mut buf)?;
                Conductances::Single(std::mem::take(&mut buf))
            }
            Conductances::Differential { pos, neg } => {
                let mut p = Vec::new();
                model.sample_into(pos, t, &mut rng, &mut p)?;
                model.sample_into(neg, t, &mut rng, &mut buf)?;
                Conductances::Differential {
                    pos: p,
                    neg: std::mem::take(&mut buf),
                }
            }
        };
        values.push(layer_map.apply_conductance_change(&w, &g, &drifted));
    }
    Ok(DriftedWeights {
        values,
        drift_time: t,
        seed,
    })
}

//! The spatial external-field prior.
//!
//! For each class `j` the prior at site `i` is the log of a Gaussian mixture
//! over displacement distances, with one component per reference site of
//! class `j`:
//!
//! ```text
//! field[i, j] = log( (1 / n_j) * sum_{h in j} phi(dist(h, i) | mu, sigma2) )
//! ```
//!
//! `Exact` mode evaluates the sum directly. `Approx` mode keeps only the
//! nearest component, `log phi(min_h dist(h, i) | mu, sigma2)`, using an exact
//! Euclidean distance transform. Values are clamped below at
//! [`LOG_DENSITY_FLOOR`].

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checksum_hex;
use crate::lattice::LatticeSpec;
use crate::potts::LabelField;

/// Lower clamp for stored log-densities.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

/// Displacement mean and variance for one class (millimetres, mm²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaParams {
    pub mu_delta: f64,
    pub sigma2_delta: f64,
}

impl DeltaParams {
    pub fn new(mu_delta: f64, sigma2_delta: f64) -> Result<Self> {
        let p = Self {
            mu_delta,
            sigma2_delta,
        };
        p.validate()?;
        Ok(p)
    }

    /// From a mean and a standard deviation.
    pub fn from_sd(mu_delta: f64, sd: f64) -> Result<Self> {
        Self::new(mu_delta, sd * sd)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma2_delta > 0.0 && self.sigma2_delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma2_delta must be positive, got {}",
                self.sigma2_delta
            )));
        }
        if !(self.mu_delta >= 0.0 && self.mu_delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "mu_delta must be non-negative, got {}",
                self.mu_delta
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn log_density(&self, distance: f64) -> f64 {
        let d = distance - self.mu_delta;
        -0.5 * (2.0 * PI * self.sigma2_delta).ln() - d * d / (2.0 * self.sigma2_delta)
    }
}

/// Displacement hyperparameters: a default plus optional per-class
/// overrides, indexed by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaHyper {
    pub mu_delta: f64,
    pub sigma2_delta: f64,
    #[serde(default)]
    pub per_label: Vec<Option<DeltaParams>>,
}

impl DeltaHyper {
    pub fn new(mu_delta: f64, sigma2_delta: f64) -> Result<Self> {
        DeltaParams::new(mu_delta, sigma2_delta)?;
        Ok(Self {
            mu_delta,
            sigma2_delta,
            per_label: Vec::new(),
        })
    }

    /// Every class given explicitly; the default is taken from class 0.
    pub fn from_per_label(params: &[DeltaParams]) -> Result<Self> {
        let first = params
            .first()
            .ok_or_else(|| Error::InvalidConfig("no per-label hyperparameters".into()))?;
        let mut h = Self::new(first.mu_delta, first.sigma2_delta)?;
        for p in params {
            p.validate()?;
        }
        h.per_label = params.iter().copied().map(Some).collect();
        Ok(h)
    }

    pub fn with_override(mut self, label: usize, params: DeltaParams) -> Result<Self> {
        params.validate()?;
        if self.per_label.len() <= label {
            self.per_label.resize(label + 1, None);
        }
        self.per_label[label] = Some(params);
        Ok(self)
    }

    pub fn for_label(&self, label: usize) -> DeltaParams {
        self.per_label
            .get(label)
            .copied()
            .flatten()
            .unwrap_or(DeltaParams {
                mu_delta: self.mu_delta,
                sigma2_delta: self.sigma2_delta,
            })
    }

    pub fn validate(&self) -> Result<()> {
        DeltaParams::new(self.mu_delta, self.sigma2_delta)?;
        self.per_label
            .iter()
            .flatten()
            .try_for_each(DeltaParams::validate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldMode {
    Exact,
    Approx,
}

impl FieldMode {
    /// Exact evaluation costs one term per (site, reference site) pair;
    /// use it while that count stays at or below 2^20.
    pub fn auto(n_sites: usize) -> Self {
        if (n_sites as u128) * (n_sites as u128) <= 1 << 20 {
            FieldMode::Exact
        } else {
            FieldMode::Approx
        }
    }
}

impl std::str::FromStr for FieldMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "approx" => Ok(Self::Approx),
            other => Err(Error::InvalidConfig(format!(
                "unknown field mode '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldOptions {
    pub mode: FieldMode,
    /// Fill classes absent from the reference with the floor value instead
    /// of failing.
    pub allow_empty_classes: bool,
}

impl FieldOptions {
    pub fn new(mode: FieldMode) -> Self {
        Self {
            mode,
            allow_empty_classes: false,
        }
    }
}

/// Minimum Euclidean distance (mm) from each site to the nearest reference
/// site of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    label: usize,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn new(label: usize, values: Vec<f64>) -> Self {
        Self { label, values }
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }
}

/// Per-site, per-class log prior values, stored as `k` planes of `n` sites.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPrior {
    k: usize,
    n: usize,
    log_density: Vec<f64>,
    source_checksum: String,
    hyper: DeltaHyper,
    mode: FieldMode,
}

impl FieldPrior {
    /// Assembles a field from stored planes, checking the invariants.
    pub fn from_planes(
        k: usize,
        n: usize,
        log_density: Vec<f64>,
        source_checksum: String,
        hyper: DeltaHyper,
        mode: FieldMode,
    ) -> Result<Self> {
        if log_density.len() != n * k {
            return Err(Error::Shape(format!(
                "field has {} values, expected {n} sites x {k} classes",
                log_density.len()
            )));
        }
        if let Some(v) = log_density
            .iter()
            .find(|v| !(v.is_finite() && **v >= LOG_DENSITY_FLOOR))
        {
            return Err(Error::Data(format!(
                "field value {v} is not finite or below the floor"
            )));
        }
        Ok(Self {
            k,
            n,
            log_density,
            source_checksum,
            hyper,
            mode,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn value(&self, site: usize, label: usize) -> f64 {
        self.log_density[label * self.n + site]
    }

    pub fn plane(&self, label: usize) -> &[f64] {
        &self.log_density[label * self.n..(label + 1) * self.n]
    }

    /// All planes, class-major.
    pub fn values(&self) -> &[f64] {
        &self.log_density
    }

    pub fn source_checksum(&self) -> &str {
        &self.source_checksum
    }

    pub fn hyper(&self) -> &DeltaHyper {
        &self.hyper
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    /// Class with the highest prior at each site (lowest index on ties).
    pub fn argmax_labels(&self) -> Result<LabelField> {
        let labels = (0..self.n)
            .map(|i| {
                let mut best = 0;
                for j in 1..self.k {
                    if self.value(i, j) > self.value(i, best) {
                        best = j;
                    }
                }
                best as u8
            })
            .collect();
        LabelField::new(labels, self.k)
    }
}

/// One-dimensional lower envelope pass of the separable exact squared
/// Euclidean distance transform (Maurer, Qi & Raghavan).
///
/// `line` holds squared distances accumulated over earlier axes
/// (`f64::INFINITY` where no feature has been seen); `spacing` is the voxel
/// size along this axis. The result replaces `line`.
fn edt_line(line: &mut [f64], spacing: f64, g: &mut Vec<f64>, h: &mut Vec<f64>) {
    g.clear();
    h.clear();
    for (i, &fi) in line.iter().enumerate() {
        if !fi.is_finite() {
            continue;
        }
        let xi = i as f64 * spacing;
        while g.len() >= 2 {
            let l = g.len();
            // drop the middle parabola when it never attains the minimum
            let (du, dv, dw) = (g[l - 2], g[l - 1], fi);
            let (u, v, w) = (h[l - 2], h[l - 1], xi);
            let a = v - u;
            let b = w - v;
            let c = w - u;
            if c * dv - b * du - a * dw - a * b * c > 0.0 {
                g.pop();
                h.pop();
            } else {
                break;
            }
        }
        g.push(fi);
        h.push(xi);
    }
    if g.is_empty() {
        return;
    }
    let mut l = 0;
    for (i, out) in line.iter_mut().enumerate() {
        let xi = i as f64 * spacing;
        while l + 1 < g.len() {
            let here = g[l] + (h[l] - xi) * (h[l] - xi);
            let next = g[l + 1] + (h[l + 1] - xi) * (h[l + 1] - xi);
            if here <= next {
                break;
            }
            l += 1;
        }
        *out = g[l] + (h[l] - xi) * (h[l] - xi);
    }
}

/// Exact squared Euclidean distance (mm²) from each site to the nearest
/// `true` site of `mask`. All-`false` masks give `f64::INFINITY` everywhere.
pub fn squared_distance_transform(mask: &[bool], spec: &LatticeSpec) -> Result<Vec<f64>> {
    let n = spec.n_sites();
    if mask.len() != n {
        return Err(Error::Shape(format!(
            "mask has {} sites, lattice has {n}",
            mask.len()
        )));
    }
    let dims = spec.dims3();
    let voxel = spec.voxel3();
    let mut dist: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut g, mut h, mut line) = (Vec::new(), Vec::new(), Vec::new());
    let mut stride = 1;
    for axis in 0..3 {
        let len = dims[axis];
        if len > 1 {
            for start in 0..n {
                // a line starts wherever the coordinate along this axis is 0
                if (start / stride) % len != 0 {
                    continue;
                }
                line.clear();
                line.extend((0..len).map(|t| dist[start + t * stride]));
                edt_line(&mut line, voxel[axis], &mut g, &mut h);
                for (t, v) in line.iter().enumerate() {
                    dist[start + t * stride] = *v;
                }
            }
        }
        stride *= len;
    }
    Ok(dist)
}

fn check_reference(reference: &LabelField, spec: &LatticeSpec) -> Result<()> {
    reference.check_len(spec.n_sites())
}

/// Distance (mm) from every site to the nearest reference site of class `j`.
pub fn distance_transform(
    reference: &LabelField,
    spec: &LatticeSpec,
    j: usize,
) -> Result<DistanceField> {
    check_reference(reference, spec)?;
    if j >= reference.k() {
        return Err(Error::OutOfBounds {
            index: j,
            len: reference.k(),
        });
    }
    let mask: Vec<bool> = reference
        .labels()
        .iter()
        .map(|&l| l as usize == j)
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyClass(j));
    }
    let values = squared_distance_transform(&mask, spec)?
        .into_iter()
        .map(f64::sqrt)
        .collect();
    Ok(DistanceField { label: j, values })
}

/// Builds the external-field prior from a reference labelling.
pub fn build_field_prior(
    reference: &LabelField,
    spec: &LatticeSpec,
    hyper: &DeltaHyper,
    options: FieldOptions,
) -> Result<FieldPrior> {
    check_reference(reference, spec)?;
    hyper.validate()?;
    let k = reference.k();
    let n = spec.n_sites();
    let counts = reference.class_counts();
    if !options.allow_empty_classes {
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyClass(j));
        }
    }
    let log_density = match options.mode {
        FieldMode::Exact => exact_planes(reference, spec, hyper, &counts),
        FieldMode::Approx => approx_planes(reference, spec, hyper, &counts)?,
    };
    FieldPrior::from_planes(
        k,
        n,
        log_density,
        checksum_hex(reference.labels()),
        hyper.clone(),
        options.mode,
    )
}

/// Rebuilds the prior with updated per-class hyperparameters.
pub fn refresh_field_prior(
    reference: &LabelField,
    spec: &LatticeSpec,
    updated: &[DeltaParams],
    options: FieldOptions,
) -> Result<FieldPrior> {
    if updated.len() != reference.k() {
        return Err(Error::Shape(format!(
            "{} hyperparameter sets for {} classes",
            updated.len(),
            reference.k()
        )));
    }
    build_field_prior(
        reference,
        spec,
        &DeltaHyper::from_per_label(updated)?,
        options,
    )
}

fn floor_log(v: f64) -> f64 {
    if v.is_nan() {
        LOG_DENSITY_FLOOR
    } else {
        v.max(LOG_DENSITY_FLOOR)
    }
}

fn exact_planes(
    reference: &LabelField,
    spec: &LatticeSpec,
    hyper: &DeltaHyper,
    counts: &[usize],
) -> Vec<f64> {
    let k = reference.k();
    let n = spec.n_sites();
    let [nx, ny, nz] = spec.dims3();
    let voxel = spec.voxel3();
    // density as a function of the absolute coordinate offset, per class
    let tables: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let params = hyper.for_label(j);
            (0..n)
                .map(|off| {
                    let c = spec.coords(off);
                    let d2: f64 = (0..3).map(|a| (c[a] as f64 * voxel[a]).powi(2)).sum();
                    params.log_density(d2.sqrt()).exp()
                })
                .collect()
        })
        .collect();
    let refs = reference.labels();
    let site_major: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; k],
            |sums, i| {
                sums.fill(0.0);
                let [ix, iy, iz] = spec.coords(i);
                for hz in 0..nz {
                    let dz = hz.abs_diff(iz);
                    for hy in 0..ny {
                        let dy = hy.abs_diff(iy);
                        let offset_row = nx * (dy + ny * dz);
                        let h_row = nx * (hy + ny * hz);
                        for hx in 0..nx {
                            let j = refs[h_row + hx] as usize;
                            sums[j] += tables[j][offset_row + hx.abs_diff(ix)];
                        }
                    }
                }
                sums.iter()
                    .zip(counts)
                    .map(|(&s, &c)| {
                        if c == 0 {
                            LOG_DENSITY_FLOOR
                        } else {
                            floor_log((s / c as f64).ln())
                        }
                    })
                    .collect()
            },
        )
        .collect();
    let mut planes = vec![0.0; n * k];
    for (i, row) in site_major.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            planes[j * n + i] = v;
        }
    }
    planes
}

fn approx_planes(
    reference: &LabelField,
    spec: &LatticeSpec,
    hyper: &DeltaHyper,
    counts: &[usize],
) -> Result<Vec<f64>> {
    let k = reference.k();
    let n = spec.n_sites();
    let planes: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|j| {
            if counts[j] == 0 {
                return Ok(vec![LOG_DENSITY_FLOOR; n]);
            }
            let params = hyper.for_label(j);
            let dist = distance_transform(reference, spec, j)?;
            Ok(dist
                .values
                .iter()
                .map(|&d| floor_log(params.log_density(d)))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(planes.concat())
}

//! The posterior sampler for the hidden Potts model.
//!
//! One iteration of [`run_chain`] performs, in order:
//!
//! 1. chequerboard Gibbs updates of every label given the data, the optional
//!    external field and the current inverse temperature;
//! 2. semi-conjugate Gibbs updates of each component mean and variance;
//! 3. a path-sampling Metropolis-Hastings update of `beta` (unless fixed).
//!
//! Label draws use a counter-based stream keyed by `(iteration, site)`, so
//! the chain is bit-identical for any number of rayon workers.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::externalfield::FieldPrior;
use crate::lattice::{Lattice, LatticeSpec};
use crate::pathsampler::{update_beta, BetaPrior, PathTable, ProposalAdapter};
use crate::potts::{softmax_in_place, sufficient_statistic, LabelField};
use crate::rng::{self, KeyedStream};

/// Observed intensities on a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    spec: LatticeSpec,
    values: Vec<f64>,
}

impl ImageVolume {
    pub fn new(spec: LatticeSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_sites() {
            return Err(Error::Shape(format!(
                "image has {} values, lattice has {} sites",
                values.len(),
                spec.n_sites()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite intensity at site {pos}")));
        }
        Ok(Self { spec, values })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Conjugate priors for one mixture component:
/// `mu ~ N(m, phi2)`, `sigma2 ~ IG(nu / 2, nu * s2 / 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentPrior {
    pub name: String,
    pub m: f64,
    pub phi2: f64,
    pub nu: f64,
    pub s2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePriors {
    pub components: Vec<ComponentPrior>,
}

impl NoisePriors {
    /// Informative priors for cone-beam CT intensities of the nine tissue
    /// classes of an electron-density phantom.
    pub fn ed_phantom() -> Self {
        const PHI: f64 = 26.88;
        let rows: [(&str, f64, f64); 9] = [
            ("Lung (inhale)", -612.6, 90.06),
            ("Lung (exhale)", -495.8, 89.16),
            ("Adipose", -316.8, 79.36),
            ("Breast", -295.9, 67.42),
            ("Water", -294.5, 152.0),
            ("Muscle", -263.3, 71.55),
            ("Liver", -259.6, 88.50),
            ("Spongy Bone", -191.1, 87.36),
            ("Dense Bone", 77.9, 89.94),
        ];
        Self {
            components: rows
                .iter()
                .map(|&(name, m, s)| ComponentPrior {
                    name: name.to_string(),
                    m,
                    phi2: PHI * PHI,
                    nu: 25.0,
                    s2: s * s,
                })
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.components.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.components.len() > 255 {
            return Err(Error::InvalidConfig(format!(
                "need between 1 and 255 components, got {}",
                self.components.len()
            )));
        }
        for c in &self.components {
            let ok = c.m.is_finite()
                && c.phi2 > 0.0
                && c.nu > 0.0
                && c.s2 > 0.0
                && c.phi2.is_finite()
                && c.nu.is_finite()
                && c.s2.is_finite();
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "invalid prior for component '{}'",
                    c.name
                )));
            }
        }
        Ok(())
    }
}

/// Current component means and variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl MixtureParams {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma2.len() || mu.is_empty() {
            return Err(Error::Shape(format!(
                "{} means for {} variances",
                mu.len(),
                sigma2.len()
            )));
        }
        if sigma2.iter().any(|s| !(*s > 0.0 && s.is_finite())) || mu.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Domain(
                "component means must be finite and variances positive".into(),
            ));
        }
        Ok(Self { mu, sigma2 })
    }

    /// Means at `m_j`, variances at `s2_j`.
    pub fn from_prior(priors: &NoisePriors) -> Self {
        Self {
            mu: priors.components.iter().map(|c| c.m).collect(),
            sigma2: priors.components.iter().map(|c| c.s2).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }
}

/// Gaussian log-likelihood terms, precomputed once per parameter state.
struct Likelihood<'a> {
    mu: &'a [f64],
    log_norm: Vec<f64>,
    inv_two_var: Vec<f64>,
}

impl<'a> Likelihood<'a> {
    fn new(params: &'a MixtureParams) -> Self {
        Self {
            mu: &params.mu,
            log_norm: params
                .sigma2
                .iter()
                .map(|s| -0.5 * (2.0 * PI * s).ln())
                .collect(),
            inv_two_var: params.sigma2.iter().map(|s| 0.5 / s).collect(),
        }
    }

    #[inline]
    fn log_density(&self, j: usize, y: f64) -> f64 {
        let d = y - self.mu[j];
        self.log_norm[j] - d * d * self.inv_two_var[j]
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn fill_log_weights(
    out: &mut [f64],
    i: usize,
    y_i: f64,
    lik: &Likelihood<'_>,
    field: Option<&FieldPrior>,
    beta: f64,
    labels: &[u8],
    lattice: &Lattice,
) {
    for (j, w) in out.iter_mut().enumerate() {
        *w = lik.log_density(j, y_i);
    }
    if let Some(f) = field {
        for (j, w) in out.iter_mut().enumerate() {
            *w += f.value(i, j);
        }
    }
    for &nb in lattice.neighbours(i) {
        out[labels[nb as usize] as usize] += beta;
    }
}

fn check_field(field: Option<&FieldPrior>, k: usize, n: usize) -> Result<()> {
    if let Some(f) = field {
        if f.k() != k || f.n_sites() != n {
            return Err(Error::Shape(format!(
                "field prior is {} sites x {} classes, model is {n} x {k}",
                f.n_sites(),
                f.k()
            )));
        }
    }
    Ok(())
}

/// Full conditional of label `i` given its neighbours, the intensity `y_i`,
/// the mixture parameters and, when present, the external field.
#[allow(clippy::too_many_arguments)]
pub fn posterior_conditional(
    i: usize,
    z: &LabelField,
    y_i: f64,
    params: &MixtureParams,
    field: Option<&FieldPrior>,
    beta: f64,
    lattice: &Lattice,
) -> Result<Vec<f64>> {
    if !y_i.is_finite() {
        return Err(Error::Data(format!("non-finite intensity {y_i}")));
    }
    if !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be finite, got {beta}")));
    }
    z.check_len(lattice.n_sites())?;
    if i >= z.len() {
        return Err(Error::OutOfBounds {
            index: i,
            len: z.len(),
        });
    }
    if params.k() != z.k() {
        return Err(Error::Shape(format!(
            "{} components for {} classes",
            params.k(),
            z.k()
        )));
    }
    check_field(field, z.k(), z.len())?;
    let lik = Likelihood::new(params);
    let mut w = vec![0.0; z.k()];
    fill_log_weights(&mut w, i, y_i, &lik, field, beta, z.labels(), lattice);
    softmax_in_place(&mut w);
    Ok(w)
}

/// Inverse-CDF draw from unnormalised log-weights using a single uniform.
#[inline]
fn draw_from_log_weights(w: &mut [f64], u: f64) -> u8 {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in w.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &v) in w.iter().enumerate() {
        if v > 0.0 {
            last_positive = j;
        }
        acc += v;
        if target < acc {
            return j as u8;
        }
    }
    last_positive as u8
}

/// Redraws every label, one chequerboard block at a time.
///
/// Sites within a block are conditionally independent given the other
/// block, so each block is updated in parallel. The uniform for site `i`
/// comes from `stream.uniform(iteration, i)`.
#[allow(clippy::too_many_arguments)]
pub fn update_labels_chequerboard(
    z: &mut LabelField,
    y: &ImageVolume,
    params: &MixtureParams,
    field: Option<&FieldPrior>,
    beta: f64,
    lattice: &Lattice,
    stream: &KeyedStream,
    iteration: u64,
) -> Result<()> {
    let n = lattice.n_sites();
    z.check_len(n)?;
    if y.len() != n {
        return Err(Error::Shape(format!(
            "image has {} sites, lattice has {n}",
            y.len()
        )));
    }
    if params.k() != z.k() {
        return Err(Error::Shape(format!(
            "{} components for {} classes",
            params.k(),
            z.k()
        )));
    }
    check_field(field, z.k(), n)?;
    let k = z.k();
    if k == 1 {
        return Ok(());
    }
    let lik = Likelihood::new(params);
    let values = y.values();
    for block in 0..2 {
        let sites = lattice.partition().block(block);
        let labels = z.labels();
        let fresh: Vec<u8> = sites
            .par_iter()
            .map_init(
                || vec![0.0; k],
                |w, &site| {
                    let i = site as usize;
                    fill_log_weights(w, i, values[i], &lik, field, beta, labels, lattice);
                    draw_from_log_weights(w, stream.uniform(iteration, i as u64))
                },
            )
            .collect();
        let labels = z.labels_mut();
        for (&site, l) in sites.iter().zip(fresh) {
            labels[site as usize] = l;
        }
    }
    Ok(())
}

/// Semi-conjugate Gibbs update of component means, then variances.
///
/// `mu_j | sigma2_j` combines `N(m_j, phi2_j)` with the `n_j` intensities
/// currently labelled `j`; `sigma2_j | mu_j` is inverse-gamma with shape
/// `(nu_j + n_j) / 2` and scale `(nu_j s2_j + SS_j) / 2`. Empty components
/// are drawn from the prior.
pub fn update_mixture_params<R: Rng + ?Sized>(
    y: &ImageVolume,
    z: &LabelField,
    priors: &NoisePriors,
    params: &MixtureParams,
    rng: &mut R,
) -> Result<MixtureParams> {
    let k = priors.k();
    if z.k() != k || params.k() != k {
        return Err(Error::Shape(format!(
            "priors have {k} components, labels {} and parameters {}",
            z.k(),
            params.k()
        )));
    }
    z.check_len(y.len())?;
    let mut count = vec![0usize; k];
    let mut sum = vec![0.0; k];
    for (&l, &v) in z.labels().iter().zip(y.values()) {
        count[l as usize] += 1;
        sum[l as usize] += v;
    }
    let mut mu = vec![0.0; k];
    for j in 0..k {
        let p = &priors.components[j];
        let precision = 1.0 / p.phi2 + count[j] as f64 / params.sigma2[j];
        let mean = (p.m / p.phi2 + sum[j] / params.sigma2[j]) / precision;
        let step: f64 = rng.sample(StandardNormal);
        mu[j] = mean + step / precision.sqrt();
    }
    let mut ss = vec![0.0; k];
    for (&l, &v) in z.labels().iter().zip(y.values()) {
        let d = v - mu[l as usize];
        ss[l as usize] += d * d;
    }
    let mut sigma2 = vec![0.0; k];
    for j in 0..k {
        let p = &priors.components[j];
        let shape = 0.5 * (p.nu + count[j] as f64);
        let rate = 0.5 * (p.nu * p.s2 + ss[j]);
        let gamma = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Domain(e.to_string()))?;
        let precision: f64 = gamma.sample(rng);
        sigma2[j] = 1.0 / precision;
    }
    MixtureParams::new(mu, sigma2)
}

/// Label initialisation: the field-prior mode when a field is supplied,
/// otherwise the most likely class under the prior means and scales.
pub fn initial_labels(
    y: &ImageVolume,
    priors: &NoisePriors,
    field: Option<&FieldPrior>,
) -> Result<LabelField> {
    if let Some(f) = field {
        check_field(Some(f), priors.k(), y.len())?;
        return f.argmax_labels();
    }
    let params = MixtureParams::from_prior(priors);
    let lik = Likelihood::new(&params);
    let labels = y
        .values()
        .iter()
        .map(|&v| {
            let mut best = 0;
            for j in 1..priors.k() {
                if lik.log_density(j, v) > lik.log_density(best, v) {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    LabelField::new(labels, priors.k())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    Sample,
    Fixed(f64),
}

impl std::str::FromStr for BetaMode {
    type Err = Error;

    /// `sample` or `fixed=<value>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "sample" {
            return Ok(Self::Sample);
        }
        if let Some(v) = s.strip_prefix("fixed=") {
            let beta: f64 = v
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("cannot parse beta value '{v}'")))?;
            return Ok(Self::Fixed(beta));
        }
        Err(Error::InvalidConfig(format!(
            "beta must be 'sample' or 'fixed=<v>', got '{s}'"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub seed: u64,
    pub beta: BetaMode,
    pub thin: usize,
    pub use_field: bool,
    /// initial random-walk scale for `beta`, adapted during burn-in
    pub proposal_sd: f64,
    /// proposals per adaptation batch
    pub adapt_batch: usize,
    /// defaults to uniform over the path table's range
    pub beta_prior: Option<BetaPrior>,
    /// defaults to the midpoint of the prior support
    pub beta_init: Option<f64>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 55_000,
            burnin: 5_000,
            seed: 0,
            beta: BetaMode::Sample,
            thin: 1,
            use_field: true,
            proposal_sd: 0.01,
            adapt_batch: 50,
            beta_prior: None,
            beta_init: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burnin {
            return Err(Error::InvalidConfig(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burnin
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig(
                "thinning interval must be at least 1".into(),
            ));
        }
        if !(self.proposal_sd > 0.0 && self.proposal_sd.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "proposal sd must be positive, got {}",
                self.proposal_sd
            )));
        }
        if let BetaMode::Fixed(b) = self.beta {
            if !b.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "fixed beta must be finite, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Number of iterations that contribute to the allocation counts.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burnin).div_ceil(self.thin)
    }
}

/// Per-site, per-class allocation counts, stored as `k` planes of `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationCounts {
    k: usize,
    n: usize,
    counts: Vec<u32>,
}

impl AllocationCounts {
    pub fn zeros(k: usize, n: usize) -> Self {
        Self {
            k,
            n,
            counts: vec![0; k * n],
        }
    }

    /// Checks that every site has the same total.
    pub fn from_planes(k: usize, n: usize, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != k * n || k == 0 {
            return Err(Error::Shape(format!(
                "{} counts for {n} sites x {k} classes",
                counts.len()
            )));
        }
        let c = Self { k, n, counts };
        let total = c.site_total(0);
        if (1..n).any(|i| c.site_total(i) != total) {
            return Err(Error::InvalidState(
                "allocation counts do not sum to the same total at every site".into(),
            ));
        }
        Ok(c)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, site: usize, label: usize) -> u32 {
        self.counts[label * self.n + site]
    }

    pub fn planes(&self) -> &[u32] {
        &self.counts
    }

    pub fn site_total(&self, site: usize) -> u64 {
        (0..self.k).map(|j| self.get(site, j) as u64).sum()
    }

    /// Number of retained iterations (the common per-site total).
    pub fn retained(&self) -> u64 {
        if self.n == 0 {
            0
        } else {
            self.site_total(0)
        }
    }

    fn record(&mut self, z: &LabelField) {
        for (i, &l) in z.labels().iter().enumerate() {
            self.counts[l as usize * self.n + i] += 1;
        }
    }
}

/// Per-site most frequent label; ties go to the lowest class index.
pub fn modal_labels(counts: &AllocationCounts) -> Result<LabelField> {
    let labels = (0..counts.n)
        .map(|i| {
            let mut best = 0;
            for j in 1..counts.k {
                if counts.get(i, j) > counts.get(i, best) {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    LabelField::new(labels, counts.k)
}

/// One row of scalar traces.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub beta: f64,
    pub stat: u64,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub correct: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub traces: Vec<TraceRow>,
    pub counts: AllocationCounts,
    pub modal: LabelField,
    pub burnin: usize,
    pub thin: usize,
    /// random-walk scale after burn-in adaptation
    pub proposal_sd: f64,
    /// post burn-in acceptance rate for `beta` (0 when `beta` is fixed)
    pub beta_acceptance: f64,
}

impl ChainResult {
    /// Mean of the retained `beta` trace.
    pub fn beta_mean(&self) -> f64 {
        let kept: Vec<f64> = self.retained_rows().map(|r| r.beta).collect();
        kept.iter().sum::<f64>() / kept.len() as f64
    }

    pub fn retained_rows(&self) -> impl Iterator<Item = &TraceRow> {
        self.traces
            .iter()
            .enumerate()
            .filter(|(t, _)| *t >= self.burnin && (t - self.burnin).is_multiple_of(self.thin))
            .map(|(_, r)| r)
    }
}

/// Runs the full sampler.
pub fn run_chain(
    y: &ImageVolume,
    config: &ChainConfig,
    priors: &NoisePriors,
    field: Option<&FieldPrior>,
    table: Option<&PathTable>,
    truth: Option<&LabelField>,
) -> Result<ChainResult> {
    config.validate()?;
    priors.validate()?;
    let k = priors.k();
    let n = y.len();
    if config.use_field && field.is_none() {
        return Err(Error::InvalidConfig(
            "field prior enabled but none supplied".into(),
        ));
    }
    let field = if config.use_field { field } else { None };
    check_field(field, k, n)?;
    if let Some(t) = truth {
        t.check_len(n)?;
        if t.k() != k {
            return Err(Error::Shape(format!(
                "truth has {} classes, model has {k}",
                t.k()
            )));
        }
    }
    let lattice = Lattice::new(y.spec().clone())?;

    let (mut beta, beta_prior, table) = match config.beta {
        BetaMode::Fixed(b) => (b, None, None),
        BetaMode::Sample => {
            let table = table.ok_or_else(|| {
                Error::InvalidConfig("sampling beta requires a path table".into())
            })?;
            if table.meta().k != k || table.meta().dims != y.spec().dims() {
                return Err(Error::Shape(format!(
                    "path table was calibrated for dims {:?} with k = {}, image has dims {:?} with k = {k}",
                    table.meta().dims,
                    table.meta().k,
                    y.spec().dims()
                )));
            }
            let prior = config
                .beta_prior
                .unwrap_or_else(|| BetaPrior::for_table(table));
            let (lo, hi) = table.beta_range();
            if prior.lower < lo || prior.upper > hi {
                return Err(Error::InvalidConfig(format!(
                    "beta prior [{}, {}] exceeds the table range [{lo}, {hi}]",
                    prior.lower, prior.upper
                )));
            }
            let init = config
                .beta_init
                .unwrap_or(0.5 * (prior.lower + prior.upper));
            if !prior.contains(init) {
                return Err(Error::InvalidConfig(format!(
                    "initial beta {init} outside the prior support"
                )));
            }
            (init, Some(prior), Some(table))
        }
    };

    let label_stream = KeyedStream::new(config.seed, rng::tags::LABELS);
    let mut mixture_rng = rng::stream(config.seed, rng::tags::MIXTURE);
    let mut beta_rng = rng::stream(config.seed, rng::tags::BETA);
    let mut adapter = ProposalAdapter::new(config.proposal_sd, config.adapt_batch);

    let mut z = initial_labels(y, priors, field)?;
    let mut params = MixtureParams::from_prior(priors);
    let mut counts = AllocationCounts::zeros(k, n);
    let mut traces = Vec::with_capacity(config.iterations);

    for t in 0..config.iterations {
        update_labels_chequerboard(
            &mut z,
            y,
            &params,
            field,
            beta,
            &lattice,
            &label_stream,
            t as u64,
        )?;
        params = update_mixture_params(y, &z, priors, &params, &mut mixture_rng)?;
        let stat = sufficient_statistic(&z, lattice.edges())?;
        if let (Some(table), Some(prior)) = (table, beta_prior.as_ref()) {
            let step = update_beta(beta, stat, table, prior, adapter.sd(), &mut beta_rng)?;
            beta = step.beta;
            adapter.record(step.accepted);
        }
        if t + 1 == config.burnin {
            adapter.freeze();
        }
        if t >= config.burnin && (t - config.burnin).is_multiple_of(config.thin) {
            counts.record(&z);
        }
        let correct = truth.map(|truth| {
            truth
                .labels()
                .iter()
                .zip(z.labels())
                .filter(|(a, b)| a == b)
                .count() as u64
        });
        traces.push(TraceRow {
            beta,
            stat: stat.value(),
            mu: params.mu.clone(),
            sigma2: params.sigma2.clone(),
            correct,
        });
    }
    if config.burnin == 0 {
        // no burn-in: the scale was never frozen, report what was used
        adapter.freeze();
    }
    let modal = modal_labels(&counts)?;
    let beta_acceptance = if beta_prior.is_some() {
        adapter.acceptance_rate()
    } else {
        0.0
    };
    Ok(ChainResult {
        traces,
        counts,
        modal,
        burnin: config.burnin,
        thin: config.thin,
        proposal_sd: adapter.sd(),
        beta_acceptance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::externalfield::{DeltaHyper, FieldMode, FieldOptions};
    use crate::pathsampler::PathTableMeta;
    use proptest::prelude::*;
    use rand::Rng;

    fn lattice(dims: &[usize]) -> Lattice {
        Lattice::new(LatticeSpec::unit(dims).unwrap()).unwrap()
    }

    fn two_class_priors() -> NoisePriors {
        NoisePriors {
            components: vec![
                ComponentPrior {
                    name: "a".into(),
                    m: 0.0,
                    phi2: 1.0,
                    nu: 4.0,
                    s2: 1.0,
                },
                ComponentPrior {
                    name: "b".into(),
                    m: 3.0,
                    phi2: 1.0,
                    nu: 4.0,
                    s2: 1.0,
                },
            ],
        }
    }

    fn gauss_logpdf(y: f64, mu: f64, s2: f64) -> f64 {
        -0.5 * (2.0 * PI * s2).ln() - (y - mu) * (y - mu) / (2.0 * s2)
    }

    #[test]
    fn independent_mixture_at_beta_zero() {
        let l = lattice(&[3, 3]);
        let z = LabelField::new(vec![0, 1, 2, 0, 1, 2, 0, 1, 2], 3).unwrap();
        let params = MixtureParams::new(vec![-1.0, 0.5, 2.0], vec![1.0, 0.5, 2.0]).unwrap();
        let p = posterior_conditional(4, &z, 0.3, &params, None, 0.0, &l).unwrap();
        let mut expect: Vec<f64> = (0..3)
            .map(|j| gauss_logpdf(0.3, params.mu[j], params.sigma2[j]).exp())
            .collect();
        let total: f64 = expect.iter().sum();
        expect.iter_mut().for_each(|v| *v /= total);
        for (a, b) in p.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn flat_field_equal_components_is_uniform() {
        let spec = LatticeSpec::unit(&[3, 3]).unwrap();
        let l = Lattice::new(spec.clone()).unwrap();
        let z = LabelField::new(vec![0, 1, 2, 0, 1, 2, 0, 1, 2], 3).unwrap();
        let field = FieldPrior::from_planes(
            3,
            9,
            vec![-2.5; 27],
            String::new(),
            DeltaHyper::new(1.0, 1.0).unwrap(),
            FieldMode::Exact,
        )
        .unwrap();
        let params = MixtureParams::new(vec![1.0; 3], vec![2.0; 3]).unwrap();
        let p = posterior_conditional(4, &z, 7.0, &params, Some(&field), 0.0, &l).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_conditional_with_field() {
        // 3x3, centre site 4 with neighbours 1, 3, 5, 7
        let spec = LatticeSpec::unit(&[3, 3]).unwrap();
        let l = Lattice::new(spec).unwrap();
        let z = LabelField::new(vec![0, 1, 0, 1, 0, 0, 1, 2, 1], 3).unwrap();
        let params = MixtureParams::new(vec![-1.0, 0.0, 1.5], vec![0.7, 1.2, 0.4]).unwrap();
        let field_vals: Vec<f64> = (0..27).map(|v| -0.1 * v as f64).collect();
        let field = FieldPrior::from_planes(
            3,
            9,
            field_vals.clone(),
            String::new(),
            DeltaHyper::new(1.0, 1.0).unwrap(),
            FieldMode::Exact,
        )
        .unwrap();
        let (beta, y) = (0.8, 0.25);
        let p = posterior_conditional(4, &z, y, &params, Some(&field), beta, &l).unwrap();
        // neighbours 1,3,5,7 carry labels 1,1,0,2
        let like_counts = [1.0, 2.0, 1.0];
        let mut e = [0.0; 3];
        for j in 0..3 {
            e[j] = (gauss_logpdf(y, params.mu[j], params.sigma2[j])
                + field_vals[j * 9 + 4]
                + beta * like_counts[j])
                .exp();
        }
        let total: f64 = e.iter().sum();
        for j in 0..3 {
            assert!((p[j] - e[j] / total).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_intensity_is_rejected() {
        let l = lattice(&[2, 2]);
        let z = LabelField::constant(4, 2, 0).unwrap();
        let params = MixtureParams::new(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            posterior_conditional(0, &z, f64::NAN, &params, None, 0.5, &l),
            Err(Error::Data(_))
        ));
        assert!(ImageVolume::new(
            LatticeSpec::unit(&[2, 2]).unwrap(),
            vec![0.0, 1.0, f64::INFINITY, 0.0]
        )
        .is_err());
    }

    #[test]
    fn single_class_labels_unchanged() {
        let spec = LatticeSpec::unit(&[4, 4]).unwrap();
        let l = Lattice::new(spec.clone()).unwrap();
        let y = ImageVolume::new(spec, (0..16).map(|v| v as f64).collect()).unwrap();
        let mut z = LabelField::constant(16, 1, 0).unwrap();
        let params = MixtureParams::new(vec![3.0], vec![2.0]).unwrap();
        update_labels_chequerboard(
            &mut z,
            &y,
            &params,
            None,
            1.0,
            &l,
            &KeyedStream::new(1, 1),
            0,
        )
        .unwrap();
        assert_eq!(z, LabelField::constant(16, 1, 0).unwrap());
    }

    #[test]
    fn separated_means_recover_nearest_mean_classification() {
        let spec = LatticeSpec::unit(&[16, 16]).unwrap();
        let l = Lattice::new(spec.clone()).unwrap();
        let mut r = rng::stream(4, 0);
        let means = [-10.0, 0.0, 10.0];
        let truth: Vec<u8> = (0..256).map(|_| r.random_range(0..3u8)).collect();
        let values: Vec<f64> = truth
            .iter()
            .map(|&t| means[t as usize] + 0.5 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let y = ImageVolume::new(spec, values.clone()).unwrap();
        let nearest: Vec<u8> = values
            .iter()
            .map(|v| {
                (0..3)
                    .min_by(|&a, &b| {
                        (v - means[a])
                            .abs()
                            .partial_cmp(&(v - means[b]).abs())
                            .unwrap()
                    })
                    .unwrap() as u8
            })
            .collect();
        let params = MixtureParams::new(means.to_vec(), vec![0.01; 3]).unwrap();
        let mut z = LabelField::constant(256, 3, 0).unwrap();
        let stream = KeyedStream::new(3, 1);
        for it in 0..3 {
            update_labels_chequerboard(&mut z, &y, &params, None, 0.0, &l, &stream, it).unwrap();
        }
        assert_eq!(z.labels(), &nearest[..]);
    }

    #[test]
    fn labels_bit_identical_for_fixed_seed() {
        let spec = LatticeSpec::unit(&[12, 9]).unwrap();
        let l = Lattice::new(spec.clone()).unwrap();
        let y = ImageVolume::new(spec, (0..108).map(|v| (v % 7) as f64).collect()).unwrap();
        let params = MixtureParams::new(vec![1.0, 3.0, 5.0], vec![2.0, 2.0, 2.0]).unwrap();
        let run = || {
            let mut z = LabelField::constant(108, 3, 0).unwrap();
            let stream = KeyedStream::new(99, 1);
            for it in 0..20 {
                update_labels_chequerboard(&mut z, &y, &params, None, 0.9, &l, &stream, it)
                    .unwrap();
            }
            z
        };
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(run);
        assert_eq!(single, multi);
        assert_eq!(single, run());
    }

    /// Exact joint posterior over all 16 labellings of a 2x2 lattice.
    fn exact_joint(
        y: &[f64],
        params: &MixtureParams,
        field: Option<&FieldPrior>,
        beta: f64,
        l: &Lattice,
    ) -> Vec<f64> {
        let mut p = [0.0; 16];
        for (s, slot) in p.iter_mut().enumerate() {
            let z: Vec<u8> = (0..4).map(|i| ((s >> i) & 1) as u8).collect();
            let mut logp = 0.0;
            for i in 0..4 {
                let j = z[i] as usize;
                logp += gauss_logpdf(y[i], params.mu[j], params.sigma2[j]);
                if let Some(f) = field {
                    logp += f.value(i, j);
                }
            }
            let like = l.edges().iter().filter(|&(a, b)| z[a] == z[b]).count() as f64;
            *slot = (logp + beta * like).exp();
        }
        let total: f64 = p.iter().sum();
        p.iter().map(|v| v / total).collect()
    }

    #[test]
    fn chequerboard_stationary_distribution_matches_enumeration() {
        let spec = LatticeSpec::unit(&[2, 2]).unwrap();
        let l = Lattice::new(spec.clone()).unwrap();
        let yv = vec![0.2, 0.9, 0.4, 1.1];
        let y = ImageVolume::new(spec, yv.clone()).unwrap();
        let params = MixtureParams::new(vec![0.0, 1.0], vec![0.3, 0.3]).unwrap();
        let field = FieldPrior::from_planes(
            2,
            4,
            vec![-1.0, -0.5, -2.0, -1.5, -1.2, -1.9, -0.3, -0.8],
            String::new(),
            DeltaHyper::new(1.0, 1.0).unwrap(),
            FieldMode::Exact,
        )
        .unwrap();
        for (beta, f) in [(0.0, None), (0.9, Some(&field))] {
            let exact = exact_joint(&yv, &params, f, beta, &l);
            let stream = KeyedStream::new(12, 1);
            let mut z = LabelField::constant(4, 2, 0).unwrap();
            let mut freq = [0.0; 16];
            let sweeps = 200_000;
            for it in 0..sweeps {
                update_labels_chequerboard(&mut z, &y, &params, f, beta, &l, &stream, it).unwrap();
                let s: usize = (0..4).map(|i| (z.get(i) as usize) << i).sum();
                freq[s] += 1.0;
            }
            let tv: f64 = freq
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a / sweeps as f64 - b).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.02, "beta {beta}: TV {tv}");
        }
    }

    #[test]
    fn conjugate_mean_update_matches_closed_form() {
        let spec = LatticeSpec::unit(&[5, 4]).unwrap();
        let values: Vec<f64> = (0..20).map(|v| 0.3 * v as f64 - 1.0).collect();
        let y = ImageVolume::new(spec, values.clone()).unwrap();
        let z = LabelField::new((0..20).map(|i| u8::from(i >= 12)).collect(), 2).unwrap();
        let priors = two_class_priors();
        let sigma2 = vec![0.8, 1.5];
        let mut r = rng::stream(31, 0);
        let draws = 40_000;
        let mut acc = [0.0; 2];
        for _ in 0..draws {
            let params = MixtureParams::new(vec![0.0, 0.0], sigma2.clone()).unwrap();
            let p = update_mixture_params(&y, &z, &priors, &params, &mut r).unwrap();
            acc[0] += p.mu[0];
            acc[1] += p.mu[1];
        }
        for j in 0..2 {
            let members: Vec<f64> = (0..20)
                .filter(|&i| z.get(i) as usize == j)
                .map(|i| values[i])
                .collect();
            let prec = 1.0 / priors.components[j].phi2 + members.len() as f64 / sigma2[j];
            let mean = (priors.components[j].m / priors.components[j].phi2
                + members.iter().sum::<f64>() / sigma2[j])
                / prec;
            let se = (1.0 / prec / draws as f64).sqrt();
            assert!(
                (acc[j] / draws as f64 - mean).abs() < 3.0 * se,
                "component {j}"
            );
        }
    }

    #[test]
    fn empty_component_draws_from_prior() {
        let spec = LatticeSpec::unit(&[3, 3]).unwrap();
        let y = ImageVolume::new(spec, vec![0.0; 9]).unwrap();
        let priors = NoisePriors::ed_phantom();
        let z = LabelField::constant(9, 9, 4).unwrap();
        let mut params = MixtureParams::from_prior(&priors);
        let mut r = rng::stream(5, 0);
        let draws = 20_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            params = update_mixture_params(&y, &z, &priors, &params, &mut r).unwrap();
            s1 += params.mu[0];
            s2 += params.mu[0] * params.mu[0];
        }
        let mean = s1 / draws as f64;
        let sd = (s2 / draws as f64 - mean * mean).sqrt();
        assert!((mean + 612.6).abs() < 3.0 * 26.88 / (draws as f64).sqrt());
        assert!((sd - 26.88).abs() < 0.05 * 26.88);
    }

    #[test]
    fn modal_label_examples() {
        let counts = AllocationCounts::from_planes(3, 1, vec![10, 30, 10]).unwrap();
        assert_eq!(modal_labels(&counts).unwrap().get(0), 1);
        // labels 2 and 5 (indices 1 and 4) tie
        let counts = AllocationCounts::from_planes(5, 1, vec![1, 7, 0, 0, 7]).unwrap();
        assert_eq!(modal_labels(&counts).unwrap().get(0), 1);
        let counts = AllocationCounts::from_planes(4, 1, vec![0, 0, 12, 0]).unwrap();
        assert_eq!(modal_labels(&counts).unwrap().get(0), 2);
        assert!(AllocationCounts::from_planes(2, 2, vec![1, 2, 3, 3]).is_err());
    }

    #[test]
    fn beta_mode_parsing() {
        assert_eq!("sample".parse::<BetaMode>().unwrap(), BetaMode::Sample);
        assert_eq!(
            "fixed=1.2".parse::<BetaMode>().unwrap(),
            BetaMode::Fixed(1.2)
        );
        assert!("fixed=x".parse::<BetaMode>().is_err());
        assert!("other".parse::<BetaMode>().is_err());
        let json = serde_json::to_string(&BetaMode::Fixed(0.5)).unwrap();
        assert_eq!(json, r#"{"fixed":0.5}"#);
    }

    fn small_problem() -> (ImageVolume, LabelField) {
        let spec = LatticeSpec::unit(&[8, 8]).unwrap();
        let truth: Vec<u8> = (0..64).map(|i| u8::from(i % 8 >= 4)).collect();
        let mut r = rng::stream(2, 0);
        let values = truth
            .iter()
            .map(|&t| 3.0 * t as f64 + r.sample::<f64, _>(StandardNormal))
            .collect();
        (
            ImageVolume::new(spec, values).unwrap(),
            LabelField::new(truth, 2).unwrap(),
        )
    }

    fn flat_table(dims: &[usize], k: usize) -> PathTable {
        let meta = PathTableMeta {
            dims: dims.to_vec(),
            k,
            n_edges: 0,
            sweeps: 0,
            burnin: 0,
            seed: 0,
        };
        PathTable::new(vec![0.0, 1.0, 2.0], vec![50.0, 80.0, 110.0], meta).unwrap()
    }

    #[test]
    fn run_chain_bookkeeping() {
        let (y, truth) = small_problem();
        let cfg = ChainConfig {
            iterations: 53,
            burnin: 10,
            thin: 4,
            use_field: false,
            seed: 8,
            ..Default::default()
        };
        let table = flat_table(&[8, 8], 2);
        let res = run_chain(
            &y,
            &cfg,
            &two_class_priors(),
            None,
            Some(&table),
            Some(&truth),
        )
        .unwrap();
        assert_eq!(res.traces.len(), 53);
        assert!(res.traces.iter().all(|r| r.correct.is_some()));
        assert_eq!(cfg.retained(), 11);
        for i in 0..64 {
            assert_eq!(res.counts.site_total(i), 11);
        }
        assert_eq!(res.modal, modal_labels(&res.counts).unwrap());
        assert_eq!(res.retained_rows().count(), 11);
    }

    #[test]
    fn run_chain_errors() {
        let (y, truth) = small_problem();
        let priors = two_class_priors();
        let cfg = ChainConfig {
            iterations: 20,
            burnin: 5,
            use_field: false,
            ..Default::default()
        };
        assert!(matches!(
            run_chain(&y, &cfg, &priors, None, None, None),
            Err(Error::InvalidConfig(_))
        ));
        let wrong = flat_table(&[4, 16], 2);
        assert!(matches!(
            run_chain(&y, &cfg, &priors, None, Some(&wrong), None),
            Err(Error::Shape(_))
        ));
        let bad_truth = LabelField::constant(63, 2, 0).unwrap();
        let fixed = ChainConfig {
            beta: BetaMode::Fixed(0.5),
            ..cfg.clone()
        };
        assert!(run_chain(&y, &fixed, &priors, None, None, Some(&bad_truth)).is_err());
        assert!(run_chain(&y, &fixed, &priors, None, None, Some(&truth)).is_ok());
        let with_field = ChainConfig {
            use_field: true,
            ..fixed.clone()
        };
        assert!(matches!(
            run_chain(&y, &with_field, &priors, None, None, None),
            Err(Error::InvalidConfig(_))
        ));
        let bad = ChainConfig {
            iterations: 5,
            burnin: 5,
            ..fixed
        };
        assert!(run_chain(&y, &bad, &priors, None, None, None).is_err());
    }

    #[test]
    fn run_chain_is_reproducible() {
        let (y, truth) = small_problem();
        let reference =
            LabelField::new((0..64).map(|i| u8::from(i % 8 >= 5)).collect(), 2).unwrap();
        let field = crate::externalfield::build_field_prior(
            &reference,
            y.spec(),
            &DeltaHyper::new(1.2, 4.0).unwrap(),
            FieldOptions::new(FieldMode::Exact),
        )
        .unwrap();
        let cfg = ChainConfig {
            iterations: 60,
            burnin: 20,
            seed: 3,
            adapt_batch: 5,
            ..Default::default()
        };
        let table = flat_table(&[8, 8], 2);
        let a = run_chain(
            &y,
            &cfg,
            &two_class_priors(),
            Some(&field),
            Some(&table),
            Some(&truth),
        )
        .unwrap();
        let b = run_chain(
            &y,
            &cfg,
            &two_class_priors(),
            Some(&field),
            Some(&table),
            Some(&truth),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn conditional_is_simplex_and_shift_invariant(
            seed in 0u64..500,
            y in -1e3f64..1e3,
            beta in 0.0f64..4.0,
            shift in -600.0f64..600.0,
        ) {
            let l = lattice(&[3, 3]);
            let mut r = rng::stream(seed, 0);
            let z = LabelField::random(9, 4, &mut r).unwrap();
            let vals: Vec<f64> = (0..36).map(|_| -700.0 * r.random::<f64>()).collect();
            let shifted: Vec<f64> = vals.iter().enumerate().map(|(idx, v)| if idx % 9 == 4 { v + shift } else { *v }).collect();
            let hyper = DeltaHyper::new(1.0, 1.0).unwrap();
            let f1 = FieldPrior::from_planes(4, 9, vals, String::new(), hyper.clone(), FieldMode::Exact).unwrap();
            let params = MixtureParams::new(vec![-300.0, 0.0, 10.0, 400.0], vec![50.0, 1.0, 900.0, 20.0]).unwrap();
            let p = posterior_conditional(4, &z, y, &params, Some(&f1), beta, &l).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
            if shifted.iter().all(|v| *v >= crate::externalfield::LOG_DENSITY_FLOOR) {
                let f2 = FieldPrior::from_planes(4, 9, shifted, String::new(), hyper, FieldMode::Exact).unwrap();
                let q = posterior_conditional(4, &z, y, &params, Some(&f2), beta, &l).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}

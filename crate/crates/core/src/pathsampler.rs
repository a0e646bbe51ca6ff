//! Path sampling for the inverse temperature.
//!
//! `E[S(z) | beta]` is pre-simulated with Swendsen-Wang on a grid of
//! inverse temperatures, smoothed to be monotone and interpolated linearly.
//! Integrating the interpolant gives the log ratio of Potts normalising
//! constants needed by the Metropolis-Hastings update of `beta`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeSpec};
use crate::potts::{sufficient_statistic, LabelField, SufficientStat, SwendsenWang};
use crate::rng;

/// Provenance of a calibrated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTableMeta {
    pub dims: Vec<usize>,
    pub k: usize,
    pub n_edges: usize,
    pub sweeps: usize,
    pub burnin: usize,
    pub seed: u64,
}

/// Tabulated `E[S(z) | beta]` on an increasing grid starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    beta_grid: Vec<f64>,
    expected_stat: Vec<f64>,
    /// cumulative trapezoid integral from `beta_grid[0]` to each grid point
    cumulative: Vec<f64>,
    meta: PathTableMeta,
}

impl PathTable {
    pub fn new(beta_grid: Vec<f64>, expected_stat: Vec<f64>, meta: PathTableMeta) -> Result<Self> {
        validate_grid(&beta_grid)?;
        if expected_stat.len() != beta_grid.len() {
            return Err(Error::Shape(format!(
                "{} expected statistics for {} grid points",
                expected_stat.len(),
                beta_grid.len()
            )));
        }
        if expected_stat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState(
                "expected statistic must be finite".into(),
            ));
        }
        if expected_stat.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidState(
                "expected statistic must be non-decreasing in beta".into(),
            ));
        }
        let mut cumulative = Vec::with_capacity(beta_grid.len());
        cumulative.push(0.0);
        for s in 1..beta_grid.len() {
            let area =
                0.5 * (beta_grid[s] - beta_grid[s - 1]) * (expected_stat[s] + expected_stat[s - 1]);
            cumulative.push(cumulative[s - 1] + area);
        }
        Ok(Self {
            beta_grid,
            expected_stat,
            cumulative,
            meta,
        })
    }

    pub fn beta_grid(&self) -> &[f64] {
        &self.beta_grid
    }

    pub fn expected_stat(&self) -> &[f64] {
        &self.expected_stat
    }

    pub fn meta(&self) -> &PathTableMeta {
        &self.meta
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_grid[0], *self.beta_grid.last().unwrap())
    }

    /// Segment `s` with `grid[s] <= beta <= grid[s + 1]`, or an exact grid hit.
    fn locate(&self, beta: f64) -> Result<Location> {
        let (lower, upper) = self.beta_range();
        if !(beta >= lower && beta <= upper) {
            return Err(Error::Extrapolation { beta, lower, upper });
        }
        let idx = self.beta_grid.partition_point(|&g| g < beta);
        if idx < self.beta_grid.len() && self.beta_grid[idx] == beta {
            return Ok(Location::Node(idx));
        }
        Ok(Location::Segment(idx - 1))
    }

    /// Linearly interpolated `E[S | beta]`; exact at grid points.
    pub fn expected_stat_at(&self, beta: f64) -> Result<f64> {
        Ok(match self.locate(beta)? {
            Location::Node(i) => self.expected_stat[i],
            Location::Segment(s) => self.interpolate(s, beta),
        })
    }

    fn interpolate(&self, s: usize, beta: f64) -> f64 {
        let (g0, g1) = (self.beta_grid[s], self.beta_grid[s + 1]);
        let (f0, f1) = (self.expected_stat[s], self.expected_stat[s + 1]);
        f0 + (beta - g0) / (g1 - g0) * (f1 - f0)
    }

    /// Exact integral of the piecewise-linear interpolant from the first
    /// grid point to `beta`.
    pub fn integral_to(&self, beta: f64) -> Result<f64> {
        Ok(match self.locate(beta)? {
            Location::Node(i) => self.cumulative[i],
            Location::Segment(s) => {
                let g0 = self.beta_grid[s];
                let f_beta = self.interpolate(s, beta);
                self.cumulative[s] + 0.5 * (beta - g0) * (self.expected_stat[s] + f_beta)
            }
        })
    }
}

enum Location {
    Node(usize),
    Segment(usize),
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("beta grid is empty".into()));
    }
    if grid[0] != 0.0 {
        return Err(Error::InvalidConfig(format!(
            "beta grid must start at 0, starts at {}",
            grid[0]
        )));
    }
    if grid.iter().any(|g| !g.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig(
            "beta grid must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Grid `0, step, 2 step, ...` up to and including `max` (within rounding).
pub fn uniform_grid(step: f64, max: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && max >= 0.0 && step.is_finite() && max.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "bad grid step {step} / max {max}"
        )));
    }
    let steps = (max / step + 1e-9).floor() as usize;
    Ok((0..=steps).map(|i| i as f64 * step).collect())
}

/// Default grid: 0 to 2 in steps of 0.05 (41 points).
pub fn default_grid() -> Vec<f64> {
    (0..=40).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub grid: Vec<f64>,
    /// total Swendsen-Wang sweeps per grid point, burn-in included
    pub sweeps: usize,
    pub burnin: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            sweeps: 1000,
            burnin: 200,
            seed: 0,
        }
    }
}

/// Pool-adjacent-violators fit of a non-decreasing sequence (equal weights).
pub fn isotonic_non_decreasing(values: &[f64]) -> Vec<f64> {
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 <= s1 / c1 as f64 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s0 + s1, c0 + c1);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(s, c)| std::iter::repeat_n(s / c as f64, c))
        .collect()
}

/// Estimates `E[S | beta]` at each grid point by Swendsen-Wang simulation.
///
/// Each grid point runs on its own random stream derived from
/// `(seed, grid index)`, so the table is the same for any number of
/// workers. Raw averages are smoothed with [`isotonic_non_decreasing`].
pub fn calibrate(spec: &LatticeSpec, k: usize, config: &CalibrationConfig) -> Result<PathTable> {
    validate_grid(&config.grid)?;
    if config.sweeps <= config.burnin {
        return Err(Error::InvalidConfig(format!(
            "sweeps ({}) must exceed burn-in ({})",
            config.sweeps, config.burnin
        )));
    }
    if k == 0 || k > 255 {
        return Err(Error::InvalidConfig(format!(
            "number of classes must be in 1..=255, got {k}"
        )));
    }
    let lattice = Lattice::new(spec.clone())?;
    let raw = config
        .grid
        .par_iter()
        .enumerate()
        .map(|(idx, &beta)| mean_statistic(&lattice, k, beta, config, idx as u64))
        .collect::<Result<Vec<f64>>>()?;
    let meta = PathTableMeta {
        dims: spec.dims().to_vec(),
        k,
        n_edges: lattice.edges().len(),
        sweeps: config.sweeps,
        burnin: config.burnin,
        seed: config.seed,
    };
    PathTable::new(config.grid.clone(), isotonic_non_decreasing(&raw), meta)
}

fn mean_statistic(
    lattice: &Lattice,
    k: usize,
    beta: f64,
    config: &CalibrationConfig,
    idx: u64,
) -> Result<f64> {
    let mut r = rng::stream(config.seed, rng::tags::CALIBRATION + idx);
    let n = lattice.n_sites();
    let mut z = LabelField::random(n, k, &mut r)?;
    let mut sw = SwendsenWang::new(n);
    let mut total = 0.0;
    for sweep in 0..config.sweeps {
        sw.step(&mut z, beta, lattice.edges(), &mut r)?;
        if sweep >= config.burnin {
            total += sufficient_statistic(&z, lattice.edges())?.as_f64();
        }
    }
    Ok(total / (config.sweeps - config.burnin) as f64)
}

/// `log{C(beta_from) / C(beta_to)}`, the integral of `E[S | beta]` from
/// `beta_to` up to `beta_from`.
pub fn log_ratio_normalising(table: &PathTable, beta_from: f64, beta_to: f64) -> Result<f64> {
    Ok(table.integral_to(beta_from)? - table.integral_to(beta_to)?)
}

/// Uniform prior on `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub lower: f64,
    pub upper: f64,
}

impl BetaPrior {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower >= 0.0 && lower < upper && upper.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "beta prior needs 0 <= lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Uniform over the calibrated range of a table.
    pub fn for_table(table: &PathTable) -> Self {
        let (lower, upper) = table.beta_range();
        Self { lower, upper }
    }

    pub fn contains(&self, beta: f64) -> bool {
        beta >= self.lower && beta <= self.upper
    }
}

/// Outcome of one Metropolis-Hastings step for `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaStep {
    pub beta: f64,
    pub accepted: bool,
}

/// Log acceptance ratio for moving from `current` to `proposal` given the
/// sufficient statistic of the current labels.
pub fn log_acceptance_ratio(
    current: f64,
    proposal: f64,
    stat: SufficientStat,
    table: &PathTable,
) -> Result<f64> {
    Ok(log_ratio_normalising(table, current, proposal)? + (proposal - current) * stat.as_f64())
}

/// Accept/reject a given proposal. Proposals outside the prior support
/// are always rejected.
pub fn accept_beta<R: Rng + ?Sized>(
    current: f64,
    proposal: f64,
    stat: SufficientStat,
    table: &PathTable,
    prior: &BetaPrior,
    rng: &mut R,
) -> Result<BetaStep> {
    if !prior.contains(proposal) {
        return Ok(BetaStep {
            beta: current,
            accepted: false,
        });
    }
    let log_rho = log_acceptance_ratio(current, proposal, stat, table)?;
    let u: f64 = rng.random();
    if u < log_rho.exp() {
        Ok(BetaStep {
            beta: proposal,
            accepted: true,
        })
    } else {
        Ok(BetaStep {
            beta: current,
            accepted: false,
        })
    }
}

/// Gaussian random-walk Metropolis-Hastings update of `beta`.
pub fn update_beta<R: Rng + ?Sized>(
    current: f64,
    stat: SufficientStat,
    table: &PathTable,
    prior: &BetaPrior,
    proposal_sd: f64,
    rng: &mut R,
) -> Result<BetaStep> {
    if !(proposal_sd > 0.0 && proposal_sd.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "proposal sd must be positive, got {proposal_sd}"
        )));
    }
    if !prior.contains(current) {
        return Err(Error::InvalidState(format!(
            "current beta {current} outside prior support [{}, {}]",
            prior.lower, prior.upper
        )));
    }
    let step: f64 = rng.sample(StandardNormal);
    let proposal = current + proposal_sd * step;
    accept_beta(current, proposal, stat, table, prior, rng)
}

/// Batch-wise doubling/halving of the random-walk scale during burn-in,
/// aiming for an acceptance rate in `[0.2, 0.6]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalAdapter {
    sd: f64,
    batch: usize,
    in_batch: usize,
    accepted_in_batch: usize,
    frozen: bool,
    accepted_total: usize,
    proposed_total: usize,
}

impl ProposalAdapter {
    pub fn new(sd: f64, batch: usize) -> Self {
        Self {
            sd,
            batch: batch.max(1),
            in_batch: 0,
            accepted_in_batch: 0,
            frozen: false,
            accepted_total: 0,
            proposed_total: 0,
        }
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.accepted_total = 0;
        self.proposed_total = 0;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Acceptance rate since the last freeze (or since creation).
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed_total == 0 {
            0.0
        } else {
            self.accepted_total as f64 / self.proposed_total as f64
        }
    }

    pub fn record(&mut self, accepted: bool) {
        self.proposed_total += 1;
        self.accepted_total += usize::from(accepted);
        if self.frozen {
            return;
        }
        self.in_batch += 1;
        self.accepted_in_batch += usize::from(accepted);
        if self.in_batch == self.batch {
            let rate = self.accepted_in_batch as f64 / self.batch as f64;
            if rate < 0.2 {
                self.sd *= 0.5;
            } else if rate > 0.6 {
                self.sd *= 2.0;
            }
            self.in_batch = 0;
            self.accepted_in_batch = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> PathTableMeta {
        PathTableMeta {
            dims: vec![2, 2],
            k: 2,
            n_edges: 4,
            sweeps: 0,
            burnin: 0,
            seed: 0,
        }
    }

    fn toy_table() -> PathTable {
        let grid = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let stat = vec![2.0, 2.3, 2.9, 3.5, 3.8];
        PathTable::new(grid, stat, meta()).unwrap()
    }

    #[test]
    fn interpolation_is_exact_at_nodes() {
        let t = toy_table();
        for (g, s) in t.beta_grid().iter().zip(t.expected_stat()) {
            assert_eq!(t.expected_stat_at(*g).unwrap(), *s);
        }
        assert!((t.expected_stat_at(0.25).unwrap() - 2.15).abs() < 1e-15);
    }

    #[test]
    fn log_ratio_examples() {
        let t = toy_table();
        assert_eq!(log_ratio_normalising(&t, 0.7, 0.7).unwrap(), 0.0);
        let a = log_ratio_normalising(&t, 0.3, 1.7).unwrap();
        let b = log_ratio_normalising(&t, 1.7, 0.3).unwrap();
        assert_eq!(a, -b);
        // integral of the interpolant from 0 to 0.5: (2.0 + 2.3) / 2 * 0.5
        let c = log_ratio_normalising(&t, 0.5, 0.0).unwrap();
        assert!((c - 1.075).abs() < 1e-15);
    }

    #[test]
    fn no_silent_extrapolation() {
        let t = toy_table();
        assert!(matches!(
            log_ratio_normalising(&t, 2.1, 1.0),
            Err(Error::Extrapolation { .. })
        ));
        assert!(matches!(
            t.expected_stat_at(-0.01),
            Err(Error::Extrapolation { .. })
        ));
        assert!(t.expected_stat_at(f64::NAN).is_err());
    }

    #[test]
    fn table_validation() {
        assert!(PathTable::new(vec![], vec![], meta()).is_err());
        assert!(PathTable::new(vec![0.1, 0.2], vec![1.0, 2.0], meta()).is_err());
        assert!(PathTable::new(vec![0.0, 0.2, 0.2], vec![1.0, 2.0, 3.0], meta()).is_err());
        assert!(PathTable::new(vec![0.0, 0.2], vec![2.0, 1.0], meta()).is_err());
    }

    #[test]
    fn default_grid_has_41_points() {
        let g = default_grid();
        assert_eq!(g.len(), 41);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[40], 2.0);
        assert!((g[1] - 0.05).abs() < 1e-15);
        assert_eq!(uniform_grid(0.1, 2.0).unwrap().len(), 21);
    }

    #[test]
    fn pav_examples() {
        assert_eq!(
            isotonic_non_decreasing(&[1.0, 3.0, 2.0, 4.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        assert_eq!(
            isotonic_non_decreasing(&[3.0, 2.0, 1.0]),
            vec![2.0, 2.0, 2.0]
        );
        assert_eq!(isotonic_non_decreasing(&[]), Vec::<f64>::new());
    }

    #[test]
    fn calibrate_config_errors() {
        let spec = LatticeSpec::unit(&[3, 3]).unwrap();
        let mut cfg = CalibrationConfig {
            grid: vec![],
            ..Default::default()
        };
        assert!(matches!(
            calibrate(&spec, 2, &cfg),
            Err(Error::InvalidConfig(_))
        ));
        cfg.grid = vec![0.0, 1.0];
        cfg.sweeps = 10;
        cfg.burnin = 10;
        assert!(matches!(
            calibrate(&spec, 2, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn calibrate_limits() {
        let spec = LatticeSpec::unit(&[4, 4]).unwrap();
        let cfg = CalibrationConfig {
            grid: vec![0.0, 1.0, 2.0, 6.0],
            sweeps: 3000,
            burnin: 100,
            seed: 4,
        };
        let t = calibrate(&spec, 2, &cfg).unwrap();
        // |E| = 24; beta = 0 gives 12 in expectation with per-sweep sd
        // sqrt(24 * 0.25) ~ 2.45; 2900 independent sweeps -> SE ~ 0.045
        assert!(
            (t.expected_stat()[0] - 12.0).abs() < 3.0 * 0.046,
            "{}",
            t.expected_stat()[0]
        );
        assert!(t.expected_stat()[3] > 23.5);
    }

    #[test]
    fn update_beta_rejects_outside_support() {
        let t = toy_table();
        let prior = BetaPrior::new(0.5, 1.5).unwrap();
        let mut r = rng::stream(1, 0);
        let step = accept_beta(1.0, 1.6, SufficientStat(4), &t, &prior, &mut r).unwrap();
        assert_eq!(
            step,
            BetaStep {
                beta: 1.0,
                accepted: false
            }
        );
        let step = accept_beta(1.0, 0.49, SufficientStat(0), &t, &prior, &mut r).unwrap();
        assert_eq!(
            step,
            BetaStep {
                beta: 1.0,
                accepted: false
            }
        );
        // a huge proposal sd lands outside [0.5, 1.5] almost surely
        for _ in 0..20 {
            let s = update_beta(1.0, SufficientStat(3), &t, &prior, 1e6, &mut r).unwrap();
            assert_eq!(s.beta, 1.0);
        }
    }

    #[test]
    fn degenerate_proposal_is_accepted() {
        let t = toy_table();
        let prior = BetaPrior::for_table(&t);
        let mut r = rng::stream(2, 0);
        for _ in 0..1000 {
            let step = accept_beta(0.8, 0.8, SufficientStat(1), &t, &prior, &mut r).unwrap();
            assert!(step.accepted);
        }
    }

    #[test]
    fn update_beta_errors() {
        let t = toy_table();
        let prior = BetaPrior::for_table(&t);
        let mut r = rng::stream(2, 0);
        assert!(matches!(
            update_beta(1.0, SufficientStat(1), &t, &prior, 0.0, &mut r),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            update_beta(1.0, SufficientStat(1), &t, &prior, -1.0, &mut r),
            Err(Error::InvalidConfig(_))
        ));
        assert!(update_beta(2.5, SufficientStat(1), &t, &prior, 0.1, &mut r).is_err());
        assert!(BetaPrior::new(1.0, 1.0).is_err());
    }

    #[test]
    fn update_beta_is_deterministic_given_stream() {
        let t = toy_table();
        let prior = BetaPrior::for_table(&t);
        let run = || {
            let mut r = rng::stream(8, 0);
            let mut b = 1.0;
            let mut out = Vec::new();
            for _ in 0..200 {
                b = update_beta(b, SufficientStat(3), &t, &prior, 0.3, &mut r)
                    .unwrap()
                    .beta;
                out.push(b);
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adapter_halves_and_doubles_then_freezes() {
        let mut a = ProposalAdapter::new(0.01, 10);
        for _ in 0..10 {
            a.record(true);
        }
        assert_eq!(a.sd(), 0.02);
        for _ in 0..10 {
            a.record(false);
        }
        assert_eq!(a.sd(), 0.01);
        for i in 0..10 {
            a.record(i < 4);
        }
        assert_eq!(a.sd(), 0.01);
        a.freeze();
        for _ in 0..100 {
            a.record(false);
        }
        assert_eq!(a.sd(), 0.01);
        assert_eq!(a.acceptance_rate(), 0.0);
    }

    proptest! {
        #[test]
        fn log_ratio_additive(a in 0.0f64..2.0, b in 0.0f64..2.0, c in 0.0f64..2.0) {
            let t = toy_table();
            let ac = log_ratio_normalising(&t, a, c).unwrap();
            let ab = log_ratio_normalising(&t, a, b).unwrap();
            let bc = log_ratio_normalising(&t, b, c).unwrap();
            prop_assert!((ac - (ab + bc)).abs() < 1e-12);
        }

        #[test]
        fn pav_output_is_monotone_and_mean_preserving(v in proptest::collection::vec(-10.0f64..10.0, 1..40)) {
            let fit = isotonic_non_decreasing(&v);
            prop_assert_eq!(fit.len(), v.len());
            prop_assert!(fit.windows(2).all(|w| w[0] <= w[1] + 1e-12));
            let (s0, s1): (f64, f64) = (v.iter().sum(), fit.iter().sum());
            prop_assert!((s0 - s1).abs() < 1e-9);
        }
    }
}

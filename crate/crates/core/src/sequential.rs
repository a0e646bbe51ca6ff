//! Sequential updating of the displacement hyperparameters.
//!
//! A fitted chain gives per-site label probabilities. Weighting each site's
//! distance to the reference objects by those probabilities yields Gaussian
//! sufficient statistics, which are folded into a conjugate prior state so
//! the field prior can be refreshed before the next image.

use serde::{Deserialize, Serialize};

use crate::engine::AllocationCounts;
use crate::error::{Error, Result};
use crate::externalfield::{DeltaParams, DistanceField};
use crate::lattice::LatticeSpec;
use crate::potts::LabelField;

/// Posterior label probabilities, `k` planes of `n` sites.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelWeights {
    k: usize,
    n: usize,
    w: Vec<f64>,
}

impl LabelWeights {
    pub fn from_planes(k: usize, n: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != k * n || k == 0 {
            return Err(Error::Shape(format!(
                "{} weights for {n} sites x {k} classes",
                w.len()
            )));
        }
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("weights must lie in [0, 1]".into()));
        }
        let lw = Self { k, n, w };
        for i in 0..n {
            let total: f64 = (0..k).map(|j| lw.get(i, j)).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!("weights at site {i} sum to {total}")));
            }
        }
        Ok(lw)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, site: usize, label: usize) -> f64 {
        self.w[label * self.n + site]
    }

    pub fn plane(&self, label: usize) -> &[f64] {
        &self.w[label * self.n..(label + 1) * self.n]
    }

    pub fn planes(&self) -> &[f64] {
        &self.w
    }
}

/// `w[i][j] = count[i][j] / retained`.
pub fn posterior_weights(counts: &AllocationCounts) -> Result<LabelWeights> {
    let retained = counts.retained();
    if retained == 0 {
        return Err(Error::InvalidState(
            "no retained iterations to weight".into(),
        ));
    }
    let scale = 1.0 / retained as f64;
    let w = counts.planes().iter().map(|&c| c as f64 * scale).collect();
    Ok(LabelWeights {
        k: counts.k(),
        n: counts.n_sites(),
        w,
    })
}

/// Weighted count, mean and variance of distances for one label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub nu_hat: f64,
    pub m_hat: f64,
    pub s2_hat: f64,
}

impl DeltaStats {
    pub const EMPTY: Self = Self {
        nu_hat: 0.0,
        m_hat: 0.0,
        s2_hat: 0.0,
    };

    pub fn is_empty(&self) -> bool {
        self.nu_hat <= 0.0
    }
}

/// Per-label statistics; labels with no weight are flagged empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSufficientStats {
    pub labels: Vec<DeltaStats>,
}

impl DeltaSufficientStats {
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn empty_labels(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&j| self.labels[j].is_empty())
            .collect()
    }

    /// Combines statistics from disjoint batches of sites.
    pub fn pool(&self, other: &Self) -> Result<Self> {
        if self.k() != other.k() {
            return Err(Error::Shape(format!(
                "cannot pool {} labels with {}",
                self.k(),
                other.k()
            )));
        }
        let labels = self
            .labels
            .iter()
            .zip(&other.labels)
            .map(|(a, b)| {
                let nu = a.nu_hat + b.nu_hat;
                if nu <= 0.0 {
                    return DeltaStats::EMPTY;
                }
                let m = (a.nu_hat * a.m_hat + b.nu_hat * b.m_hat) / nu;
                let diff = a.m_hat - b.m_hat;
                let s2 = (a.nu_hat * a.s2_hat
                    + b.nu_hat * b.s2_hat
                    + a.nu_hat * b.nu_hat / nu * diff * diff)
                    / nu;
                DeltaStats {
                    nu_hat: nu,
                    m_hat: m,
                    s2_hat: s2,
                }
            })
            .collect();
        Ok(Self { labels })
    }

    /// Adds a per-label offset to each weighted mean distance.
    pub fn with_bias_correction(&self, offsets: &[f64]) -> Result<Self> {
        if offsets.len() != self.k() {
            return Err(Error::Shape(format!(
                "{} offsets for {} labels",
                offsets.len(),
                self.k()
            )));
        }
        let labels = self
            .labels
            .iter()
            .zip(offsets)
            .map(|(s, &o)| {
                if s.is_empty() {
                    *s
                } else {
                    DeltaStats {
                        m_hat: s.m_hat + o,
                        ..*s
                    }
                }
            })
            .collect();
        Ok(Self { labels })
    }
}

/// Weighted statistics of each label's minimum-distance field.
///
/// `dists[j]` must be the distance field of the reference object `j`.
pub fn delta_sufficient_stats(
    w: &LabelWeights,
    dists: &[DistanceField],
) -> Result<DeltaSufficientStats> {
    if dists.len() != w.k() {
        return Err(Error::Shape(format!(
            "{} distance fields for {} labels",
            dists.len(),
            w.k()
        )));
    }
    let mut labels = Vec::with_capacity(w.k());
    for (j, d) in dists.iter().enumerate() {
        if d.values().len() != w.n_sites() {
            return Err(Error::Shape(format!(
                "distance field for label {j} has {} sites, weights have {}",
                d.values().len(),
                w.n_sites()
            )));
        }
        let weights = w.plane(j);
        let nu: f64 = weights.iter().sum();
        if nu <= 0.0 {
            labels.push(DeltaStats::EMPTY);
            continue;
        }
        let m = weights
            .iter()
            .zip(d.values())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / nu;
        let s2 = weights
            .iter()
            .zip(d.values())
            .map(|(a, b)| a * (b - m) * (b - m))
            .sum::<f64>()
            / nu;
        labels.push(DeltaStats {
            nu_hat: nu,
            m_hat: m,
            s2_hat: s2,
        });
    }
    Ok(DeltaSufficientStats { labels })
}

/// Mean pairwise distance (mm) between the sites of object `j`,
/// self-pairs included. Quadratic in the object size.
pub fn intra_object_mean_distance(
    reference: &LabelField,
    spec: &LatticeSpec,
    j: usize,
) -> Result<f64> {
    reference.check_len(spec.n_sites())?;
    if j >= reference.k() {
        return Err(Error::OutOfBounds {
            index: j,
            len: reference.k(),
        });
    }
    let positions: Vec<[f64; 3]> = (0..reference.len())
        .filter(|&i| reference.get(i) as usize == j)
        .map(|i| spec.position_mm(i))
        .collect();
    if positions.is_empty() {
        return Err(Error::EmptyClass(j));
    }
    let mut total = 0.0;
    for (a, p) in positions.iter().enumerate() {
        for q in &positions[a + 1..] {
            let d2: f64 = (0..3).map(|c| (p[c] - q[c]) * (p[c] - q[c])).sum();
            total += d2.sqrt();
        }
    }
    let n = positions.len() as f64;
    Ok(2.0 * total / (n * n))
}

/// Conjugate state for one label: pseudo-count, mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPrior {
    pub n_prior: f64,
    pub mu_prior: f64,
    pub sigma2_prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPriorState {
    pub labels: Vec<DeltaPrior>,
}

impl DeltaPriorState {
    pub fn new(labels: Vec<DeltaPrior>) -> Result<Self> {
        let state = Self { labels };
        state.validate()?;
        Ok(state)
    }

    /// Same pseudo-count for every label, moments from `params`.
    pub fn from_params(params: &[DeltaParams], n_prior: f64) -> Result<Self> {
        Self::new(
            params
                .iter()
                .map(|p| DeltaPrior {
                    n_prior,
                    mu_prior: p.mu_delta,
                    sigma2_prior: p.sigma2_delta,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidConfig("prior state has no labels".into()));
        }
        for (j, p) in self.labels.iter().enumerate() {
            if !(p.n_prior > 0.0
                && p.n_prior.is_finite()
                && p.sigma2_prior > 0.0
                && p.sigma2_prior.is_finite()
                && p.mu_prior.is_finite())
            {
                return Err(Error::InvalidConfig(format!(
                    "invalid prior state for label {j}"
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// Plug-in displacement parameters for refreshing the field prior.
    pub fn to_params(&self) -> Result<Vec<DeltaParams>> {
        self.labels
            .iter()
            .map(|p| DeltaParams::new(p.mu_prior, p.sigma2_prior))
            .collect()
    }
}

/// Conjugate Gaussian update of every label's state.
///
/// `nu' = n0 + nu_hat`, `m' = (n0 mu0 + nu_hat m_hat) / nu'` and
/// `s2' = (n0 sigma2_0 + nu_hat s2_hat + (n0 nu_hat / nu') (m_hat - mu0)^2) / nu'`.
/// Labels with no weight keep their prior.
pub fn update_delta_hyperparams(
    prior: &DeltaPriorState,
    stats: &DeltaSufficientStats,
) -> Result<DeltaPriorState> {
    prior.validate()?;
    if prior.k() != stats.k() {
        return Err(Error::Shape(format!(
            "prior has {} labels, statistics {}",
            prior.k(),
            stats.k()
        )));
    }
    let labels = prior
        .labels
        .iter()
        .zip(&stats.labels)
        .map(|(p, s)| {
            if s.is_empty() {
                return *p;
            }
            let nu = p.n_prior + s.nu_hat;
            let m = (p.n_prior * p.mu_prior + s.nu_hat * s.m_hat) / nu;
            let diff = s.m_hat - p.mu_prior;
            let s2 = (p.n_prior * p.sigma2_prior
                + s.nu_hat * s.s2_hat
                + p.n_prior * s.nu_hat / nu * diff * diff)
                / nu;
            DeltaPrior {
                n_prior: nu,
                mu_prior: m,
                sigma2_prior: s2,
            }
        })
        .collect();
    Ok(DeltaPriorState { labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::externalfield::distance_transform;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn field(label: usize, values: Vec<f64>) -> DistanceField {
        DistanceField::new(label, values)
    }

    #[test]
    fn weights_from_counts() {
        let counts = AllocationCounts::from_planes(2, 2, vec![25, 100, 75, 0]).unwrap();
        let w = posterior_weights(&counts).unwrap();
        assert_eq!(w.get(0, 0), 0.25);
        assert_eq!(w.get(0, 1), 0.75);
        assert_eq!(w.get(1, 0), 1.0);
        assert_eq!(w.get(1, 1), 0.0);
        let empty = AllocationCounts::zeros(2, 3);
        assert!(matches!(
            posterior_weights(&empty),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let mut r = rng::stream(1, 0);
        let (k, n, total) = (4, 30, 37u32);
        let mut counts = vec![0u32; k * n];
        for i in 0..n {
            for _ in 0..total {
                counts[r.random_range(0..k) * n + i] += 1;
            }
        }
        let w = posterior_weights(&AllocationCounts::from_planes(k, n, counts).unwrap()).unwrap();
        for i in 0..n {
            let s: f64 = (0..k).map(|j| w.get(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_hand_examples() {
        let w = LabelWeights::from_planes(1, 2, vec![1.0, 1.0]).unwrap();
        let s = delta_sufficient_stats(&w, &[field(0, vec![0.0, 4.0])]).unwrap();
        assert_eq!(s.labels[0].nu_hat, 2.0);
        assert_eq!(s.labels[0].m_hat, 2.0);
        assert_eq!(s.labels[0].s2_hat, 4.0);

        let w = LabelWeights::from_planes(2, 3, vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = delta_sufficient_stats(
            &w,
            &[field(0, vec![0.0, 0.0, 3.0]), field(1, vec![2.0, 1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(
            s.labels[0],
            DeltaStats {
                nu_hat: 2.0,
                m_hat: 0.0,
                s2_hat: 0.0
            }
        );
        assert_eq!(s.labels[1].m_hat, 0.0);

        let w = LabelWeights::from_planes(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = delta_sufficient_stats(&w, &[field(0, vec![1.0, 2.0]), field(1, vec![1.0, 2.0])])
            .unwrap();
        assert_eq!(s.empty_labels(), vec![1]);
    }

    #[test]
    fn stats_match_direct_summation() {
        let spec = LatticeSpec::new(&[16, 16], &[1.0, 1.5]).unwrap();
        let mut r = rng::stream(7, 0);
        let k = 3;
        let reference =
            LabelField::new((0..256).map(|i| ((i / 16) * 3 / 16) as u8).collect(), k).unwrap();
        let mut raw: Vec<f64> = (0..k * 256).map(|_| r.random::<f64>()).collect();
        for i in 0..256 {
            let t: f64 = (0..k).map(|j| raw[j * 256 + i]).sum();
            (0..k).for_each(|j| raw[j * 256 + i] /= t);
        }
        let w = LabelWeights::from_planes(k, 256, raw.clone()).unwrap();
        let dists: Vec<_> = (0..k)
            .map(|j| distance_transform(&reference, &spec, j).unwrap())
            .collect();
        let stats = delta_sufficient_stats(&w, &dists).unwrap();
        for j in 0..k {
            // brute-force minimum distances
            let members: Vec<usize> = (0..256)
                .filter(|&h| reference.get(h) as usize == j)
                .collect();
            let d: Vec<f64> = (0..256)
                .map(|i| {
                    members
                        .iter()
                        .map(|&h| spec.distance_mm(h, i))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let (mut nu, mut sum, mut sq) = (0.0, 0.0, 0.0);
            for i in 0..256 {
                let wi = raw[j * 256 + i];
                nu += wi;
                sum += wi * d[i];
            }
            let m = sum / nu;
            for i in 0..256 {
                sq += raw[j * 256 + i] * (d[i] - m) * (d[i] - m);
            }
            assert!((stats.labels[j].nu_hat - nu).abs() < 1e-12);
            assert!((stats.labels[j].m_hat - m).abs() < 1e-12);
            assert!((stats.labels[j].s2_hat - sq / nu).abs() < 1e-12);
        }
    }

    #[test]
    fn intra_object_examples() {
        let spec = LatticeSpec::unit(&[4, 4]).unwrap();
        let mut labels = vec![0u8; 16];
        labels[5] = 1;
        let z = LabelField::new(labels.clone(), 3).unwrap();
        assert_eq!(intra_object_mean_distance(&z, &spec, 1).unwrap(), 0.0);
        labels[6] = 1;
        let z = LabelField::new(labels, 3).unwrap();
        assert_eq!(intra_object_mean_distance(&z, &spec, 1).unwrap(), 0.5);
        assert!(matches!(
            intra_object_mean_distance(&z, &spec, 2),
            Err(Error::EmptyClass(2))
        ));
    }

    #[test]
    fn intra_object_random_matches_full_double_loop() {
        let spec = LatticeSpec::new(&[12, 10], &[0.88, 2.0]).unwrap();
        let mut r = rng::stream(3, 0);
        let mut labels = vec![0u8; 120];
        let mut placed = 0;
        while placed < 10 {
            let i = r.random_range(0..120);
            if labels[i] == 0 {
                labels[i] = 1;
                placed += 1;
            }
        }
        let z = LabelField::new(labels, 2).unwrap();
        let members: Vec<usize> = (0..120).filter(|&i| z.get(i) == 1).collect();
        let mut total = 0.0;
        for &g in &members {
            for &h in &members {
                let (a, b) = (spec.coords(g), spec.coords(h));
                let dx = (a[0] as f64 - b[0] as f64) * 0.88;
                let dy = (a[1] as f64 - b[1] as f64) * 2.0;
                total += (dx * dx + dy * dy).sqrt();
            }
        }
        let expect = total / 100.0;
        assert!((intra_object_mean_distance(&z, &spec, 1).unwrap() - expect).abs() < 1e-12);
    }

    fn state(n: f64, mu: f64, s2: f64) -> DeltaPriorState {
        DeltaPriorState::new(vec![DeltaPrior {
            n_prior: n,
            mu_prior: mu,
            sigma2_prior: s2,
        }])
        .unwrap()
    }

    fn stats(nu: f64, m: f64, s2: f64) -> DeltaSufficientStats {
        DeltaSufficientStats {
            labels: vec![DeltaStats {
                nu_hat: nu,
                m_hat: m,
                s2_hat: s2,
            }],
        }
    }

    #[test]
    fn update_passthrough_and_symmetry() {
        let p = state(25.0, 1.2, 53.29);
        assert_eq!(
            update_delta_hyperparams(&p, &stats(0.0, 0.0, 0.0)).unwrap(),
            p
        );
        let u = update_delta_hyperparams(&p, &stats(25.0, 1.2, 10.0)).unwrap();
        assert!((u.labels[0].mu_prior - 1.2).abs() < 1e-15);
        assert_eq!(u.labels[0].n_prior, 50.0);
    }

    #[test]
    fn update_scalar_example() {
        let (n0, mu0, s20) = (25.0, 1.2, 7.3 * 7.3);
        let (nu, m, s2) = (25.0, 2.0, 36.0);
        let u = update_delta_hyperparams(&state(n0, mu0, s20), &stats(nu, m, s2)).unwrap();
        let nu_post = 50.0;
        let m_post = (25.0 * 1.2 + 25.0 * 2.0) / 50.0;
        let s2_post = (25.0 * 53.29 + 25.0 * 36.0 + 12.5 * 0.8 * 0.8) / 50.0;
        assert_eq!(u.labels[0].n_prior, nu_post);
        assert!((u.labels[0].mu_prior - m_post).abs() < 1e-14);
        assert!((u.labels[0].sigma2_prior - s2_post).abs() < 1e-12);
        assert!((m_post - 1.6f64).abs() < 1e-15);
        assert!((s2_post - 44.805f64).abs() < 1e-12);
    }

    #[test]
    fn pooled_stats_equal_full_sample_stats() {
        let mut r = rng::stream(11, 0);
        let n = 40;
        let d: Vec<f64> = (0..n).map(|_| 20.0 * r.random::<f64>()).collect();
        let w: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let part = |lo: usize, hi: usize| {
            let nu: f64 = w[lo..hi].iter().sum();
            let m = (lo..hi).map(|i| w[i] * d[i]).sum::<f64>() / nu;
            let s2 = (lo..hi)
                .map(|i| w[i] * (d[i] - m) * (d[i] - m))
                .sum::<f64>()
                / nu;
            stats(nu, m, s2)
        };
        let pooled = part(0, 17).pool(&part(17, n)).unwrap();
        let full = part(0, n);
        assert!((pooled.labels[0].nu_hat - full.labels[0].nu_hat).abs() < 1e-12);
        assert!((pooled.labels[0].m_hat - full.labels[0].m_hat).abs() < 1e-12);
        assert!((pooled.labels[0].s2_hat - full.labels[0].s2_hat).abs() < 1e-10);
    }

    #[test]
    fn bias_correction_shifts_mean_only() {
        let s = DeltaSufficientStats {
            labels: vec![
                DeltaStats {
                    nu_hat: 3.0,
                    m_hat: 1.0,
                    s2_hat: 2.0,
                },
                DeltaStats::EMPTY,
            ],
        };
        let c = s.with_bias_correction(&[0.5, 9.0]).unwrap();
        assert_eq!(
            c.labels[0],
            DeltaStats {
                nu_hat: 3.0,
                m_hat: 1.5,
                s2_hat: 2.0
            }
        );
        assert_eq!(c.labels[1], DeltaStats::EMPTY);
        assert!(s.with_bias_correction(&[0.0]).is_err());
    }

    #[test]
    fn state_round_trips_to_params() {
        let params = vec![
            DeltaParams::new(1.2, 53.29).unwrap(),
            DeltaParams::new(0.0, 4.0).unwrap(),
        ];
        let st = DeltaPriorState::from_params(&params, 25.0).unwrap();
        assert_eq!(st.to_params().unwrap(), params);
        let json = serde_json::to_string(&st).unwrap();
        assert_eq!(serde_json::from_str::<DeltaPriorState>(&json).unwrap(), st);
        assert!(DeltaPriorState::from_params(&params, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn sequential_equals_pooled(
            n0 in 0.5f64..50.0, mu0 in -5.0f64..5.0, s20 in 0.1f64..100.0,
            nu1 in 0.0f64..40.0, m1 in -10.0f64..30.0, v1 in 0.0f64..80.0,
            nu2 in 0.0f64..40.0, m2 in -10.0f64..30.0, v2 in 0.0f64..80.0,
        ) {
            let p = state(n0, mu0, s20);
            let a = stats(nu1, m1, v1);
            let b = stats(nu2, m2, v2);
            let seq = update_delta_hyperparams(&update_delta_hyperparams(&p, &a).unwrap(), &b).unwrap();
            let once = update_delta_hyperparams(&p, &a.pool(&b).unwrap()).unwrap();
            let (x, y) = (seq.labels[0], once.labels[0]);
            prop_assert!((x.n_prior - y.n_prior).abs() < 1e-10);
            prop_assert!((x.mu_prior - y.mu_prior).abs() < 1e-10);
            prop_assert!((x.sigma2_prior - y.sigma2_prior).abs() < 1e-10 * y.sigma2_prior.max(1.0));
        }

        #[test]
        fn posterior_mean_between_prior_and_data(
            n0 in 0.5f64..50.0, mu0 in -5.0f64..5.0, s20 in 0.1f64..100.0,
            nu in 0.0f64..40.0, m in -10.0f64..30.0, v in 0.0f64..80.0,
        ) {
            let u = update_delta_hyperparams(&state(n0, mu0, s20), &stats(nu, m, v)).unwrap().labels[0];
            prop_assert!(u.mu_prior >= mu0.min(m) - 1e-12 && u.mu_prior <= mu0.max(m) + 1e-12);
            prop_assert!(u.sigma2_prior > 0.0);
        }
    }
}

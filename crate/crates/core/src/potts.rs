//! The Potts Markov random field: label fields, the sufficient statistic,
//! the conditional label distribution without data, and Swendsen-Wang
//! cluster simulation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{EdgeSet, Lattice};

/// Per-site class labels, stored as zero-based indices `0..k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelField {
    labels: Vec<u8>,
    k: usize,
}

impl LabelField {
    pub fn new(labels: Vec<u8>, k: usize) -> Result<Self> {
        if k == 0 || k > 255 {
            return Err(Error::InvalidSpec(format!(
                "number of classes must be in 1..=255, got {k}"
            )));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= k) {
            return Err(Error::Data(format!(
                "label {} at site {pos} is outside 0..{k}",
                labels[pos]
            )));
        }
        Ok(Self { labels, k })
    }

    /// A field with every site set to `label`.
    pub fn constant(n: usize, k: usize, label: u8) -> Result<Self> {
        Self::new(vec![label; n], k)
    }

    /// Independent uniform labels.
    pub fn random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || k > 255 {
            return Err(Error::InvalidSpec(format!(
                "number of classes must be in 1..=255, got {k}"
            )));
        }
        let labels = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
        Ok(Self { labels, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    /// Number of sites carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        if self.labels.len() != n {
            return Err(Error::Shape(format!(
                "label field has {} sites, lattice has {n}",
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// Number of neighbour pairs that share a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SufficientStat(pub u64);

impl SufficientStat {
    pub fn value(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }
}

pub fn sufficient_statistic(z: &LabelField, edges: &EdgeSet) -> Result<SufficientStat> {
    z.check_len(edges.n_sites())?;
    let labels = z.labels();
    let count = edges
        .iter()
        .filter(|&(a, b)| labels[a] == labels[b])
        .count();
    Ok(SufficientStat(count as u64))
}

/// Conditional distribution of label `i` given its neighbours, without data.
///
/// Component `j` is proportional to `exp(beta * #{neighbours labelled j})`.
pub fn prior_conditional(
    i: usize,
    z: &LabelField,
    beta: f64,
    lattice: &Lattice,
) -> Result<Vec<f64>> {
    z.check_len(lattice.n_sites())?;
    if i >= z.len() {
        return Err(Error::OutOfBounds {
            index: i,
            len: z.len(),
        });
    }
    if !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be finite, got {beta}")));
    }
    let mut logits = vec![0.0; z.k()];
    for &nb in lattice.neighbours(i) {
        logits[z.get(nb as usize) as usize] += beta;
    }
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Normalises log-weights into probabilities, shifting by the maximum first.
pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in logits.iter_mut() {
        *v /= total;
    }
}

/// Reusable buffers for Swendsen-Wang sweeps on one lattice.
#[derive(Debug, Clone)]
pub struct SwendsenWang {
    parent: Vec<u32>,
    size: Vec<u32>,
    new_label: Vec<u8>,
}

impl SwendsenWang {
    pub fn new(n_sites: usize) -> Self {
        Self {
            parent: vec![0; n_sites],
            size: vec![0; n_sites],
            new_label: vec![0; n_sites],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra as usize] >= self.size[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
    }

    /// One Swendsen-Wang update of `z` in place.
    ///
    /// Bonds are drawn in edge order, one Bernoulli draw per like-labelled
    /// edge. Clusters are then relabelled in order of their smallest site
    /// index, so the result depends only on the bond draw and not on the
    /// internal shape of the union-find forest.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        z: &mut LabelField,
        beta: f64,
        edges: &EdgeSet,
        rng: &mut R,
    ) -> Result<()> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!(
                "Swendsen-Wang needs finite beta >= 0, got {beta}"
            )));
        }
        let n = edges.n_sites();
        z.check_len(n)?;
        if self.parent.len() != n {
            *self = Self::new(n);
        }
        for (i, (p, s)) in self.parent.iter_mut().zip(self.size.iter_mut()).enumerate() {
            *p = i as u32;
            *s = 1;
        }
        let bond_prob = -(-beta).exp_m1();
        for (a, b) in edges.iter() {
            if z.labels[a] == z.labels[b] && rng.random::<f64>() < bond_prob {
                self.union(a as u32, b as u32);
            }
        }
        const UNSET: u8 = u8::MAX;
        // labels are < k <= 255, so UNSET never collides with a real label
        self.new_label.fill(UNSET);
        let k = z.k;
        for i in 0..n {
            let root = self.find(i as u32) as usize;
            if self.new_label[root] == UNSET {
                self.new_label[root] = rng.random_range(0..k) as u8;
            }
            z.labels[i] = self.new_label[root];
        }
        Ok(())
    }
}

/// Allocating convenience wrapper around [`SwendsenWang::step`].
pub fn swendsen_wang_step<R: Rng + ?Sized>(
    z: &LabelField,
    beta: f64,
    edges: &EdgeSet,
    rng: &mut R,
) -> Result<LabelField> {
    let mut out = z.clone();
    SwendsenWang::new(edges.n_sites()).step(&mut out, beta, edges, rng)?;
    Ok(out)
}

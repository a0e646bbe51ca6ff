//! Regular 2D/3D lattice geometry.
//!
//! Sites are linearised with `x` varying fastest, then `y`, then `z`:
//! `index = x + nx * (y + ny * z)`. Every module in the crate shares this
//! ordering, including the on-disk volume format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid dimensions and physical voxel size (millimetres per axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatticeSpec", into = "RawLatticeSpec")]
pub struct LatticeSpec {
    dims: Vec<usize>,
    voxel_size: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawLatticeSpec {
    dims: Vec<usize>,
    voxel_size: Vec<f64>,
}

impl TryFrom<RawLatticeSpec> for LatticeSpec {
    type Error = Error;

    fn try_from(raw: RawLatticeSpec) -> Result<Self> {
        LatticeSpec::new(&raw.dims, &raw.voxel_size)
    }
}

impl From<LatticeSpec> for RawLatticeSpec {
    fn from(spec: LatticeSpec) -> Self {
        RawLatticeSpec {
            dims: spec.dims,
            voxel_size: spec.voxel_size,
        }
    }
}

impl LatticeSpec {
    pub fn new(dims: &[usize], voxel_size: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidSpec(format!(
                "lattice must be 2D or 3D, got {} dimensions",
                dims.len()
            )));
        }
        if voxel_size.len() != dims.len() {
            return Err(Error::InvalidSpec(format!(
                "{} voxel sizes given for {} dimensions",
                voxel_size.len(),
                dims.len()
            )));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!(
                "dimension {axis} has size zero"
            )));
        }
        if let Some(&v) = voxel_size.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidSpec(format!(
                "voxel sizes must be positive and finite, got {v}"
            )));
        }
        if dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none_or(|n| n > u32::MAX as usize)
        {
            return Err(Error::InvalidSpec("lattice is too large".into()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            voxel_size: voxel_size.to_vec(),
        })
    }

    /// A lattice with 1 mm isotropic voxels.
    pub fn unit(dims: &[usize]) -> Result<Self> {
        Self::new(dims, &vec![1.0; dims.len()])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn voxel_size(&self) -> &[f64] {
        &self.voxel_size
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn n_sites(&self) -> usize {
        self.dims.iter().product()
    }

    /// Dimensions padded to three axes (`nz = 1` in 2D).
    pub fn dims3(&self) -> [usize; 3] {
        [
            self.dims[0],
            self.dims[1],
            self.dims.get(2).copied().unwrap_or(1),
        ]
    }

    /// Voxel size padded to three axes.
    pub fn voxel3(&self) -> [f64; 3] {
        [
            self.voxel_size[0],
            self.voxel_size[1],
            self.voxel_size.get(2).copied().unwrap_or(1.0),
        ]
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims3();
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        let [nx, ny, _] = self.dims3();
        c[0] + nx * (c[1] + ny * c[2])
    }

    /// Physical position of a site centre relative to the lattice origin.
    pub fn position_mm(&self, i: usize) -> [f64; 3] {
        let c = self.coords(i);
        let v = self.voxel3();
        [c[0] as f64 * v[0], c[1] as f64 * v[1], c[2] as f64 * v[2]]
    }

    /// Euclidean distance between two site centres in millimetres.
    pub fn distance_mm(&self, a: usize, b: usize) -> f64 {
        let (ca, cb) = (self.coords(a), self.coords(b));
        let v = self.voxel3();
        (0..3)
            .map(|d| {
                let delta = (ca[d] as f64 - cb[d] as f64) * v[d];
                delta * delta
            })
            .sum::<f64>()
            .sqrt()
    }

    fn check_site(&self, i: usize) -> Result<()> {
        let n = self.n_sites();
        if i >= n {
            return Err(Error::OutOfBounds { index: i, len: n });
        }
        Ok(())
    }

    /// First-order neighbours of site `i` in ascending index order.
    pub fn neighbours(&self, i: usize) -> Result<Vec<usize>> {
        self.check_site(i)?;
        let mut out = Vec::with_capacity(6);
        self.for_each_neighbour(i, |j| out.push(j));
        out.sort_unstable();
        Ok(out)
    }

    fn for_each_neighbour(&self, i: usize, mut f: impl FnMut(usize)) {
        let dims = self.dims3();
        let c = self.coords(i);
        let mut stride = 1;
        for axis in 0..3 {
            if c[axis] > 0 {
                f(i - stride);
            }
            if c[axis] + 1 < dims[axis] {
                f(i + stride);
            }
            stride *= dims[axis];
        }
    }

    /// Chequerboard colour of a site: parity of its coordinate sum.
    #[inline]
    pub fn parity(&self, i: usize) -> u8 {
        let c = self.coords(i);
        ((c[0] + c[1] + c[2]) % 2) as u8
    }
}

/// Every unordered first-order neighbour pair, each exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    n_sites: usize,
    edges: Vec<(u32, u32)>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Edges as `(a, b)` with `a < b`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().map(|&(a, b)| (a as usize, b as usize))
    }
}

/// Two-colour partition such that no edge joins two sites of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    block_of: Vec<u8>,
    blocks: [Vec<u32>; 2],
}

impl BlockPartition {
    pub fn block_of(&self, i: usize) -> u8 {
        self.block_of[i]
    }

    /// Sites of block `b` in ascending order.
    pub fn block(&self, b: usize) -> &[u32] {
        &self.blocks[b]
    }
}

/// Builds the edge set and chequerboard partition for a lattice.
pub fn build_lattice(spec: &LatticeSpec) -> Result<(EdgeSet, BlockPartition)> {
    // re-validate: a spec may have been assembled by hand in another crate
    let spec = LatticeSpec::new(spec.dims(), spec.voxel_size())?;
    let n = spec.n_sites();
    let dims = spec.dims3();
    let mut edges = Vec::new();
    let mut block_of = Vec::with_capacity(n);
    let mut blocks = [Vec::new(), Vec::new()];
    for i in 0..n {
        let c = spec.coords(i);
        let mut stride = 1;
        for axis in 0..3 {
            if c[axis] + 1 < dims[axis] {
                edges.push((i as u32, (i + stride) as u32));
            }
            stride *= dims[axis];
        }
        let b = spec.parity(i);
        block_of.push(b);
        blocks[b as usize].push(i as u32);
    }
    Ok((
        EdgeSet { n_sites: n, edges },
        BlockPartition { block_of, blocks },
    ))
}

/// Compressed neighbour lists for fast per-site access.
#[derive(Debug, Clone)]
pub struct Neighbourhood {
    offsets: Vec<u32>,
    sites: Vec<u32>,
}

impl Neighbourhood {
    fn new(spec: &LatticeSpec) -> Self {
        let n = spec.n_sites();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut sites = Vec::with_capacity(n * 2 * spec.ndim());
        offsets.push(0);
        for i in 0..n {
            spec.for_each_neighbour(i, |j| sites.push(j as u32));
            offsets.push(sites.len() as u32);
        }
        Self { offsets, sites }
    }

    #[inline]
    pub fn of(&self, i: usize) -> &[u32] {
        &self.sites[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
}

/// A lattice with its derived structures, built once and shared read-only.
#[derive(Debug, Clone)]
pub struct Lattice {
    spec: LatticeSpec,
    edges: EdgeSet,
    partition: BlockPartition,
    neighbourhood: Neighbourhood,
}

impl Lattice {
    pub fn new(spec: LatticeSpec) -> Result<Self> {
        let (edges, partition) = build_lattice(&spec)?;
        let neighbourhood = Neighbourhood::new(&spec);
        Ok(Self {
            spec,
            edges,
            partition,
            neighbourhood,
        })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn n_sites(&self) -> usize {
        self.spec.n_sites()
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    #[inline]
    pub fn neighbours(&self, i: usize) -> &[u32] {
        self.neighbourhood.of(i)
    }
}

//! Synthetic electron-density phantoms.
//!
//! A disc body (a cylinder in 3D) of water-equivalent material holds
//! circular tissue inserts on an inner and an outer ring. The inner ring can
//! be rotated about the centre and the whole object translated, which gives
//! a displaced image for a fixed reference segmentation. Intensities are
//! class means plus Gaussian noise plus an optional smooth shading field.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{ImageVolume, NoisePriors};
use crate::error::{Error, Result};
use crate::lattice::LatticeSpec;
use crate::potts::LabelField;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ring {
    Inner,
    Outer,
}

/// A circular insert; `centre_mm` is relative to the phantom centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insert {
    /// zero-based class index
    pub class: usize,
    pub centre_mm: [f64; 2],
    pub radius_mm: f64,
    pub ring: Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassIntensity {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Vec<usize>,
    pub voxel_size: Vec<f64>,
    pub body_radius_mm: f64,
    /// class of the body and of everything outside it
    pub body_class: usize,
    pub inserts: Vec<Insert>,
    pub classes: Vec<ClassIntensity>,
    /// inner-ring rotation about the centre, degrees in `[0, 360)`
    pub rotation_deg: f64,
    pub translation_mm: [f64; 2],
    pub bias_amplitude: f64,
    pub bias_length_mm: f64,
    pub seed: u64,
}

const WATER: usize = 4;

impl Default for PhantomSpec {
    fn default() -> Self {
        let polar = |class: usize, r: f64, deg: f64, ring: Ring| {
            let a = deg.to_radians();
            Insert {
                class,
                centre_mm: [r * a.cos(), r * a.sin()],
                radius_mm: 12.0,
                ring,
            }
        };
        let inserts = vec![
            polar(0, 25.0, 0.0, Ring::Inner),
            polar(2, 25.0, 90.0, Ring::Inner),
            polar(5, 25.0, 180.0, Ring::Inner),
            polar(7, 25.0, 270.0, Ring::Inner),
            polar(1, 45.0, 45.0, Ring::Outer),
            polar(3, 45.0, 135.0, Ring::Outer),
            polar(6, 45.0, 225.0, Ring::Outer),
            polar(8, 45.0, 315.0, Ring::Outer),
        ];
        let classes = NoisePriors::ed_phantom()
            .components
            .iter()
            .map(|c| ClassIntensity {
                mean: c.m,
                sd: c.s2.sqrt(),
            })
            .collect();
        Self {
            dims: vec![128, 128],
            voxel_size: vec![1.0, 1.0],
            body_radius_mm: 60.0,
            body_class: WATER,
            inserts,
            classes,
            rotation_deg: 0.0,
            translation_mm: [0.0, 0.0],
            bias_amplitude: 0.0,
            bias_length_mm: 128.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn lattice(&self) -> Result<LatticeSpec> {
        LatticeSpec::new(&self.dims, &self.voxel_size)
    }

    /// Insert centres after rotation and translation.
    pub fn placed_centres(&self) -> Vec<[f64; 2]> {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        self.inserts
            .iter()
            .map(|ins| {
                let [x, y] = ins.centre_mm;
                let [x, y] = match ins.ring {
                    Ring::Inner => [c * x - s * y, s * x + c * y],
                    Ring::Outer => [x, y],
                };
                [x + self.translation_mm[0], y + self.translation_mm[1]]
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.lattice()?;
        let k = self.k();
        if k == 0 || k > 255 {
            return Err(Error::InvalidSpec(format!(
                "need between 1 and 255 classes, got {k}"
            )));
        }
        if self.body_class >= k {
            return Err(Error::InvalidSpec(format!(
                "body class {} out of range",
                self.body_class
            )));
        }
        if !(self.body_radius_mm > 0.0 && self.body_radius_mm.is_finite()) {
            return Err(Error::InvalidSpec("body radius must be positive".into()));
        }
        if !(0.0..360.0).contains(&self.rotation_deg) {
            return Err(Error::InvalidSpec(format!(
                "rotation {} must lie in [0, 360)",
                self.rotation_deg
            )));
        }
        if self.translation_mm.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidSpec("translation must be finite".into()));
        }
        if !(self.bias_amplitude >= 0.0 && self.bias_amplitude.is_finite()) {
            return Err(Error::InvalidSpec(
                "bias amplitude must be non-negative".into(),
            ));
        }
        if !(self.bias_length_mm > 0.0 && self.bias_length_mm.is_finite()) {
            return Err(Error::InvalidSpec(
                "bias length-scale must be positive".into(),
            ));
        }
        for (j, c) in self.classes.iter().enumerate() {
            if !(c.mean.is_finite() && c.sd >= 0.0 && c.sd.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "invalid intensity statistics for class {j}"
                )));
            }
        }
        for (a, ins) in self.inserts.iter().enumerate() {
            if ins.class >= k {
                return Err(Error::InvalidSpec(format!(
                    "insert {a} has class {} out of range",
                    ins.class
                )));
            }
            if !(ins.radius_mm > 0.0 && ins.radius_mm.is_finite())
                || ins.centre_mm.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidSpec(format!(
                    "insert {a} needs a finite centre and positive radius"
                )));
            }
            if ins.centre_mm[0].hypot(ins.centre_mm[1]) + ins.radius_mm > self.body_radius_mm {
                return Err(Error::InvalidSpec(format!(
                    "insert {a} extends outside the body"
                )));
            }
        }
        let centres = self.placed_centres();
        for a in 0..centres.len() {
            for b in a + 1..centres.len() {
                let d = (centres[a][0] - centres[b][0]).hypot(centres[a][1] - centres[b][1]);
                if d < self.inserts[a].radius_mm + self.inserts[b].radius_mm {
                    return Err(Error::InvalidSpec(format!("inserts {a} and {b} overlap")));
                }
            }
        }
        Ok(())
    }
}

/// In-plane position (mm) of a site relative to the grid centre.
fn plane_position(spec: &LatticeSpec, i: usize) -> [f64; 2] {
    let c = spec.coords(i);
    let d = spec.dims3();
    let v = spec.voxel3();
    [
        (c[0] as f64 - (d[0] as f64 - 1.0) / 2.0) * v[0],
        (c[1] as f64 - (d[1] as f64 - 1.0) / 2.0) * v[1],
    ]
}

/// Ground-truth labels by voxel-centre inclusion.
pub fn generate_truth(spec: &PhantomSpec) -> Result<LabelField> {
    spec.validate()?;
    let lattice = spec.lattice()?;
    let centres = spec.placed_centres();
    let labels = (0..lattice.n_sites())
        .map(|i| {
            let p = plane_position(&lattice, i);
            spec.inserts
                .iter()
                .zip(&centres)
                .find(|(ins, c)| (p[0] - c[0]).hypot(p[1] - c[1]) <= ins.radius_mm)
                .map_or(spec.body_class, |(ins, _)| ins.class) as u8
        })
        .collect();
    LabelField::new(labels, spec.k())
}

/// Smooth shading: `A / M * sum_m cos(2 pi <d_m, p> / L + phase_m)` over
/// four fixed in-plane directions, with phases drawn from the spec seed.
pub fn bias_field(spec: &PhantomSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let lattice = spec.lattice()?;
    let n = lattice.n_sites();
    if spec.bias_amplitude == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut r = rng::stream(spec.seed, rng::tags::PHANTOM_BIAS);
    let modes: Vec<([f64; 2], f64)> = [0.0f64, 45.0, 90.0, 135.0]
        .iter()
        .map(|deg| {
            let (s, c) = deg.to_radians().sin_cos();
            ([c, s], 2.0 * PI * r.random::<f64>())
        })
        .collect();
    let scale = spec.bias_amplitude / modes.len() as f64;
    let freq = 2.0 * PI / spec.bias_length_mm;
    Ok((0..n)
        .map(|i| {
            let p = plane_position(&lattice, i);
            scale
                * modes
                    .iter()
                    .map(|(d, phase)| (freq * (d[0] * p[0] + d[1] * p[1]) + phase).cos())
                    .sum::<f64>()
        })
        .collect())
}

/// `y_i = mean[z_i] + sd[z_i] * noise + bias_i`.
pub fn render_image<R: Rng + ?Sized>(
    truth: &LabelField,
    spec: &PhantomSpec,
    noise: &mut R,
) -> Result<ImageVolume> {
    let lattice = spec.lattice()?;
    truth.check_len(lattice.n_sites())?;
    if truth.k() != spec.k() {
        return Err(Error::Shape(format!(
            "truth has {} classes, spec has {}",
            truth.k(),
            spec.k()
        )));
    }
    let bias = bias_field(spec)?;
    let values = truth
        .labels()
        .iter()
        .zip(bias)
        .map(|(&l, b)| {
            let c = spec.classes[l as usize];
            let e: f64 = noise.sample(StandardNormal);
            c.mean + c.sd * e + b
        })
        .collect();
    ImageVolume::new(lattice, values)
}

/// Truth and image, with noise drawn from the spec seed.
pub fn generate(spec: &PhantomSpec) -> Result<(LabelField, ImageVolume)> {
    let truth = generate_truth(spec)?;
    let mut noise = rng::stream(spec.seed, rng::tags::PHANTOM_NOISE);
    let image = render_image(&truth, spec, &mut noise)?;
    Ok((truth, image))
}

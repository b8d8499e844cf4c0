//! Seeded synthetic volumes and the random patch sampler.
//!
//! Each volume holds one object built from axis-aligned ellipsoids, rendered
//! as `base + contrast * mask + bias + noise` with a smooth sinusoidal bias
//! field and Gaussian noise, clamped to `[0, 1]`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{idx3, Tensor};

pub const MIN_SIZE: usize = 24;
/// Empty voxels kept between the object and every face.
pub const MARGIN: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ball,
    Ellipsoid,
    TwoLobe,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ball, ShapeKind::Ellipsoid, ShapeKind::TwoLobe];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn fits(&self, size: usize) -> bool {
        let hi = size as f64 - 1.0 - MARGIN;
        (0..3).all(|a| self.center[a] - self.radii[a] >= MARGIN && self.center[a] + self.radii[a] <= hi)
    }
}

/// Intensity model. Defaults are tuned so a labeled-only model trained on
/// the reference split stays well short of a perfect score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Appearance {
    pub base: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            base: 0.2,
            contrast: 0.3,
            noise_sigma: 0.2,
            bias_amplitude: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthVolume {
    pub seed: u64,
    pub kind: ShapeKind,
    pub lobes: Vec<Ellipsoid>,
    pub image: Tensor<f32>,
    pub mask: Tensor<bool>,
}

impl SynthVolume {
    pub fn dims(&self) -> [usize; 3] {
        self.mask.spatial_dims()
    }
}

fn sample_lobes(kind: ShapeKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let nf = n as f64;
    loop {
        let center = |rng: &mut ChaCha8Rng, r: [f64; 3]| {
            [0, 1, 2].map(|a| rng.gen_range(MARGIN + r[a]..=nf - 1.0 - MARGIN - r[a]))
        };
        let lobes = match kind {
            ShapeKind::Ball => {
                let r = rng.gen_range(0.15 * nf..=0.28 * nf);
                vec![Ellipsoid {
                    center: center(rng, [r; 3]),
                    radii: [r; 3],
                }]
            }
            ShapeKind::Ellipsoid => {
                let radii = [0; 3].map(|_| rng.gen_range(0.12 * nf..=0.3 * nf));
                vec![Ellipsoid {
                    center: center(rng, radii),
                    radii,
                }]
            }
            ShapeKind::TwoLobe => {
                let ra = [0; 3].map(|_| rng.gen_range(0.1 * nf..=0.2 * nf));
                let rb = [0; 3].map(|_| rng.gen_range(0.1 * nf..=0.2 * nf));
                let a = Ellipsoid {
                    center: center(rng, ra),
                    radii: ra,
                };
                // unit direction, lobes overlap by construction
                let mut dir = [0; 3].map(|_| rng.gen_range(-1.0..1.0f64));
                let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                dir.iter_mut().for_each(|v| *v /= len);
                let reach = 0.7 * (ra.iter().cloned().fold(f64::INFINITY, f64::min)
                    + rb.iter().cloned().fold(f64::INFINITY, f64::min));
                let b = Ellipsoid {
                    center: [0, 1, 2].map(|k| a.center[k] + reach * dir[k]),
                    radii: rb,
                };
                vec![a, b]
            }
        };
        if lobes.iter().all(|l| l.fits(n)) {
            return lobes;
        }
    }
}

/// One seeded volume of `size³` voxels.
pub fn gen_volume(seed: u64, kind: ShapeKind, size: usize, look: &Appearance) -> Result<SynthVolume> {
    if size < MIN_SIZE {
        return Err(Error::InvalidConfig(format!("volume size {size} below {MIN_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lobes = sample_lobes(kind, size, &mut rng);
    let dims = [size; 3];
    let mask = Tensor::from_fn(&dims, |i| {
        let p = [(i / (size * size)) as f64, ((i / size) % size) as f64, (i % size) as f64];
        lobes.iter().any(|l| l.contains(p))
    });

    let mut dir = [0; 3].map(|_| rng.gen_range(-1.0..1.0f64));
    let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    dir.iter_mut().for_each(|v| *v /= len);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, look.noise_sigma.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut image = vec![0.0f32; size * size * size];
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let i = idx3(dims, z, y, x);
                let t = (dir[0] * z as f64 + dir[1] * y as f64 + dir[2] * x as f64) / size as f64;
                let bias = look.bias_amplitude * (std::f64::consts::TAU * t + phase).sin();
                let fg = if mask.data()[i] { look.contrast } else { 0.0 };
                let v = look.base + fg + bias + noise.sample(&mut rng);
                image[i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(SynthVolume {
        seed,
        kind,
        lobes,
        image: Tensor::new(&dims, image)?,
        mask,
    })
}

/// Disjoint index sets into the dataset's volume list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub size: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub appearance: Appearance,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            size: 48,
            n_labeled: 5,
            n_unlabeled: 45,
            n_test: 20,
            appearance: Appearance::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(Error::InvalidConfig(format!("dataset size {} below {MIN_SIZE}", self.size)));
        }
        if self.n_labeled == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig("need at least one labeled and one test volume".into()));
        }
        let a = &self.appearance;
        if !(a.noise_sigma >= 0.0) || !a.contrast.is_finite() || !a.base.is_finite() || !a.bias_amplitude.is_finite() {
            return Err(Error::InvalidConfig("appearance parameters must be finite, noise >= 0".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_labeled + self.n_unlabeled + self.n_test
    }
}

/// Seed and kind of one volume; enough to regenerate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
    pub kind: ShapeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
    pub split: DatasetSplit,
}

impl Manifest {
    /// Seeds are drawn from one stream of the master seed; kinds cycle.
    pub fn new(config: &DatasetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let entries = (0..config.total())
            .map(|id| ManifestEntry {
                id,
                seed: rng.next_u64(),
                kind: ShapeKind::ALL[id % 3],
            })
            .collect();
        let (l, u) = (config.n_labeled, config.n_unlabeled);
        Self {
            config: config.clone(),
            entries,
            split: DatasetSplit {
                labeled: (0..l).collect(),
                unlabeled: (l..l + u).collect(),
                test: (l + u..config.total()).collect(),
            },
        }
    }

    pub fn generate(&self, id: usize) -> Result<SynthVolume> {
        let e = self
            .entries
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("no volume {id} in manifest")))?;
        gen_volume(e.seed, e.kind, self.config.size, &self.config.appearance)
    }
}

/// A manifest together with its generated volumes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub volumes: Vec<SynthVolume>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let manifest = Manifest::new(config);
        let volumes = (0..manifest.entries.len()).map(|i| manifest.generate(i)).collect::<Result<_>>()?;
        Ok(Self { manifest, volumes })
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.manifest.split
    }
}

/// Copies the `size` box at `corner` out of a 3-D tensor.
pub fn crop<T: Clone>(t: &Tensor<T>, corner: [usize; 3], size: [usize; 3]) -> Result<Tensor<T>> {
    let dims = t.spatial_dims();
    if t.shape().len() != 3 || (0..3).any(|a| corner[a] + size[a] > dims[a]) {
        return Err(Error::PatchTooLarge { patch: size, volume: dims });
    }
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = idx3(dims, corner[0] + z, corner[1] + y, corner[2]);
            out.extend_from_slice(&t.data()[start..start + size[2]]);
        }
    }
    Tensor::new(&size, out)
}

/// Uniform corner such that the patch lies inside the volume.
pub fn random_corner(volume: [usize; 3], patch: [usize; 3], rng: &mut impl Rng) -> Result<[usize; 3]> {
    if (0..3).any(|a| patch[a] > volume[a] || patch[a] == 0) {
        return Err(Error::PatchTooLarge { patch, volume });
    }
    Ok([0, 1, 2].map(|a| rng.gen_range(0..=volume[a] - patch[a])))
}

/// A cropped image/mask pair and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub corner: [usize; 3],
    pub image: Tensor<f32>,
    pub mask: Tensor<bool>,
}

pub fn sample_patch(vol: &SynthVolume, patch: [usize; 3], rng: &mut impl Rng) -> Result<Patch> {
    let corner = random_corner(vol.dims(), patch, rng)?;
    Ok(Patch {
        corner,
        image: crop(&vol.image, corner, patch)?,
        mask: crop(&vol.mask, corner, patch)?,
    })
}

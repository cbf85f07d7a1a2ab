//! Synthetic world generation: Gaussian-mean image classes, random
//! equal-size device groups sharing one sample per round, and white-patch
//! partial observability.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioCfg {
    pub n_devices: usize,
    pub n_groups: usize,
    pub n_classes: usize,
    /// Images are `image_side x image_side`, flattened row-major.
    pub image_side: usize,
    /// Probability that a device sees a patched observation.
    pub p_patch: f64,
    /// Patch area as a fraction of the image area.
    pub patch_scale: f64,
    /// Per-pixel Gaussian noise around the class mean.
    pub noise_sigma: f64,
    /// Band holding the evenly spaced per-class brightness levels; pixel
    /// means add a jitter of a quarter level-gap around their class level.
    pub mean_lo: f64,
    pub mean_hi: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
}

impl Default for ScenarioCfg {
    fn default() -> Self {
        ScenarioCfg {
            n_devices: 16,
            n_groups: 4,
            n_classes: 10,
            image_side: 32,
            p_patch: 0.8,
            patch_scale: 0.4,
            noise_sigma: 0.15,
            mean_lo: 0.05,
            mean_hi: 0.65,
            train_samples: 10240,
            val_samples: 1024,
            test_samples: 1024,
        }
    }
}

impl ScenarioCfg {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0
            || self.n_devices == 0
            || !self.n_devices.is_multiple_of(self.n_groups)
        {
            return Err(Error::Config(format!(
                "group count {} must divide device count {}",
                self.n_groups, self.n_devices
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.image_side == 0 {
            return Err(Error::Config("image side must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_patch) {
            return Err(Error::Config(format!(
                "p_patch {} outside [0, 1]",
                self.p_patch
            )));
        }
        if !(self.patch_scale > 0.0 && self.patch_scale < 1.0) {
            return Err(Error::Config(format!(
                "patch_scale {} outside (0, 1)",
                self.patch_scale
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma {} must be finite and nonnegative",
                self.noise_sigma
            )));
        }
        if !(0.0 <= self.mean_lo && self.mean_lo <= self.mean_hi && self.mean_hi <= 1.0) {
            return Err(Error::Config(format!(
                "class-mean range [{}, {}] must be ordered within [0, 1]",
                self.mean_lo, self.mean_hi
            )));
        }
        if self.train_samples == 0 || self.val_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config(
                "every split needs at least one sample".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.image_side * self.image_side
    }

    /// Patch side length giving area closest to `patch_scale` of the image.
    pub fn patch_side(&self) -> usize {
        let side = (self.patch_scale.sqrt() * self.image_side as f64).round() as usize;
        side.min(self.image_side)
    }

    pub fn group_size(&self) -> usize {
        self.n_devices / self.n_groups
    }
}

/// One labeled split: rows of `x` are flattened images.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    /// Row c is the mean image of class c.
    pub class_means: Array2<f64>,
}

/// Draws class means once, then noisy clipped samples, class-balanced by
/// round-robin label assignment.
///
/// Class c's mean image sits at the c-th of `n_classes` evenly spaced
/// brightness levels inside `[mean_lo, mean_hi]`, plus a fixed per-pixel
/// jitter pattern. Brightness carries most of the class identity, so an
/// occluding white patch drags an image toward the brightest classes and
/// purely local inference degrades, while clean images stay easily
/// separable.
pub fn gen_dataset<R: Rng>(cfg: &ScenarioCfg, rng: &mut R) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.input_dim();
    let step = (cfg.mean_hi - cfg.mean_lo) / cfg.n_classes as f64;
    let jitter = step / 4.0;
    let mut means = Array2::zeros((cfg.n_classes, d));
    for c in 0..cfg.n_classes {
        let level = cfg.mean_lo + step * (c as f64 + 0.5);
        for j in 0..d {
            means[(c, j)] = level + rng.gen_range(-jitter..=jitter);
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut gen_split = |n: usize| {
        let mut x = Array2::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % cfg.n_classes;
            for j in 0..d {
                x[(i, j)] = (means[(label, j)] + noise.sample(rng)).clamp(0.0, 1.0);
            }
            y.push(label);
        }
        Split { x, y }
    };
    let train = gen_split(cfg.train_samples);
    let val = gen_split(cfg.val_samples);
    let test = gen_split(cfg.test_samples);
    Ok(Dataset {
        train,
        val,
        test,
        class_means: means,
    })
}

/// Uniformly random partition of devices into equal groups; returns the
/// device -> group map.
pub fn assign_groups<R: Rng>(n_devices: usize, n_groups: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_groups == 0 || !n_devices.is_multiple_of(n_groups) {
        return Err(Error::Config(format!(
            "group count {n_groups} must divide device count {n_devices}"
        )));
    }
    let mut ids: Vec<usize> = (0..n_devices).collect();
    ids.shuffle(rng);
    let size = n_devices / n_groups;
    let mut groups = vec![0usize; n_devices];
    for (pos, &dev) in ids.iter().enumerate() {
        groups[dev] = pos / size;
    }
    Ok(groups)
}

/// Paints a white (1.0) square of side `patch_side` at a uniformly random
/// position of a flattened `side x side` image.
pub fn corrupt<R: Rng>(img: &mut [f64], side: usize, patch_side: usize, rng: &mut R) {
    debug_assert_eq!(img.len(), side * side);
    if patch_side == 0 {
        return;
    }
    let ps = patch_side.min(side);
    let top = rng.gen_range(0..=side - ps);
    let left = rng.gen_range(0..=side - ps);
    for r in top..top + ps {
        let row = r * side;
        img[row + left..row + left + ps].fill(1.0);
    }
}

/// One inference round: a sample per group, per-device observations.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Device -> group.
    pub groups: Vec<usize>,
    /// Group -> index of the clean sample in the source split.
    pub group_samples: Vec<usize>,
    /// Device -> label of its group's sample.
    pub labels: Vec<usize>,
    /// Row i is device i's observation.
    pub obs: Array2<f64>,
    /// Device -> whether a patch was applied.
    pub corrupted: Vec<bool>,
}

impl RoundState {
    pub fn n_devices(&self) -> usize {
        self.groups.len()
    }
}

/// Samples groups, one clean sample per group, and per-device observations
/// patched independently with probability `p_patch`.
pub fn build_round<R: Rng>(cfg: &ScenarioCfg, split: &Split, rng: &mut R) -> Result<RoundState> {
    cfg.validate()?;
    if split.is_empty() {
        return Err(Error::Config(
            "cannot build a round from an empty split".into(),
        ));
    }
    let n = cfg.n_devices;
    let groups = assign_groups(n, cfg.n_groups, rng)?;
    let group_samples: Vec<usize> = (0..cfg.n_groups)
        .map(|_| rng.gen_range(0..split.len()))
        .collect();
    let d = split.x.ncols();
    let mut obs = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut corrupted = Vec::with_capacity(n);
    let ps = cfg.patch_side();
    for dev in 0..n {
        let sample = group_samples[groups[dev]];
        labels.push(split.y[sample]);
        obs.row_mut(dev).assign(&split.x.row(sample));
        let u: f64 = rng.gen();
        let hit = u < cfg.p_patch;
        if hit {
            corrupt(
                obs.row_mut(dev).as_slice_mut().expect("standard layout"),
                cfg.image_side,
                ps,
                rng,
            );
        }
        corrupted.push(hit);
    }
    Ok(RoundState {
        groups,
        group_samples,
        labels,
        obs,
        corrupted,
    })
}

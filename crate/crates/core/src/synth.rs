//! Synthetic ultra-fine-grained dataset: every image carries the same strong
//! template, and a class differs from the others only by weak identical bumps
//! at a few class-specific grid cells.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::{SplitMode, SplitSpec};
use crate::error::{RaplError, Result};
use crate::numerics::Tensor;
use crate::seeding::{stream, Purpose};

const MAGIC: &[u8; 8] = b"RAPLDS01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_old: usize,
    pub num_new: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub mode: SplitMode,
    /// `[channels, height, width]`.
    pub input_dims: [usize; 3],
    /// Region grid `[rows, cols]`; must divide the image evenly.
    pub grid: [usize; 2],
    pub template_strength: f64,
    /// Gaussian blur width of the template in pixels; 0 keeps it white.
    pub template_smoothing: f64,
    pub class_signal_strength: f64,
    pub signal_regions_per_class: usize,
    /// Per-pixel Gaussian noise of every sample.
    pub intra_class_noise: f64,
    /// Per-sample, per-bump relative amplitude spread (uniform ±).
    pub amplitude_jitter: f64,
    /// Bumps per sample at uniformly random open regions, same amplitude
    /// law as the class bumps but carrying no class information.
    pub distractor_bumps: usize,
    /// Grid columns at the left and right edge that are zeroed.
    pub blank_margin: usize,
    /// Random horizontal flips when making training views.
    pub flip_views: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_old: 10,
            num_new: 10,
            train_per_class: 12,
            test_per_class: 4,
            mode: SplitMode::Ncd,
            input_dims: [1, 16, 16],
            grid: [4, 4],
            template_strength: 1.0,
            template_smoothing: 3.0,
            class_signal_strength: 0.6,
            signal_regions_per_class: 3,
            intra_class_noise: 0.3,
            amplitude_jitter: 0.25,
            distractor_bumps: 0,
            blank_margin: 0,
            flip_views: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.num_old + self.num_new
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            num_old: self.num_old,
            num_new: self.num_new,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            mode: self.mode,
        }
    }

    fn cell(&self) -> (usize, usize) {
        (self.input_dims[1] / self.grid[0], self.input_dims[2] / self.grid[1])
    }

    /// Row-major region mask of the zeroed margin columns.
    pub fn blank_regions(&self) -> Vec<bool> {
        let [rows, cols] = self.grid;
        (0..rows * cols)
            .map(|r| {
                let c = r % cols;
                c < self.blank_margin || c >= cols - self.blank_margin
            })
            .collect()
    }

    /// Regions outside the blank margin.
    pub fn open_regions(&self) -> Vec<usize> {
        self.blank_regions()
            .iter()
            .enumerate()
            .filter(|(_, b)| !**b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.split().validate()?;
        let [c, h, w] = self.input_dims;
        let [gr, gc] = self.grid;
        if c == 0 || gr == 0 || gc == 0 || h % gr != 0 || w % gc != 0 {
            return Err(RaplError::Config(format!(
                "grid {gr}×{gc} does not tile a {h}×{w} image"
            )));
        }
        if !(self.template_strength > 0.0) || self.class_signal_strength < 0.0 {
            return Err(RaplError::Config("signal strengths must be non-negative, template positive".into()));
        }
        if self.class_signal_strength >= self.template_strength {
            return Err(RaplError::Config(
                "class signal must stay weaker than the shared template".into(),
            ));
        }
        if self.intra_class_noise < 0.0 || !(0.0..1.0).contains(&self.amplitude_jitter) {
            return Err(RaplError::Config("noise must be ≥ 0 and amplitude jitter in [0, 1)".into()));
        }
        if 2 * self.blank_margin >= gc {
            return Err(RaplError::Config("blank margins cover the whole grid".into()));
        }
        let open = self.blank_regions().iter().filter(|b| !**b).count();
        if self.signal_regions_per_class == 0 || self.signal_regions_per_class > open {
            return Err(RaplError::Config(format!(
                "{} signal regions requested from {open} open cells",
                self.signal_regions_per_class
            )));
        }
        if self.distractor_bumps > open {
            return Err(RaplError::Config(format!(
                "{} distractor bumps requested from {open} open cells",
                self.distractor_bumps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    LabeledTrain,
    UnlabeledTrain,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[C, h, w]`.
    pub input: Tensor,
    pub class_id: usize,
    pub split_tag: SplitTag,
    /// Keys the sample's view jitter.
    pub view_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub split: SplitSpec,
    pub template: Tensor,
    /// Row-major signal cells of every class.
    pub class_regions: Vec<Vec<usize>>,
    pub samples: Vec<LabeledSample>,
}

fn mirror_region(r: usize, cols: usize) -> usize {
    let (row, col) = (r / cols, r % cols);
    row * cols + (cols - 1 - col)
}

/// Canonical form of a region set under horizontal mirroring, so that a
/// flipped view of a class never looks like another class.
fn orbit_key(regions: &[usize], cols: usize) -> Vec<usize> {
    let mut a = regions.to_vec();
    let mut b: Vec<usize> = regions.iter().map(|&r| mirror_region(r, cols)).collect();
    a.sort_unstable();
    b.sort_unstable();
    a.min(b)
}

fn flip_horizontal(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = x.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let col = i % w;
        src[i - col + (w - 1 - col)]
    })
}

impl Dataset {
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split_tag == tag)
            .collect()
    }

    /// Stacks the inputs of `indices` into `[n, C, h, w]`.
    pub fn inputs(&self, indices: &[usize]) -> Result<Tensor> {
        let dims = self.config.input_dims;
        let mut data = Vec::with_capacity(indices.len() * dims.iter().product::<usize>());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| RaplError::InvalidArgument(format!("sample {i} out of range")))?;
            data.extend_from_slice(s.input.data());
        }
        Tensor::new(vec![indices.len(), dims[0], dims[1], dims[2]], data)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].class_id).collect()
    }

    fn zero_blanks(&self, x: &mut Tensor) {
        zero_blanks(&self.config, x);
    }

    /// Two jittered copies of a sample, reproducible from `(sample, step_seed)`.
    pub fn augment_views(&self, sample: &LabeledSample, step_seed: u64) -> Result<(Tensor, Tensor)> {
        let mut rng = stream(sample.view_seed, Purpose::Augment, step_seed, 0);
        let sigma = self.config.intra_class_noise / 2.0;
        let mut view = || -> Result<Tensor> {
            let mut x = sample.input.clone();
            if self.config.flip_views && rng.gen_bool(0.5) {
                x = flip_horizontal(&x);
            }
            if sigma > 0.0 {
                let noise = Normal::new(0.0, sigma).map_err(|e| RaplError::Config(e.to_string()))?;
                x.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            self.zero_blanks(&mut x);
            Ok(x)
        };
        let a = view()?;
        let b = view()?;
        Ok((a, b))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            config: self.config.clone(),
            split: self.split.clone(),
            class_regions: self.class_regions.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    class_id: s.class_id,
                    split_tag: s.split_tag,
                    view_seed: s.view_seed,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self
            .template
            .data()
            .iter()
            .chain(self.samples.iter().flat_map(|s| s.input.data()))
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| RaplError::io(path, e))?;
        f.write_all(&out).map_err(|e| RaplError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| RaplError::io(path, e))?;
        let bad = |detail: &str| RaplError::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a dataset file"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        manifest.config.validate()?;
        let dims = manifest.config.input_dims;
        let per = dims.iter().product::<usize>();
        let values: Vec<f64> = bytes[12 + len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if bytes[12 + len..].len() % 8 != 0 || values.len() != per * (manifest.samples.len() + 1) {
            return Err(bad("payload size does not match the manifest"));
        }
        let shape = dims.to_vec();
        let template = Tensor::new(shape.clone(), values[..per].to_vec())?;
        let samples = manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(LabeledSample {
                    input: Tensor::new(shape.clone(), values[per * (i + 1)..per * (i + 2)].to_vec())?,
                    class_id: r.class_id,
                    split_tag: r.split_tag,
                    view_seed: r.view_seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: manifest.config,
            split: manifest.split,
            template,
            class_regions: manifest.class_regions,
            samples,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    class_id: usize,
    split_tag: SplitTag,
    view_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: SynthConfig,
    split: SplitSpec,
    class_regions: Vec<Vec<usize>>,
    samples: Vec<SampleRecord>,
}

fn zero_blanks(config: &SynthConfig, x: &mut Tensor) {
    if config.blank_margin == 0 {
        return;
    }
    let [c, h, w] = config.input_dims;
    let (_, cw) = config.cell();
    let margin = config.blank_margin * cw;
    let data = x.data_mut();
    for ch in 0..c {
        for row in 0..h {
            for col in (0..margin).chain(w - margin..w) {
                data[(ch * h + row) * w + col] = 0.0;
            }
        }
    }
}

/// Unit-RMS, left-right symmetric random pattern.
fn make_template(config: &SynthConfig, rng: &mut impl Rng) -> Tensor {
    let [c, h, w] = config.input_dims;
    let mut t = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w.div_ceil(2) {
                let v: f64 = StandardNormal.sample(rng);
                t.data_mut()[(ch * h + row) * w + col] = v;
                t.data_mut()[(ch * h + row) * w + (w - 1 - col)] = v;
            }
        }
    }
    if config.template_smoothing > 0.0 {
        // summation order differs between mirrored pixels, so re-pair them exactly
        let b = blur(&t, config.template_smoothing);
        let f = flip_horizontal(&b);
        t = Tensor::from_fn(b.shape(), |i| 0.5 * (b.data()[i] + f.data()[i]));
    }
    let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
    let scale = config.template_strength / rms.max(1e-12);
    t.data_mut().iter_mut().for_each(|v| *v *= scale);
    t
}

/// Separable Gaussian blur with clamped edges.
fn blur(t: &Tensor, sigma: f64) -> Tensor {
    let [c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], along_cols: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, wk) in (-radius..=radius).zip(&kernel) {
                        let (yy, xx) = if along_cols {
                            (y as isize, (x as isize + k).clamp(0, w as isize - 1))
                        } else {
                            ((y as isize + k).clamp(0, h as isize - 1), x as isize)
                        };
                        acc += wk * src[(ch * h + yy as usize) * w + xx as usize];
                    }
                    out[(ch * h + y) * w + x] = acc / norm;
                }
            }
        }
        out
    };
    let data = pass(&pass(t.data(), true), false);
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Unit-peak Gaussian blob centred in a grid cell.
fn bump(config: &SynthConfig, region: usize) -> Tensor {
    let [c, h, w] = config.input_dims;
    let (ch, cw) = config.cell();
    let (r, q) = (region / config.grid[1], region % config.grid[1]);
    let cy = (r * ch) as f64 + (ch as f64 - 1.0) / 2.0;
    let cx = (q * cw) as f64 + (cw as f64 - 1.0) / 2.0;
    let sigma = (ch.min(cw) as f64 / 4.0).max(0.5);
    Tensor::from_fn(&[c, h, w], |i| {
        let (y, x) = (((i / w) % h) as f64, (i % w) as f64);
        (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
    })
}

fn pick_class_regions(config: &SynthConfig, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let open = config.open_regions();
    let cols = config.grid[1];
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(config.num_classes());
    let mut attempts = 0;
    while out.len() < config.num_classes() {
        attempts += 1;
        if attempts > 10_000 {
            return Err(RaplError::Config(
                "not enough distinct region sets for the requested classes".into(),
            ));
        }
        let mut set: Vec<usize> = open
            .choose_multiple(rng, config.signal_regions_per_class)
            .copied()
            .collect();
        set.sort_unstable();
        if seen.insert(orbit_key(&set, cols)) {
            out.push(set);
        }
    }
    Ok(out)
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let split = config.split();
    let mut rng = stream(config.seed, Purpose::Data, 0, 0);
    let template = make_template(config, &mut rng);
    let class_regions = pick_class_regions(config, &mut rng)?;
    let open = config.open_regions();
    let bumps: Vec<Tensor> = (0..config.grid[0] * config.grid[1]).map(|r| bump(config, r)).collect();
    let noise = Normal::new(0.0, config.intra_class_noise.max(0.0))
        .map_err(|e| RaplError::Config(e.to_string()))?;

    let mut samples = Vec::with_capacity(config.num_classes() * (config.train_per_class + config.test_per_class));
    for (class, regions) in class_regions.iter().enumerate() {
        for idx in 0..config.train_per_class + config.test_per_class {
            let tag = if idx >= config.train_per_class {
                SplitTag::Test
            } else if split.is_old(class) && idx < split.labeled_per_old_class() {
                SplitTag::LabeledTrain
            } else {
                SplitTag::UnlabeledTrain
            };
            let mut x = template.clone();
            for &r in regions {
                let amp = config.class_signal_strength
                    * (1.0 + config.amplitude_jitter * rng.gen_range(-1.0..=1.0));
                x.data_mut()
                    .iter_mut()
                    .zip(bumps[r].data())
                    .for_each(|(v, b)| *v += amp * b);
            }
            if config.distractor_bumps > 0 {
                for &r in open.choose_multiple(&mut rng, config.distractor_bumps) {
                    let amp = config.class_signal_strength
                        * (1.0 + config.amplitude_jitter * rng.gen_range(-1.0..=1.0));
                    x.data_mut()
                        .iter_mut()
                        .zip(bumps[r].data())
                        .for_each(|(v, b)| *v += amp * b);
                }
            }
            if config.intra_class_noise > 0.0 {
                x.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            zero_blanks(config, &mut x);
            samples.push(LabeledSample {
                input: x,
                class_id: class,
                split_tag: tag,
                view_seed: rng.gen(),
            });
        }
    }
    let mut template = template;
    zero_blanks(config, &mut template);
    Ok(Dataset {
        config: config.clone(),
        split,
        template,
        class_regions,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist2(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum()
    }

    #[test]
    fn split_sizes_follow_the_config() {
        for mode in [SplitMode::Ncd, SplitMode::Gcd] {
            let cfg = SynthConfig {
                mode,
                ..Default::default()
            };
            let ds = generate(&cfg).unwrap();
            let s = cfg.split();
            assert_eq!(ds.indices(SplitTag::LabeledTrain).len(), s.labeled_train_size());
            assert_eq!(ds.indices(SplitTag::UnlabeledTrain).len(), s.unlabeled_train_size());
            assert_eq!(ds.indices(SplitTag::Test).len(), s.test_size());
            for i in ds.indices(SplitTag::LabeledTrain) {
                assert!(s.is_old(ds.samples[i].class_id));
            }
            if mode == SplitMode::Ncd {
                for i in ds.indices(SplitTag::UnlabeledTrain) {
                    assert!(!s.is_old(ds.samples[i].class_id));
                }
            }
        }
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let cfg = SynthConfig {
            intra_class_noise: 0.0,
            amplitude_jitter: 0.0,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        for c in 0..cfg.num_classes() {
            let members: Vec<&LabeledSample> = ds.samples.iter().filter(|s| s.class_id == c).collect();
            assert!(members.iter().all(|s| s.input == members[0].input));
        }
    }

    #[test]
    fn zero_signal_makes_classes_identical_in_distribution() {
        let cfg = SynthConfig {
            class_signal_strength: 0.0,
            intra_class_noise: 0.0,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        assert!(ds.samples.iter().all(|s| s.input == ds.template));
    }

    #[test]
    fn class_differences_are_smaller_than_the_template() {
        let cfg = SynthConfig::default();
        let ds = generate(&cfg).unwrap();
        let means: Vec<Tensor> = (0..cfg.num_classes())
            .map(|c| {
                let idx: Vec<usize> = (0..ds.samples.len()).filter(|&i| ds.samples[i].class_id == c).collect();
                let n = idx.len() as f64;
                Tensor::from_fn(ds.template.shape(), |j| {
                    idx.iter().map(|&i| ds.samples[i].input.data()[j]).sum::<f64>() / n
                })
            })
            .collect();
        let template_to_blank = dist2(&ds.template, &Tensor::zeros(ds.template.shape())).sqrt();
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                assert!(dist2(&means[a], &means[b]).sqrt() < template_to_blank);
            }
        }
    }

    #[test]
    fn region_sets_are_distinct_under_mirroring() {
        let cfg = SynthConfig::default();
        let ds = generate(&cfg).unwrap();
        let keys: HashSet<Vec<usize>> = ds.class_regions.iter().map(|r| orbit_key(r, 4)).collect();
        assert_eq!(keys.len(), cfg.num_classes());
        assert!(ds.class_regions.iter().all(|r| r.len() == 3));
    }

    #[test]
    fn template_is_mirror_symmetric() {
        let ds = generate(&SynthConfig::default()).unwrap();
        assert_eq!(flip_horizontal(&ds.template), ds.template);
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = SynthConfig {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 12, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().template, generate(&other).unwrap().template);
    }

    #[test]
    fn blank_margins_are_zero() {
        let cfg = SynthConfig {
            blank_margin: 1,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(cfg.blank_regions().iter().filter(|b| **b).count(), 8);
        for s in &ds.samples {
            for row in 0..16 {
                for col in (0..4).chain(12..16) {
                    assert_eq!(s.input.data()[row * 16 + col], 0.0);
                }
            }
        }
        let (a, b) = ds.augment_views(&ds.samples[0], 3).unwrap();
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[15], 0.0);
    }

    #[test]
    fn views_without_jitter_equal_the_sample() {
        let cfg = SynthConfig {
            intra_class_noise: 0.0,
            flip_views: false,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let (a, b) = ds.augment_views(&ds.samples[5], 1).unwrap();
        assert_eq!(a, ds.samples[5].input);
        assert_eq!(b, ds.samples[5].input);
    }

    #[test]
    fn views_are_deterministic_per_step() {
        let ds = generate(&SynthConfig::default()).unwrap();
        let s = &ds.samples[3];
        assert_eq!(ds.augment_views(s, 9).unwrap(), ds.augment_views(s, 9).unwrap());
        assert_ne!(ds.augment_views(s, 9).unwrap(), ds.augment_views(s, 10).unwrap());
    }

    #[test]
    fn views_of_one_sample_are_closer_than_classmates() {
        let ds = generate(&SynthConfig::default()).unwrap();
        let (mut same, mut other) = (0.0, 0.0);
        for step in 0..100u64 {
            let a = &ds.samples[0];
            let b = &ds.samples[1 + (step as usize % 10)];
            assert_eq!(a.class_id, b.class_id);
            let (a1, a2) = ds.augment_views(a, step).unwrap();
            let (b1, _) = ds.augment_views(b, step).unwrap();
            same += dist2(&a1, &a2);
            other += dist2(&a1, &b1);
        }
        assert!(same < other, "{same} vs {other}");
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SynthConfig { class_signal_strength: 1.5, ..Default::default() },
            SynthConfig { grid: [3, 4], ..Default::default() },
            SynthConfig { blank_margin: 2, ..Default::default() },
            SynthConfig { signal_regions_per_class: 17, ..Default::default() },
            SynthConfig { num_new: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(generate(&cfg).is_err(), "{cfg:?}");
        }
        // single cells of a 4×4 grid form only 8 mirror orbits
        let cfg = SynthConfig { signal_regions_per_class: 1, ..Default::default() };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn file_round_trip() {
        let ds = generate(&SynthConfig { mode: SplitMode::Gcd, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(Dataset::load(&path).is_err());
    }
}

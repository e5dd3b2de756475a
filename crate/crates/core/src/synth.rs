//! Synthetic pedestrian images with controllable domain shift.
//!
//! A person is a stack of vertical bands (hair and face, torso, legs,
//! shoes) over a textured background. Identities fix the colors and
//! clothing patterns; domains fix the background and a global pixel
//! transform `clamp(contrast·(p − 0.5) + 0.5 + brightness + hue[c] + noise)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Float};
use crate::rng;
use crate::tensor::Tensor;

pub type Rgb = [Float; 3];

/// Imaging conditions shared by every image of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub brightness: Float,
    /// Gain around mid-grey; must be positive.
    pub contrast: Float,
    pub hue_shift: Rgb,
    pub noise_sigma: Float,
    /// Cycles of background texture across the image width.
    pub texture_freq: Float,
    pub palette_seed: u64,
}

impl DomainSpec {
    /// No transform, no noise, plain background texture.
    pub fn neutral(name: &str) -> Self {
        DomainSpec {
            name: name.into(),
            brightness: 0.0,
            contrast: 1.0,
            hue_shift: [0.0; 3],
            noise_sigma: 0.0,
            texture_freq: 1.0,
            palette_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.contrast > 0.0) || !(self.noise_sigma >= 0.0) || !(self.texture_freq >= 0.0) {
            return Err(Error::Config(format!(
                "domain {}: contrast must be > 0 and noise/texture >= 0",
                self.name
            )));
        }
        Ok(())
    }

    fn palette(&self) -> (Rgb, Rgb) {
        let mut r = rng::stream(self.palette_seed, "palette");
        let mut color = || -> Rgb { [r.random_range(0.1..0.9), r.random_range(0.1..0.9), r.random_range(0.1..0.9)] };
        (color(), color())
    }

    fn transform(&self, channel: usize, p: Float) -> Float {
        self.contrast * (p - 0.5) + 0.5 + self.brightness + self.hue_shift[channel]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Split,
}

/// Colors and pattern of one garment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Garment {
    pub base: Rgb,
    pub accent: Rgb,
    pub pattern: Pattern,
    /// Stripe cycles across the garment.
    pub frequency: Float,
}

impl Garment {
    fn sample<R: Rng + ?Sized>(r: &mut R) -> Self {
        let pattern = [Pattern::Solid, Pattern::HorizontalStripes, Pattern::VerticalStripes, Pattern::Split]
            [r.random_range(0..4)];
        Garment {
            base: random_color(r),
            accent: random_color(r),
            pattern,
            frequency: r.random_range(1.5..3.5),
        }
    }

    /// Color at garment-relative coordinates in `[0, 1)²`.
    fn color(&self, u: Float, v: Float) -> Rgb {
        let accent = match self.pattern {
            Pattern::Solid => false,
            Pattern::HorizontalStripes => math::sin(2.0 * PI as Float * self.frequency * v) > 0.0,
            Pattern::VerticalStripes => math::sin(2.0 * PI as Float * self.frequency * u) > 0.0,
            Pattern::Split => u >= 0.5,
        };
        if accent {
            self.accent
        } else {
            self.base
        }
    }
}

fn random_color<R: Rng + ?Sized>(r: &mut R) -> Rgb {
    [r.random_range(0.05..0.95), r.random_range(0.05..0.95), r.random_range(0.05..0.95)]
}

/// Appearance of one person, fixed across domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub hair: Rgb,
    pub skin: Rgb,
    pub torso: Garment,
    pub legs: Garment,
    pub shoes: Rgb,
    /// Half-width of the torso as a fraction of the image width.
    pub build: Float,
}

impl SyntheticIdentity {
    pub fn sample<R: Rng + ?Sized>(id: usize, r: &mut R) -> Self {
        let skin_tone: Float = r.random_range(0.3..0.9);
        SyntheticIdentity {
            id,
            hair: random_color(r),
            skin: [skin_tone, skin_tone * 0.8, skin_tone * 0.65],
            torso: Garment::sample(r),
            legs: Garment::sample(r),
            shoes: random_color(r),
            build: r.random_range(0.2..0.3),
        }
    }

    /// Person color at scene coordinates, or `None` for background.
    fn color(&self, x: Float, y: Float) -> Option<Rgb> {
        let dx = (x - 0.5).abs();
        match y {
            y if (0.04..0.19).contains(&y) && dx < 0.13 => Some(if y < 0.09 { self.hair } else { self.skin }),
            y if (0.19..0.56).contains(&y) && dx < self.build => {
                let u = (x - 0.5 + self.build) / (2.0 * self.build);
                Some(self.torso.color(u, (y - 0.19) / 0.37))
            }
            y if (0.56..0.91).contains(&y) && dx < self.build * 0.8 && dx > 0.03 => {
                let half = self.build * 0.8;
                let u = (x - 0.5 + half) / (2.0 * half);
                Some(self.legs.color(u, (y - 0.56) / 0.35))
            }
            y if (0.91..0.97).contains(&y) && dx < self.build * 0.85 && dx > 0.03 => Some(self.shoes),
            _ => None,
        }
    }
}

/// Render `[3, height, width]` pixels in `[0, 1]`. Each seed gives its own
/// small placement jitter, lighting change and noise.
pub fn render_image(identity: &SyntheticIdentity, domain: &DomainSpec, seed: u64, height: usize, width: usize) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shift_x: Float = r.random_range(-0.06..0.06);
    let shift_y: Float = r.random_range(-0.02..0.02);
    let light: Float = r.random_range(-0.05..0.05);
    let phase: (Float, Float) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
    let (bg_a, bg_b) = domain.palette();
    let noise = Normal::new(0.0, domain.noise_sigma.max(0.0)).ok();
    let two_pi = 2.0 * PI as Float;

    let mut data = vec![0.0; 3 * height * width];
    for row in 0..height {
        for col in 0..width {
            let x = (math::from_usize(col) + 0.5) / math::from_usize(width);
            let y = (math::from_usize(row) + 0.5) / math::from_usize(height);
            let base = identity.color(x - shift_x, y - shift_y).unwrap_or_else(|| {
                let t = 0.5
                    + 0.5
                        * math::sin(two_pi * domain.texture_freq * (x + phase.0))
                        * math::sin(two_pi * domain.texture_freq * 2.0 * (y + phase.1));
                [0, 1, 2].map(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t)
            });
            for (c, &v) in base.iter().enumerate() {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut r));
                data[(c * height + row) * width + col] = (domain.transform(c, v + light) + n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, height, width], data)
}

/// Images with identity labels and domain tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub num_ids: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Sub-dataset at `indices`, keeping the label space.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domains: indices.iter().map(|&i| self.domains[i]).collect(),
            num_ids: self.num_ids,
        }
    }
}

/// Sizes, domains and seed of a synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    /// Identities per source domain; label ranges of the domains do not overlap.
    pub train_ids: usize,
    pub images_per_id: usize,
    pub test_ids: usize,
    /// Views rendered per test identity; each split takes one probe and one
    /// gallery view.
    pub test_views: usize,
    pub height: usize,
    pub width: usize,
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            train_ids: 32,
            images_per_id: 8,
            test_ids: 316,
            test_views: 2,
            height: 23,
            width: 11,
            sources: vec![
                DomainSpec {
                    name: "source_a".into(),
                    brightness: 0.0,
                    contrast: 1.0,
                    hue_shift: [0.0, 0.0, 0.0],
                    noise_sigma: 0.02,
                    texture_freq: 1.0,
                    palette_seed: 11,
                },
                DomainSpec {
                    name: "source_b".into(),
                    brightness: 0.05,
                    contrast: 0.9,
                    hue_shift: [0.03, 0.0, -0.03],
                    noise_sigma: 0.02,
                    texture_freq: 1.5,
                    palette_seed: 12,
                },
            ],
            target: DomainSpec {
                name: "target".into(),
                brightness: -0.2,
                contrast: 0.5,
                hue_shift: [-0.08, 0.03, 0.1],
                noise_sigma: 0.05,
                texture_freq: 3.0,
                palette_seed: 99,
            },
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_ids < 2 || self.test_ids < 2 {
            return Err(Error::Config(format!(
                "need at least 2 identities per split (train {}, test {})",
                self.train_ids, self.test_ids
            )));
        }
        if self.images_per_id == 0 || self.test_views < 2 || self.sources.is_empty() {
            return Err(Error::Config(
                "need images_per_id >= 1, test_views >= 2 and at least one source domain".into(),
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        self.sources.iter().chain([&self.target]).try_for_each(DomainSpec::validate)
    }
}

/// Target-domain test images, `test_views` per identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TestPool {
    pub images: Vec<Tensor>,
    /// Test-local identity of each image.
    pub labels: Vec<usize>,
    pub views: usize,
    pub num_ids: usize,
}

/// One probe and one gallery image per identity, as pool indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestSplit {
    pub probe: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl TestPool {
    /// Split 0 uses view 0 as probe and view 1 as gallery; other splits
    /// draw the two views per identity at random.
    pub fn split(&self, index: usize, seed: u64) -> TestSplit {
        let mut r = rng::substream(seed, "split", index as u64);
        let mut probe = Vec::with_capacity(self.num_ids);
        let mut gallery = Vec::with_capacity(self.num_ids);
        for id in 0..self.num_ids {
            let mut views: Vec<usize> = (0..self.views).collect();
            if index > 0 {
                views.shuffle(&mut r);
            }
            probe.push(id * self.views + views[0]);
            gallery.push(id * self.views + views[1]);
        }
        TestSplit { probe, gallery }
    }

    pub fn images_at(&self, indices: &[usize]) -> Vec<Tensor> {
        indices.iter().map(|&i| self.images[i].clone()).collect()
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Source-domain training data plus a target-domain test pool with
/// identities disjoint from training.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub test: TestPool,
    pub train_identities: Vec<SyntheticIdentity>,
    pub test_identities: Vec<SyntheticIdentity>,
}

/// Stable per-image seed.
fn image_seed(seed: u64, tag: &str, index: usize) -> u64 {
    rng::substream(seed, tag, index as u64).random()
}

pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut id_rng = rng::stream(spec.seed, "identities");
    let total_train = spec.train_ids * spec.sources.len();
    let train_identities: Vec<SyntheticIdentity> =
        (0..total_train).map(|i| SyntheticIdentity::sample(i, &mut id_rng)).collect();
    let test_identities: Vec<SyntheticIdentity> = (0..spec.test_ids)
        .map(|i| SyntheticIdentity::sample(total_train + i, &mut id_rng))
        .collect();

    let mut train = Dataset {
        num_ids: total_train,
        ..Dataset::default()
    };
    for (d, domain) in spec.sources.iter().enumerate() {
        for k in 0..spec.train_ids {
            let label = d * spec.train_ids + k;
            for v in 0..spec.images_per_id {
                let s = image_seed(spec.seed, "train", label * spec.images_per_id + v);
                train
                    .images
                    .push(render_image(&train_identities[label], domain, s, spec.height, spec.width));
                train.labels.push(label);
                train.domains.push(d);
            }
        }
    }
    let mut test = TestPool {
        images: Vec::new(),
        labels: Vec::new(),
        views: spec.test_views,
        num_ids: spec.test_ids,
    };
    for (k, identity) in test_identities.iter().enumerate() {
        for v in 0..spec.test_views {
            let s = image_seed(spec.seed, "test", k * spec.test_views + v);
            test.images.push(render_image(identity, &spec.target, s, spec.height, spec.width));
            test.labels.push(k);
        }
    }
    Ok(Benchmark {
        train,
        test,
        train_identities,
        test_identities,
    })
}

/// Test-style pool rendered under an arbitrary domain (e.g. a source
/// domain, for same-domain reference measurements).
pub fn render_pool(identities: &[SyntheticIdentity], domain: &DomainSpec, views: usize, seed: u64, height: usize, width: usize) -> TestPool {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (k, identity) in identities.iter().enumerate() {
        for v in 0..views {
            let s = image_seed(seed, &format!("pool.{}", domain.name), k * views + v);
            images.push(render_image(identity, domain, s, height, width));
            labels.push(k);
        }
    }
    TestPool {
        images,
        labels,
        views,
        num_ids: identities.len(),
    }
}

/// Mean of each color channel over a set of `[3, H, W]` images.
pub fn channel_means(images: &[Tensor]) -> Rgb {
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for img in images {
        let plane = img.numel() / 3;
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += img.data()[c * plane..(c + 1) * plane].iter().sum::<Float>();
        }
        count += plane;
    }
    sums.map(|s| s / math::from_usize(count.max(1)))
}

/// Fraction of images whose nearest class centroid (raw pixels) is their
/// own class, centroids taken over the same images.
pub fn nearest_centroid_accuracy(data: &Dataset) -> Float {
    if data.is_empty() {
        return 0.0;
    }
    let dim = data.images[0].numel();
    let mut centroids = vec![vec![0.0; dim]; data.num_ids];
    let mut counts = vec![0usize; data.num_ids];
    for (img, &l) in data.images.iter().zip(&data.labels) {
        centroids[l].iter_mut().zip(img.data()).for_each(|(c, v)| *c += v);
        counts[l] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= math::from_usize(n.max(1)));
    }
    let correct = data
        .images
        .iter()
        .zip(&data.labels)
        .filter(|(img, &l)| {
            let best = centroids
                .iter()
                .enumerate()
                .filter(|(k, _)| counts[*k] > 0)
                .map(|(k, c)| {
                    let d: Float = c.iter().zip(img.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (k, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(l)
        })
        .count();
    math::from_usize(correct) / math::from_usize(data.len())
}

//! Synthetic style-confounded shape benchmark and the photometric jitter
//! used for the augmented branch.
//!
//! Content is one of four shape motifs; style is a global photometric
//! generator (palette, background texture, contrast curve, grain). In the
//! training split each class is drawn in "its" style with probability
//! `train_correlation`; test domains decouple style from class, and at least
//! one of them uses a style never seen in training.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

pub const MOTIFS: [&str; 4] = ["bars", "cross", "blob", "ring"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub image_size: [usize; 3],
    pub num_classes: usize,
    /// Styles seen in training.
    pub num_styles: usize,
    /// Probability that a training sample wears its class-matched style.
    pub train_correlation: f64,
    pub num_test_domains: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            image_size: [3, 16, 16],
            num_classes: 4,
            num_styles: 4,
            train_correlation: 0.95,
            num_test_domains: 2,
            train_count: 4000,
            test_count: 1000,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_size;
        if c != 3 || h < 8 || w < 8 {
            return Err(Error::config(
                "benchmark.image_size",
                format!(
                    "need 3 colour channels and at least 8x8 pixels, got {:?}",
                    self.image_size
                ),
            ));
        }
        if self.num_classes < 2 || self.num_classes > MOTIFS.len() {
            return Err(Error::config(
                "benchmark.num_classes",
                format!(
                    "{} classes requested, {} motifs available",
                    self.num_classes,
                    MOTIFS.len()
                ),
            ));
        }
        if self.num_styles < 2 {
            return Err(Error::config(
                "benchmark.num_styles",
                "need at least 2 styles",
            ));
        }
        if !(0.0..=1.0).contains(&self.train_correlation) {
            return Err(Error::config(
                "benchmark.train_correlation",
                format!("{} is outside [0, 1]", self.train_correlation),
            ));
        }
        if self.num_test_domains == 0 {
            return Err(Error::config(
                "benchmark.num_test_domains",
                "need at least one test domain",
            ));
        }
        if self.train_count == 0 {
            return Err(Error::config("benchmark.train_count", "must be at least 1"));
        }
        if self.test_count == 0 {
            return Err(Error::config("benchmark.test_count", "must be at least 1"));
        }
        Ok(())
    }

    /// Style a class is tied to in the training split.
    pub fn matched_style(&self, class: usize) -> usize {
        class % self.num_styles
    }

    /// Test regimes in order. With a single domain it is the held-out style.
    pub fn test_regimes(&self) -> Vec<TestRegime> {
        if self.num_test_domains == 1 {
            return vec![TestRegime::HeldOut(self.num_styles)];
        }
        let mut out = vec![TestRegime::SeenDecorrelated];
        out.extend(
            (0..self.num_test_domains - 1).map(|i| TestRegime::HeldOut(self.num_styles + i)),
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestRegime {
    /// Training styles, drawn independently of the class.
    SeenDecorrelated,
    /// A single style id outside the training set.
    HeldOut(usize),
}

impl TestRegime {
    pub fn name(&self) -> String {
        match self {
            TestRegime::SeenDecorrelated => "seen-decorrelated".into(),
            TestRegime::HeldOut(s) => format!("held-out-style-{s}"),
        }
    }
}

/// Images in `[0, 1]` with labels and (diagnostic) style ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub style_ids: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<LabeledBatch> {
        Ok(LabeledBatch {
            images: self.images.gather_outer(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            style_ids: rows.iter().map(|&r| self.style_ids[r]).collect(),
        })
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<LabeledBatch> {
        Ok(LabeledBatch {
            images: self.images.slice_outer(start, end)?,
            labels: self.labels[start..end].to_vec(),
            style_ids: self.style_ids[start..end].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestDomain {
    pub name: String,
    pub regime: TestRegime,
    pub data: LabeledBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub train: LabeledBatch,
    pub test: Vec<TestDomain>,
}

/// Photometric parameters of one style generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleParams {
    pub foreground: [f64; 3],
    pub background: [f64; 3],
    /// Background stripe frequency (cycles per image) and amplitude.
    pub texture_freq: f64,
    pub texture_amp: f64,
    pub texture_angle: f64,
    /// Contrast curve exponent.
    pub gamma: f64,
    /// Standard deviation of additive grain.
    pub grain: f64,
}

const STYLE_TABLE: [StyleParams; 8] = [
    StyleParams {
        foreground: [0.95, 0.35, 0.25],
        background: [0.15, 0.20, 0.45],
        texture_freq: 1.0,
        texture_amp: 0.15,
        texture_angle: 0.0,
        gamma: 1.0,
        grain: 0.02,
    },
    StyleParams {
        foreground: [0.30, 0.90, 0.35],
        background: [0.45, 0.15, 0.30],
        texture_freq: 2.5,
        texture_amp: 0.25,
        texture_angle: 1.2,
        gamma: 0.7,
        grain: 0.05,
    },
    StyleParams {
        foreground: [0.30, 0.45, 0.95],
        background: [0.40, 0.35, 0.10],
        texture_freq: 4.0,
        texture_amp: 0.10,
        texture_angle: 0.6,
        gamma: 1.4,
        grain: 0.01,
    },
    StyleParams {
        foreground: [0.95, 0.85, 0.30],
        background: [0.10, 0.30, 0.30],
        texture_freq: 0.5,
        texture_amp: 0.30,
        texture_angle: 2.0,
        gamma: 1.0,
        grain: 0.08,
    },
    StyleParams {
        foreground: [0.85, 0.40, 0.90],
        background: [0.20, 0.35, 0.15],
        texture_freq: 3.0,
        texture_amp: 0.20,
        texture_angle: 0.9,
        gamma: 0.85,
        grain: 0.04,
    },
    StyleParams {
        foreground: [0.40, 0.85, 0.85],
        background: [0.35, 0.10, 0.10],
        texture_freq: 1.5,
        texture_amp: 0.20,
        texture_angle: 2.6,
        gamma: 1.2,
        grain: 0.03,
    },
    StyleParams {
        foreground: [0.90, 0.60, 0.20],
        background: [0.10, 0.10, 0.25],
        texture_freq: 2.0,
        texture_amp: 0.15,
        texture_angle: 0.3,
        gamma: 0.9,
        grain: 0.06,
    },
    StyleParams {
        foreground: [0.60, 0.60, 0.95],
        background: [0.30, 0.25, 0.05],
        texture_freq: 3.5,
        texture_amp: 0.25,
        texture_angle: 1.6,
        gamma: 1.1,
        grain: 0.02,
    },
];

/// Parameters of style `id`. The first entries come from a fixed table;
/// later ids are drawn from a seeded generator.
pub fn style_params(id: usize) -> StyleParams {
    if let Some(p) = STYLE_TABLE.get(id) {
        return *p;
    }
    let mut rng = substream(0x5747_1E5, Stream::Benchmark, id as u64);
    let mut color = |lo: f64, hi: f64| {
        [
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
            rng.gen_range(lo..hi),
        ]
    };
    let foreground = color(0.45, 1.0);
    let background = color(0.0, 0.4);
    StyleParams {
        foreground,
        background,
        texture_freq: rng.gen_range(0.5..4.0),
        texture_amp: rng.gen_range(0.05..0.3),
        texture_angle: rng.gen_range(0.0..PI),
        gamma: rng.gen_range(0.7..1.4),
        grain: rng.gen_range(0.0..0.08),
    }
}

/// Coverage of motif `class` at pixel centre `(y, x)` relative to the
/// motif centre, for radius `r`.
fn motif_inside(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    let dist = (dy * dy + dx * dx).sqrt();
    match class {
        0 => dy.abs() <= r && (0.3 * r..=0.75 * r).contains(&dx.abs()),
        1 => (dx.abs() <= 0.28 * r && dy.abs() <= r) || (dy.abs() <= 0.28 * r && dx.abs() <= r),
        2 => dist <= 0.8 * r,
        _ => (0.55 * r..=r).contains(&dist),
    }
}

/// Anti-aliased motif mask (2×2 supersampling).
fn motif_mask(class: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let unit = h.min(w) as f64 / 16.0;
    let r = rng.gen_range(4.5..6.5) * unit;
    let cy = h as f64 / 2.0 + rng.gen_range(-2.0..2.0) * unit;
    let cx = w as f64 / 2.0 + rng.gen_range(-2.0..2.0) * unit;
    let mut mask = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut hit = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if motif_inside(class, i as f64 + oy - cy, j as f64 + ox - cx, r) {
                    hit += 0.25;
                }
            }
            mask[i * w + j] = hit;
        }
    }
    mask
}

/// Renders one `[3, H, W]` image of motif `class` in style `style`.
pub fn render(class: usize, style: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let p = style_params(style);
    let mask = motif_mask(class, h, w, rng);
    let fg: Vec<f64> = p
        .foreground
        .iter()
        .map(|c| (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
        .collect();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (sin_a, cos_a) = p.texture_angle.sin_cos();
    let mut img = vec![0.0; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            let along = (i as f64 * cos_a + j as f64 * sin_a) / h as f64;
            let tex = 1.0 + p.texture_amp * (2.0 * PI * p.texture_freq * along + phase).sin();
            let m = mask[i * w + j];
            for c in 0..3 {
                let v = (m * fg[c] + (1.0 - m) * p.background[c] * tex).clamp(0.0, 1.0);
                let noise: f64 = rng.sample(StandardNormal);
                img[(c * h + i) * w + j] = (v.powf(p.gamma) + p.grain * noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn render_split(
    spec: &BenchmarkSpec,
    tag: u64,
    count: usize,
    style_of: impl Fn(usize, &mut rand_chacha::ChaCha8Rng) -> usize,
) -> Result<LabeledBatch> {
    let [c, h, w] = spec.image_size;
    let mut split_rng = substream(spec.seed, Stream::Benchmark, tag << 32);
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut split_rng);
    let mut images = Vec::with_capacity(count * c * h * w);
    let mut style_ids = Vec::with_capacity(count);
    for (i, &y) in labels.iter().enumerate() {
        let mut rng = substream(spec.seed, Stream::Benchmark, (tag << 32) | (i as u64 + 1));
        let s = style_of(y, &mut rng);
        images.extend(render(y, s, h, w, &mut rng));
        style_ids.push(s);
    }
    Ok(LabeledBatch {
        images: Tensor::new(vec![count, c, h, w], images)?,
        labels,
        style_ids,
    })
}

/// Builds the training split and every test domain; pure in `spec`.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let rho = spec.train_correlation;
    let ns = spec.num_styles;
    let train = render_split(spec, 0, spec.train_count, |y, rng| {
        let matched = spec.matched_style(y);
        if rng.gen::<f64>() < rho {
            matched
        } else {
            let other = rng.gen_range(0..ns - 1);
            if other >= matched {
                other + 1
            } else {
                other
            }
        }
    })?;
    let test = spec
        .test_regimes()
        .into_iter()
        .enumerate()
        .map(|(d, regime)| {
            let data = render_split(spec, d as u64 + 1, spec.test_count, |_, rng| match regime {
                TestRegime::SeenDecorrelated => rng.gen_range(0..ns),
                TestRegime::HeldOut(s) => s,
            })?;
            Ok(TestDomain {
                name: regime.name(),
                regime,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Random per-sample recolouring: channel gain and offset, gamma, grain,
/// all scaled by `strength`. Labels and style ids are untouched;
/// `strength == 0` returns the input unchanged.
pub fn style_jitter_with(batch: &LabeledBatch, strength: f64, rng: &mut impl Rng) -> LabeledBatch {
    if strength == 0.0 {
        return batch.clone();
    }
    let (n, c, h, w) = batch
        .images
        .dims4()
        .expect("labeled batches hold 4-axis images");
    let plane = h * w;
    let mut out = batch.images.data().to_vec();
    for img in out.chunks_mut(c * plane).take(n) {
        let gain: Vec<f64> = (0..c)
            .map(|_| 1.0 + 0.6 * strength * rng.gen_range(-1.0..1.0))
            .collect();
        let offset: Vec<f64> = (0..c)
            .map(|_| 0.3 * strength * rng.gen_range(-1.0..1.0))
            .collect();
        let gamma = (0.6 * strength * rng.gen_range(-1.0..1.0)).exp();
        let grain = 0.05 * strength;
        for (ch, px) in img.chunks_mut(plane).enumerate() {
            for v in px.iter_mut() {
                let tinted = (gain[ch] * *v + offset[ch]).clamp(0.0, 1.0);
                let noise: f64 = rng.sample(StandardNormal);
                *v = (tinted.powf(gamma) + grain * noise).clamp(0.0, 1.0);
            }
        }
    }
    LabeledBatch {
        images: Tensor::new(batch.images.shape().to_vec(), out).expect("clamped values are finite"),
        labels: batch.labels.clone(),
        style_ids: batch.style_ids.clone(),
    }
}

pub fn style_jitter(batch: &LabeledBatch, strength: f64, seed: u64) -> LabeledBatch {
    style_jitter_with(
        batch,
        strength,
        &mut crate::rng::stream(seed, Stream::Jitter),
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportedSplit {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub style_ids: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportManifest {
    pub spec: BenchmarkSpec,
    pub dtype: String,
    pub splits: Vec<ExportedSplit>,
}

/// Writes each split as raw little-endian `f64` plus `dataset.json`.
pub fn export_benchmark(bench: &Benchmark, dir: &Path) -> Result<ExportManifest> {
    std::fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    let mut write = |name: &str, data: &LabeledBatch| -> Result<()> {
        let file = format!("{name}.f64");
        let bytes: Vec<u8> = data
            .images
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        std::fs::write(dir.join(&file), bytes)?;
        splits.push(ExportedSplit {
            name: name.to_string(),
            file,
            shape: data.images.shape().to_vec(),
            labels: data.labels.clone(),
            style_ids: data.style_ids.clone(),
        });
        Ok(())
    };
    write("train", &bench.train)?;
    for d in &bench.test {
        write(&d.name, &d.data)?;
    }
    let manifest = ExportManifest {
        spec: bench.spec.clone(),
        dtype: "f64-le".into(),
        splits,
    };
    std::fs::write(
        dir.join("dataset.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

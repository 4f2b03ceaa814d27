use std::path::PathBuf;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, SimRng, STREAM_DATA};
use crate::tensor::Tensor;

/// Gaussian class prototypes on an `h x w x d` grid.
///
/// Classes are grouped into `domains` contiguous blocks. Each prototype mixes
/// a pattern shared by its domain (weight `domain_mix`) with a class-specific
/// pattern, is smoothed with a 3x3 box filter and scaled to unit RMS. Every
/// example is its prototype plus i.i.d. `noise * N(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobParams {
    pub classes: usize,
    #[serde(default = "default_domains")]
    pub domains: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub per_class: usize,
    pub noise: f64,
    #[serde(default = "default_mix")]
    pub domain_mix: f64,
    /// Blend weight of a per-domain style (random 3x3 spatial filter and
    /// channel mixing) applied to every example; gives domains distinct
    /// low-level statistics.
    #[serde(default)]
    pub domain_style: f64,
}

fn default_domains() -> usize {
    1
}
fn default_side() -> usize {
    8
}
fn default_depth() -> usize {
    1
}
fn default_mix() -> f64 {
    0.5
}

impl BlobParams {
    pub fn new(classes: usize, per_class: usize, noise: f64) -> Self {
        BlobParams {
            classes,
            domains: 1,
            height: 8,
            width: 8,
            depth: 1,
            per_class,
            noise,
            domain_mix: 0.5,
            domain_style: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.height == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::config("synthetic dataset extents must be positive"));
        }
        if self.domains == 0 || self.classes % self.domains != 0 {
            return Err(Error::config(format!(
                "{} classes cannot be grouped into {} equal domains",
                self.classes, self.domains
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.domain_mix) {
            return Err(Error::config("domain_mix must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.domain_style) {
            return Err(Error::config("domain_style must be in [0, 1]"));
        }
        Ok(())
    }

    /// Domain of a class.
    pub fn domain_of(&self, class: usize) -> usize {
        class / (self.classes / self.domains)
    }

    /// Classes of domain `g`, in order.
    pub fn domain_classes(&self, g: usize) -> Vec<usize> {
        let per = self.classes / self.domains;
        (g * per..(g + 1) * per).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind {
    SyntheticBlobs(BlobParams),
    TinyImages { path: PathBuf },
}

fn gaussian_field(n: usize, rng: &mut SimRng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn box_blur(field: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                let mut s = 0.0;
                for dy in [h - 1, 0, 1] {
                    for dx in [w - 1, 0, 1] {
                        let yy = (y + dy) % h;
                        let xx = (x + dx) % w;
                        s += field[(yy * w + xx) * d + c];
                    }
                }
                out[(y * w + x) * d + c] = s / 9.0;
            }
        }
    }
    out
}

/// Circular 3x3 filter per channel; `kernel` is row-major `[dy][dx]`.
fn filter3(field: &[f64], kernel: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                let mut s = 0.0;
                for (ky, dy) in [h - 1, 0, 1].into_iter().enumerate() {
                    for (kx, dx) in [w - 1, 0, 1].into_iter().enumerate() {
                        s += kernel[ky * 3 + kx] * field[(((y + dy) % h) * w + (x + dx) % w) * d + c];
                    }
                }
                out[(y * w + x) * d + c] = s;
            }
        }
    }
    out
}

fn unit_l2(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A domain's style: a unit-L2 3x3 spatial filter and a channel-mixing
/// matrix with unit-L2 rows.
struct DomainStyle {
    spatial: Vec<f64>,
    mix: Vec<Vec<f64>>,
}

impl DomainStyle {
    fn apply(&self, x: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
        let f = filter3(x, &self.spatial, h, w, d);
        let mut out = vec![0.0; f.len()];
        for (px, o) in f.chunks(d).zip(out.chunks_mut(d)) {
            for (oc, row) in o.iter_mut().zip(&self.mix) {
                *oc = row.iter().zip(px).map(|(a, b)| a * b).sum();
            }
        }
        out
    }
}

fn domain_styles(p: &BlobParams, seed: u64) -> Vec<DomainStyle> {
    let mut rng = rng::stream(&[seed, STREAM_DATA, 2]);
    (0..p.domains)
        .map(|_| DomainStyle {
            spatial: unit_l2(gaussian_field(9, &mut rng)),
            mix: (0..p.depth).map(|_| unit_l2(gaussian_field(p.depth, &mut rng))).collect(),
        })
        .collect()
}

fn unit_rms(mut v: Vec<f64>) -> Vec<f64> {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        for x in &mut v {
            *x /= rms;
        }
    }
    v
}

/// Class prototypes, each `(h, w, d)`.
pub fn blob_prototypes(p: &BlobParams, seed: u64) -> Result<Vec<Tensor>> {
    p.validate()?;
    let n = p.height * p.width * p.depth;
    let mut rng = rng::stream(&[seed, STREAM_DATA, 0]);
    let bases: Vec<Vec<f64>> = (0..p.domains).map(|_| gaussian_field(n, &mut rng)).collect();
    let (a, b) = (p.domain_mix.sqrt(), (1.0 - p.domain_mix).sqrt());
    (0..p.classes)
        .map(|c| {
            let dev = gaussian_field(n, &mut rng);
            let base = &bases[p.domain_of(c)];
            let mixed: Vec<f64> = base.iter().zip(&dev).map(|(x, y)| a * x + b * y).collect();
            let proto = unit_rms(box_blur(&mixed, p.height, p.width, p.depth));
            Tensor::new(vec![p.height, p.width, p.depth], proto)
        })
        .collect()
}

fn synthetic_blobs(p: &BlobParams, seed: u64) -> Result<Dataset> {
    let protos = blob_prototypes(p, seed)?;
    let n = p.height * p.width * p.depth;
    let total = p.classes * p.per_class;
    let mut rng = rng::stream(&[seed, STREAM_DATA, 1]);
    let styles = domain_styles(p, seed);
    let mut data = Vec::with_capacity(total * n);
    let mut labels = Vec::with_capacity(total);
    for _ in 0..p.per_class {
        for (c, proto) in protos.iter().enumerate() {
            let x: Vec<f64> = proto
                .data()
                .iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + p.noise * e
                })
                .collect();
            if p.domain_style > 0.0 {
                let f = styles[p.domain_of(c)].apply(&x, p.height, p.width, p.depth);
                data.extend(x.iter().zip(f).map(|(a, b)| (1.0 - p.domain_style) * a + p.domain_style * b));
            } else {
                data.extend(x);
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::new(vec![total, p.height, p.width, p.depth], data)?,
        labels,
        p.classes,
        "synthetic-blobs",
    )
}

pub fn make_desk_dataset(kind: &DatasetKind, seed: u64) -> Result<Dataset> {
    match kind {
        DatasetKind::SyntheticBlobs(p) => synthetic_blobs(p, seed),
        DatasetKind::TinyImages { path } => super::read_tiny_images(path),
    }
}

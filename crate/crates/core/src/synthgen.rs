//! Synthetic paired 2D/3D feature grids with planted defects.
//!
//! Both modalities are affine images of one smooth latent field plus small
//! independent noise, so each is predictable from the other. Defects perturb
//! one modality, or re-draw the latent field of one modality, inside random
//! ellipses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{derive_seed, DenseFeatureMap, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectMode {
    /// Additive perturbation of the 2D features only.
    Appearance,
    /// Additive perturbation of the 3D features only.
    Geometry,
    /// The latent field of one modality is re-drawn; each modality alone
    /// stays plausible.
    CrossModal,
}

impl DefectMode {
    pub const ALL: [DefectMode; 3] = [DefectMode::Appearance, DefectMode::Geometry, DefectMode::CrossModal];

    pub fn name(self) -> &'static str {
        match self {
            DefectMode::Appearance => "appearance",
            DefectMode::Geometry => "geometry",
            DefectMode::CrossModal => "cross_modal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub d2: usize,
    pub d3: usize,
    pub latent: usize,
    /// Gaussian smoothing sigma of the latent field, in pixels.
    pub sigma: f64,
    /// Standard deviation of the independent per-feature noise.
    pub noise: f64,
    /// Length of the constant offset added to every feature vector.
    pub offset: f64,
    pub dropout: f64,
    pub defects_min: usize,
    pub defects_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub modes: Vec<DefectMode>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            d2: 16,
            d3: 16,
            latent: 4,
            sigma: 3.0,
            noise: 0.05,
            offset: 1.0,
            dropout: 0.0,
            defects_min: 1,
            defects_max: 3,
            radius_min: 4.0,
            radius_max: 9.0,
            intensity_min: 0.8,
            intensity_max: 1.5,
            modes: DefectMode::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.d2 == 0 || self.d3 == 0 || self.latent == 0 {
            return bad("grid, feature and latent sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.sigma > 0.0) || self.noise < 0.0 || self.offset < 0.0 {
            return bad("sigma must be positive; noise and offset nonnegative".into());
        }
        if self.defects_min > self.defects_max {
            return bad("defects_min exceeds defects_max".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("radius range must be positive and ordered".into());
        }
        if 2.0 * self.radius_max.ceil() + 1.0 > self.height.min(self.width) as f64 {
            return bad(format!("radius {} does not fit a {}x{} grid", self.radius_max, self.height, self.width));
        }
        if !(self.intensity_min >= 0.0 && self.intensity_min <= self.intensity_max) {
            return bad("intensity range must be nonnegative and ordered".into());
        }
        if self.modes.is_empty() && self.defects_max > 0 {
            return bad("at least one defect mode is required".into());
        }
        Ok(())
    }
}

/// Rotated ellipse in pixel coordinates; pixel `(y, x)` is inside when its
/// centre satisfies the ellipse inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width).map(|p| self.contains(p / width, p % width)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Modality {
    TwoD,
    ThreeD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub region: Ellipse,
    pub mode: DefectMode,
    pub intensity: f64,
    /// Perturbed modality (for cross-modal defects, the one re-drawn).
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub f2: DenseFeatureMap,
    pub f3: DenseFeatureMap,
    /// Defect pixels restricted to valid 3D pixels.
    pub gt: Vec<bool>,
    pub defects: Vec<Defect>,
}

impl SynthSample {
    pub fn is_anomalous(&self) -> bool {
        !self.defects.is_empty()
    }
}

/// Separable Gaussian filter with clamped borders, per channel of a
/// `(h*w, c)` row-major field.
fn gaussian_filter(field: &[f64], h: usize, w: usize, c: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let pass = |src: &[f64], along_x: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for (j, kv) in k.iter().enumerate() {
                    let o = j as i64 - r;
                    let (yy, xx) = if along_x {
                        (y, (x as i64 + o).clamp(0, w as i64 - 1) as usize)
                    } else {
                        ((y as i64 + o).clamp(0, h as i64 - 1) as usize, x)
                    };
                    let (dst, s) = ((y * w + x) * c, (yy * w + xx) * c);
                    for ch in 0..c {
                        out[dst + ch] += kv * src[s + ch];
                    }
                }
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Dataset-level affine maps from the latent field to each modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthGenerator {
    cfg: SynthConfig,
    a2: Vec<f64>,
    b2: Vec<f64>,
    a3: Vec<f64>,
    b3: Vec<f64>,
}

/// Per-sample random draws shared by a nominal sample and its anomalous twin.
struct Draws {
    latent: Vec<f64>,
    noise2: Vec<f64>,
    noise3: Vec<f64>,
    validity: Vec<bool>,
}

impl SynthGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::derived(cfg.seed, "synth/maps");
        let scale = 1.0 / (cfg.latent as f64).sqrt();
        let mut matrix = |rows: usize| -> Vec<f64> { (0..rows * cfg.latent).map(|_| rng.normal() * scale).collect() };
        let a2 = matrix(cfg.d2);
        let a3 = matrix(cfg.d3);
        let mut offset = |d: usize| -> Vec<f64> {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * cfg.offset / n).collect()
        };
        let b2 = offset(cfg.d2);
        let b3 = offset(cfg.d3);
        Ok(Self { cfg, a2, b2, a3, b3 })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Smooth latent field standardized to zero mean and unit variance per
    /// factor.
    fn latent_field(&self, rng: &mut SeededRng) -> Vec<f64> {
        let (h, w, k) = (self.cfg.height, self.cfg.width, self.cfg.latent);
        let white: Vec<f64> = (0..h * w * k).map(|_| rng.normal()).collect();
        let mut z = gaussian_filter(&white, h, w, k, self.cfg.sigma);
        let n = (h * w) as f64;
        for ch in 0..k {
            let mean = (0..h * w).map(|p| z[p * k + ch]).sum::<f64>() / n;
            let var = (0..h * w).map(|p| (z[p * k + ch] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt().max(1e-12);
            (0..h * w).for_each(|p| z[p * k + ch] = (z[p * k + ch] - mean) / sd);
        }
        z
    }

    fn draws(&self, sample_seed: u64) -> Draws {
        let mut rng = SeededRng::derived(sample_seed, "synth/nominal");
        let (h, w) = (self.cfg.height, self.cfg.width);
        let latent = self.latent_field(&mut rng);
        let noise2 = (0..h * w * self.cfg.d2).map(|_| rng.normal() * self.cfg.noise).collect();
        let noise3 = (0..h * w * self.cfg.d3).map(|_| rng.normal() * self.cfg.noise).collect();
        let validity = (0..h * w).map(|_| rng.uniform() >= self.cfg.dropout).collect();
        Draws { latent, noise2, noise3, validity }
    }

    fn project(&self, modality: Modality, z: &[f64], p: usize, noise: &[f64], out: &mut [f64]) {
        let (a, b) = match modality {
            Modality::TwoD => (&self.a2, &self.b2),
            Modality::ThreeD => (&self.a3, &self.b3),
        };
        let k = self.cfg.latent;
        let zp = &z[p * k..(p + 1) * k];
        let d = out.len();
        for (j, o) in out.iter_mut().enumerate() {
            let dot: f64 = a[j * k..(j + 1) * k].iter().zip(zp).map(|(x, y)| x * y).sum();
            *o = dot + b[j] + noise[p * d + j];
        }
    }

    fn assemble(&self, modality: Modality, z: &[f64], noise: &[f64], validity: &[bool]) -> DenseFeatureMap {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let d = match modality {
            Modality::TwoD => self.cfg.d2,
            Modality::ThreeD => self.cfg.d3,
        };
        let mut map = DenseFeatureMap::zeros(h, w, d, true);
        for p in 0..h * w {
            self.project(modality, z, p, noise, map.pixel_at_mut(p));
        }
        if modality == Modality::ThreeD {
            map.validity_mut().copy_from_slice(validity);
            map = map.masked();
        }
        map
    }

    pub fn nominal(&self, sample_seed: u64) -> SynthSample {
        let d = self.draws(sample_seed);
        let f2 = self.assemble(Modality::TwoD, &d.latent, &d.noise2, &vec![true; d.validity.len()]);
        let f3 = self.assemble(Modality::ThreeD, &d.latent, &d.noise3, &d.validity);
        SynthSample { f2, f3, gt: vec![false; d.validity.len()], defects: Vec::new() }
    }

    /// The nominal sample for `sample_seed` with defects planted inside
    /// ellipses. Pixels outside every ellipse equal the nominal twin exactly.
    pub fn anomalous(&self, sample_seed: u64) -> SynthSample {
        let mut sample = self.nominal(sample_seed);
        let d = self.draws(sample_seed);
        let cfg = &self.cfg;
        let (h, w) = (cfg.height, cfg.width);
        let mut rng = SeededRng::derived(sample_seed, "synth/defects");
        let n = cfg.defects_min + rng.below(cfg.defects_max - cfg.defects_min + 1);
        let mut region_mask = vec![false; h * w];
        for _ in 0..n {
            let a = rng.uniform_range(cfg.radius_min, cfg.radius_max);
            let b = rng.uniform_range(cfg.radius_min, cfg.radius_max);
            let r = a.max(b).ceil();
            let cy = rng.uniform_range(r, h as f64 - 1.0 - r);
            let cx = rng.uniform_range(r, w as f64 - 1.0 - r);
            let region = Ellipse { cy, cx, a, b, theta: rng.uniform_range(0.0, std::f64::consts::PI) };
            let mode = cfg.modes[rng.below(cfg.modes.len())];
            let intensity = rng.uniform_range(cfg.intensity_min, cfg.intensity_max);
            let modality = match mode {
                DefectMode::Appearance => Modality::TwoD,
                DefectMode::Geometry => Modality::ThreeD,
                DefectMode::CrossModal => {
                    if rng.uniform() < 0.5 {
                        Modality::TwoD
                    } else {
                        Modality::ThreeD
                    }
                }
            };
            let inside = region.rasterize(h, w);
            match mode {
                DefectMode::Appearance | DefectMode::Geometry => {
                    let target = if modality == Modality::TwoD { &mut sample.f2 } else { &mut sample.f3 };
                    let dim = target.channels();
                    let dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                    let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let hit: Vec<usize> = (0..h * w).filter(|&p| inside[p] && target.validity()[p]).collect();
                    for p in hit {
                        let px = target.pixel_at_mut(p);
                        let scale = intensity * px.iter().map(|v| v * v).sum::<f64>().sqrt() / len;
                        px.iter_mut().zip(&dir).for_each(|(v, u)| *v += scale * u);
                    }
                }
                DefectMode::CrossModal => {
                    let fresh = self.latent_field(&mut rng);
                    let phi = intensity.min(1.0) * std::f64::consts::FRAC_PI_2;
                    let (s, c) = phi.sin_cos();
                    let mixed: Vec<f64> = d.latent.iter().zip(&fresh).map(|(z, f)| c * z + s * f).collect();
                    let (target, noise) = match modality {
                        Modality::TwoD => (&mut sample.f2, &d.noise2),
                        Modality::ThreeD => (&mut sample.f3, &d.noise3),
                    };
                    let hit: Vec<usize> = (0..h * w).filter(|&p| inside[p] && target.validity()[p]).collect();
                    for p in hit {
                        let mut px = vec![0.0; target.channels()];
                        self.project(modality, &mixed, p, noise, &mut px);
                        target.pixel_at_mut(p).copy_from_slice(&px);
                    }
                }
            }
            region_mask.iter_mut().zip(&inside).for_each(|(m, i)| *m |= *i);
            sample.defects.push(Defect { region, mode, intensity, modality });
        }
        sample.gt = region_mask.iter().zip(&d.validity).map(|(r, v)| *r && *v).collect();
        sample
    }
}

/// One nominal sample with a seed drawn from `rng`.
pub fn gen_nominal(cfg: &SynthConfig, rng: &mut SeededRng) -> Result<SynthSample> {
    Ok(SynthGenerator::new(cfg.clone())?.nominal(rng.next_seed()))
}

/// One anomalous sample with a seed drawn from `rng`.
pub fn gen_anomalous(cfg: &SynthConfig, rng: &mut SeededRng) -> Result<SynthSample> {
    Ok(SynthGenerator::new(cfg.clone())?.anomalous(rng.next_seed()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

/// Nominal training samples, then a test split of nominal samples followed by
/// anomalous ones. Sample seeds derive from `cfg.seed` and the sample's slot.
pub fn gen_dataset(cfg: &SynthConfig, n_train: usize, n_test_nominal: usize, n_test_anomalous: usize) -> Result<SynthDataset> {
    let g = SynthGenerator::new(cfg.clone())?;
    let seed = |tag: &str, i: usize| derive_seed(cfg.seed, &format!("synth/{tag}/{i}"));
    let train = (0..n_train).map(|i| g.nominal(seed("train", i))).collect();
    let mut test: Vec<SynthSample> = (0..n_test_nominal).map(|i| g.nominal(seed("test-nominal", i))).collect();
    test.extend((0..n_test_anomalous).map(|i| g.anomalous(seed("test-anomalous", i))));
    Ok(SynthDataset { train, test })
}

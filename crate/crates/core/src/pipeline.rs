//! End-to-end composition: training the mapping and reconstruction networks,
//! scoring samples in each modality mode, evaluation, ablation, checkpoints
//! and dataset materialization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoders::{
    decoder2d_forward, decoder3d_forward, Decoder2DConfig, Decoder2DModel, Decoder3DConfig, Decoder3DModel, DecoderSample,
};
use crate::error::{Error, Result};
use crate::fusion::{self, discrepancy_maps, DiscrepancyBundle, FusionConfig, Variant};
use crate::io::container::{feature_map_tensor, mask_tensor, read_tensor, write_tensor, Tensor};
use crate::io::manifest::{DatasetManifest, Label, ManifestHeader, SampleRecord, Split};
use crate::io::RunConfig;
use crate::mapnet::{mapper_forward, MapperConfig, MapperModel, MapperSample};
use crate::metrics;
use crate::{decoders, mapnet};
use crate::nn::{Parameters, ParametersExt};
use crate::numcore::{derive_seed, AnomalyMap, DenseFeatureMap, SeededRng};
use crate::polyprep::{self, Point};
use crate::synthgen::{gen_dataset, DefectMode, SynthConfig, SynthSample};
use crate::train::{fit, TrainReport};

/// Which modalities take part in training and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "2d3d")]
    Joint,
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Joint => "2d3d",
            Mode::TwoD => "2d",
            Mode::ThreeD => "3d",
        }
    }

    pub fn needs_2d(self) -> bool {
        self != Mode::ThreeD
    }

    pub fn needs_3d(self) -> bool {
        self != Mode::TwoD
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Mode::Joint, Mode::TwoD, Mode::ThreeD]
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::contract(format!("unknown mode {s:?}; expected 2d3d, 2d or 3d")))
    }
}

/// One dataset sample with whichever modalities are present.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub anomalous: bool,
    pub f2: Option<DenseFeatureMap>,
    pub f3: Option<DenseFeatureMap>,
    pub gt: Option<Vec<bool>>,
    pub defect_modes: Vec<DefectMode>,
}

impl Sample {
    pub fn from_synth(id: impl Into<String>, s: &SynthSample) -> Self {
        let mut modes: Vec<DefectMode> = s.defects.iter().map(|d| d.mode).collect();
        modes.sort_by_key(|m| *m as u8);
        modes.dedup();
        Self {
            id: id.into(),
            anomalous: s.is_anomalous(),
            f2: Some(s.f2.clone()),
            f3: Some(s.f3.clone()),
            gt: Some(s.gt.clone()),
            defect_modes: modes,
        }
    }

    /// Drops the modalities `mode` does not use.
    pub fn restricted(mut self, mode: Mode) -> Self {
        if !mode.needs_2d() {
            self.f2 = None;
        }
        if !mode.needs_3d() {
            self.f3 = None;
        }
        self
    }

    fn grid(&self) -> Option<(usize, usize)> {
        self.f2.as_ref().or(self.f3.as_ref()).map(|f| (f.height(), f.width()))
    }

    /// Features for `mode`, masked to the joint validity when both modalities
    /// take part, so invalid 3D pixels never reach either network.
    fn inputs(&self, mode: Mode) -> Result<(Option<DenseFeatureMap>, Option<DenseFeatureMap>)> {
        let missing = |what: &str| Error::ModalityUnavailable(format!("mode {mode} needs {what} features; sample `{}` has none", self.id));
        let f2 = if mode.needs_2d() { Some(self.f2.as_ref().ok_or_else(|| missing("2D"))?) } else { None };
        let f3 = if mode.needs_3d() { Some(self.f3.as_ref().ok_or_else(|| missing("3D"))?) } else { None };
        match (f2, f3) {
            (Some(a), Some(b)) => {
                if a.height() != b.height() || a.width() != b.width() {
                    return Err(Error::contract(format!("sample `{}`: 2D and 3D grids differ", self.id)));
                }
                let joint: Vec<bool> = a.validity().iter().zip(b.validity()).map(|(x, y)| *x && *y).collect();
                let restrict = |f: &DenseFeatureMap| {
                    let mut f = f.clone();
                    f.validity_mut().copy_from_slice(&joint);
                    f.masked()
                };
                Ok((Some(restrict(a)), Some(restrict(b))))
            }
            (a, b) => Ok((a.map(DenseFeatureMap::masked), b.map(DenseFeatureMap::masked))),
        }
    }

    /// Ground truth, all-false for nominal samples without one.
    fn gt_or_empty(&self) -> Option<Vec<bool>> {
        match (&self.gt, self.anomalous) {
            (Some(g), _) => Some(g.clone()),
            (None, false) => self.grid().map(|(h, w)| vec![false; h * w]),
            (None, true) => None,
        }
    }
}

/// Trained networks for one modality mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub mode: Mode,
    pub d2: Option<usize>,
    pub d3: Option<usize>,
    pub mapper_cfg: MapperConfig,
    pub decoder2d_cfg: Decoder2DConfig,
    pub decoder3d_cfg: Decoder3DConfig,
    /// 2D to 3D mapper.
    pub m23: Option<MapperModel>,
    /// 3D to 2D mapper.
    pub m32: Option<MapperModel>,
    pub dec2: Option<Decoder2DModel>,
    pub dec3: Option<Decoder3DModel>,
}

impl ModelBundle {
    /// Freshly initialized networks; every network draws from its own derived
    /// stream of `seed`.
    pub fn init(mode: Mode, d2: Option<usize>, d3: Option<usize>, cfg: &RunConfig, seed: u64) -> Result<Self> {
        let need = |d: Option<usize>, what: &str| d.ok_or_else(|| Error::ModalityUnavailable(format!("mode {mode} needs {what} features")));
        let (d2, d3) = (
            if mode.needs_2d() { Some(need(d2, "2D")?) } else { None },
            if mode.needs_3d() { Some(need(d3, "3D")?) } else { None },
        );
        let rng = |purpose: &str| SeededRng::derived(seed, &format!("init/{purpose}"));
        let (m23, m32) = match (mode, d2, d3) {
            (Mode::Joint, Some(a), Some(b)) => (
                Some(MapperModel::new(a, b, &cfg.mapper, &mut rng("m23"))?),
                Some(MapperModel::new(b, a, &cfg.mapper, &mut rng("m32"))?),
            ),
            _ => (None, None),
        };
        Ok(Self {
            mode,
            d2,
            d3,
            mapper_cfg: cfg.mapper,
            decoder2d_cfg: cfg.decoder2d,
            decoder3d_cfg: cfg.decoder3d,
            m23,
            m32,
            dec2: d2.map(|d| Decoder2DModel::new(d, &cfg.decoder2d, &mut rng("dec2"))).transpose()?,
            dec3: d3.map(|d| Decoder3DModel::new(d, &cfg.decoder3d, &mut rng("dec3"))).transpose()?,
        })
    }

    fn parts(&self) -> Vec<(&'static str, &dyn Parameters)> {
        let mut out: Vec<(&'static str, &dyn Parameters)> = Vec::new();
        if let Some(m) = &self.m23 {
            out.push(("m23", m));
        }
        if let Some(m) = &self.m32 {
            out.push(("m32", m));
        }
        if let Some(m) = &self.dec2 {
            out.push(("dec2", m));
        }
        if let Some(m) = &self.dec3 {
            out.push(("dec3", m));
        }
        out
    }

    fn parts_mut(&mut self) -> Vec<(&'static str, &mut dyn Parameters)> {
        let mut out: Vec<(&'static str, &mut dyn Parameters)> = Vec::new();
        if let Some(m) = &mut self.m23 {
            out.push(("m23", m));
        }
        if let Some(m) = &mut self.m32 {
            out.push(("m32", m));
        }
        if let Some(m) = &mut self.dec2 {
            out.push(("dec2", m));
        }
        if let Some(m) = &mut self.dec3 {
            out.push(("dec3", m));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|(_, p)| p.num_params()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainSummary {
    pub reports: BTreeMap<String, TrainReport>,
}

impl TrainSummary {
    pub fn final_losses(&self) -> BTreeMap<String, f64> {
        self.reports.iter().filter_map(|(k, r)| r.loss_trace.last().map(|&l| (k.clone(), l))).collect()
    }
}

/// Forward (2D to 3D) and backward (3D to 2D) mapping objectives of one
/// masked input pair.
fn mapper_pair(f2: &DenseFeatureMap, f3: &DenseFeatureMap) -> (MapperSample, MapperSample) {
    (
        MapperSample { source: f2.clone(), target: f3.clone(), mask: f2.validity().to_vec() },
        MapperSample { source: f3.clone(), target: f2.clone(), mask: f3.validity().to_vec() },
    )
}

fn decoder_sample(f: &DenseFeatureMap) -> DecoderSample {
    DecoderSample { mask: f.validity().to_vec(), features: f.clone() }
}

/// Training objective of every network in `bundle` on one sample, keyed by
/// network name. Networks whose mask is empty are omitted.
pub fn sample_losses(bundle: &ModelBundle, sample: &Sample) -> Result<BTreeMap<String, f64>> {
    let (f2, f3) = sample.inputs(bundle.mode)?;
    let mut out = BTreeMap::new();
    let mut put = |name: &str, loss: Option<f64>| {
        if let Some(l) = loss {
            out.insert(name.to_owned(), l);
        }
    };
    if let (Some(m23), Some(m32), Some(a), Some(b)) = (&bundle.m23, &bundle.m32, &f2, &f3) {
        let (fwd, bwd) = mapper_pair(a, b);
        put("m23", mapnet::mapper_backward(m23, &fwd)?.map(|r| r.0));
        put("m32", mapnet::mapper_backward(m32, &bwd)?.map(|r| r.0));
    }
    if let (Some(dec), Some(f)) = (&bundle.dec2, &f2) {
        put("dec2", decoders::decoder2d_backward(dec, &decoder_sample(f))?.map(|r| r.0));
    }
    if let (Some(dec), Some(f)) = (&bundle.dec3, &f3) {
        put("dec3", decoders::decoder3d_backward(dec, &decoder_sample(f))?.map(|r| r.0));
    }
    Ok(out)
}

/// Trains every network `cfg.mode` needs on nominal samples only.
pub fn train(samples: &[Sample], cfg: &RunConfig) -> Result<(ModelBundle, TrainSummary)> {
    if samples.is_empty() {
        return Err(Error::NoNominalData);
    }
    if let Some(s) = samples.iter().find(|s| s.anomalous) {
        return Err(Error::ProtocolViolation(format!("anomalous sample `{}` passed to training", s.id)));
    }
    let mode = cfg.mode;
    let inputs = samples.iter().map(|s| s.inputs(mode)).collect::<Result<Vec<_>>>()?;
    let (d2, d3) = (
        inputs[0].0.as_ref().map(DenseFeatureMap::channels),
        inputs[0].1.as_ref().map(DenseFeatureMap::channels),
    );
    let mut bundle = ModelBundle::init(mode, d2, d3, cfg, cfg.seed)?;
    let mut summary = TrainSummary::default();
    let rng = |purpose: &str| SeededRng::derived(cfg.seed, &format!("train/{purpose}"));

    if let (Some(m23), Some(m32)) = (&mut bundle.m23, &mut bundle.m32) {
        let (fwd, bwd): (Vec<_>, Vec<_>) = inputs
            .iter()
            .map(|(a, b)| mapper_pair(a.as_ref().expect("2D present"), b.as_ref().expect("3D present")))
            .unzip();
        summary.reports.insert("m23".into(), fit(m23, &fwd, &cfg.train, &mut rng("m23"))?);
        summary.reports.insert("m32".into(), fit(m32, &bwd, &cfg.train, &mut rng("m32"))?);
    }
    if let Some(dec) = &mut bundle.dec2 {
        let set: Vec<DecoderSample> = inputs.iter().filter_map(|i| i.0.as_ref()).map(decoder_sample).collect();
        summary.reports.insert("dec2".into(), fit(dec, &set, &cfg.train, &mut rng("dec2"))?);
    }
    if let Some(dec) = &mut bundle.dec3 {
        let set: Vec<DecoderSample> = inputs.iter().filter_map(|i| i.1.as_ref()).map(decoder_sample).collect();
        summary.reports.insert("dec3".into(), fit(dec, &set, &cfg.train, &mut rng("dec3"))?);
    }
    Ok((bundle, summary))
}

/// Anomaly map and image score of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub id: String,
    pub map: AnomalyMap,
    pub score: f64,
}

/// Network outputs needed by every scoring rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructions {
    pub f2: Option<DenseFeatureMap>,
    pub f3: Option<DenseFeatureMap>,
    pub f2_rec: Option<DenseFeatureMap>,
    pub f3_rec: Option<DenseFeatureMap>,
    pub f2_map: Option<DenseFeatureMap>,
    pub f3_map: Option<DenseFeatureMap>,
}

impl Reconstructions {
    /// The four discrepancy maps; requires the joint mode.
    pub fn bundle(&self) -> Result<DiscrepancyBundle> {
        match (&self.f2, &self.f3, &self.f2_map, &self.f3_map, &self.f2_rec, &self.f3_rec) {
            (Some(f2), Some(f3), Some(f2m), Some(f3m), Some(f2r), Some(f3r)) => discrepancy_maps(f2, f3, f2m, f3m, f2r, f3r),
            _ => Err(Error::ModalityUnavailable("fusion needs both modalities and all four networks".into())),
        }
    }

    /// Score from the 2D reconstruction alone.
    pub fn score_2d(&self, fusion: &FusionConfig) -> Result<(AnomalyMap, f64)> {
        match (&self.f2, &self.f2_rec) {
            (Some(f), Some(r)) => fusion::infer_2d_only(f, r, fusion),
            _ => Err(Error::ModalityUnavailable("2D reconstruction unavailable".into())),
        }
    }

    /// Score from the 3D reconstruction alone.
    pub fn score_3d(&self, fusion: &FusionConfig) -> Result<(AnomalyMap, f64)> {
        match (&self.f3, &self.f3_rec) {
            (Some(f), Some(r)) => fusion::infer_3d_only(f, r, fusion),
            _ => Err(Error::ModalityUnavailable("3D reconstruction unavailable".into())),
        }
    }
}

pub fn reconstruct(bundle: &ModelBundle, sample: &Sample) -> Result<Reconstructions> {
    let (f2, f3) = sample.inputs(bundle.mode)?;
    let run = |f: &Option<DenseFeatureMap>, g: &dyn Fn(&DenseFeatureMap) -> Result<DenseFeatureMap>| f.as_ref().map(g).transpose();
    let f2_rec = match &bundle.dec2 {
        Some(d) => run(&f2, &|f| decoder2d_forward(d, f))?,
        None => None,
    };
    let f3_rec = match &bundle.dec3 {
        Some(d) => run(&f3, &|f| decoder3d_forward(d, f))?,
        None => None,
    };
    let f3_map = match &bundle.m23 {
        Some(m) => run(&f2, &|f| mapper_forward(m, f))?,
        None => None,
    };
    let f2_map = match &bundle.m32 {
        Some(m) => run(&f3, &|f| mapper_forward(m, f))?,
        None => None,
    };
    Ok(Reconstructions { f2, f3, f2_rec, f3_rec, f2_map, f3_map })
}

/// Scores one set of reconstructions under the bundle's mode.
pub fn score(mode: Mode, rec: &Reconstructions, fusion: &FusionConfig) -> Result<(AnomalyMap, f64)> {
    match mode {
        Mode::Joint => fusion::finalize(&fusion::fuse(&rec.bundle()?, fusion)?, fusion),
        Mode::TwoD => rec.score_2d(fusion),
        Mode::ThreeD => rec.score_3d(fusion),
    }
}

pub fn infer(bundle: &ModelBundle, sample: &Sample, fusion: &FusionConfig) -> Result<Inference> {
    let (map, score) = score(bundle.mode, &reconstruct(bundle, sample)?, fusion)?;
    Ok(Inference { id: sample.id.clone(), map, score })
}

pub fn infer_all(bundle: &ModelBundle, samples: &[Sample], fusion: &FusionConfig) -> Result<Vec<Inference>> {
    samples.iter().map(|s| infer(bundle, s, fusion)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub i_auroc: f64,
    /// Pixel metrics need ground truth for every anomalous sample.
    pub p_auroc: Option<f64>,
    /// `(fpr_limit, aupro)` pairs.
    pub aupro: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn to_metrics(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        m.insert("samples".into(), self.samples.into());
        m.insert("i_auroc".into(), self.i_auroc.into());
        if let Some(p) = self.p_auroc {
            m.insert("p_auroc".into(), p.into());
        }
        for (l, v) in &self.aupro {
            m.insert(format!("aupro@{l}"), (*v).into());
        }
        m
    }
}

pub fn evaluate(results: &[Inference], samples: &[Sample], fpr_limits: &[f64]) -> Result<EvalReport> {
    if results.len() != samples.len() {
        return Err(Error::contract(format!("{} results for {} samples", results.len(), samples.len())));
    }
    if let Some((r, s)) = results.iter().zip(samples).find(|(r, s)| r.id != s.id) {
        return Err(Error::contract(format!("result `{}` is paired with sample `{}`", r.id, s.id)));
    }
    let scores: Vec<f64> = results.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.anomalous).collect();
    let i_auroc = metrics::auroc(&scores, &labels)?;
    let gts: Option<Vec<Vec<bool>>> = samples.iter().map(Sample::gt_or_empty).collect();
    let (p_auroc, aupro) = match gts {
        Some(gts) => {
            let maps: Vec<AnomalyMap> = results.iter().map(|r| r.map.clone()).collect();
            let p = metrics::pixel_auroc(&maps, &gts)?;
            let points = metrics::pro_curve(&maps, &gts, metrics::Connectivity::Four)?;
            let aupro = fpr_limits.iter().map(|&l| (l, metrics::pro_integral(&points, l) / l)).collect();
            (Some(p), aupro)
        }
        None => (None, Vec::new()),
    };
    Ok(EvalReport { samples: samples.len(), i_auroc, p_auroc, aupro })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
}

/// Evaluates every fusion variant on the same trained networks.
pub fn ablate(bundle: &ModelBundle, samples: &[Sample], fusion: &FusionConfig, fpr_limits: &[f64]) -> Result<Vec<AblationRow>> {
    if bundle.mode != Mode::Joint {
        return Err(Error::ModalityUnavailable("ablation compares fusion variants and needs mode 2d3d".into()));
    }
    let bundles = samples
        .iter()
        .map(|s| reconstruct(bundle, s).and_then(|r| r.bundle()))
        .collect::<Result<Vec<_>>>()?;
    Variant::ALL
        .iter()
        .map(|&variant| {
            let cfg = FusionConfig { variant, ..fusion.clone() };
            let results = bundles
                .iter()
                .zip(samples)
                .map(|(b, s)| {
                    let (map, score) = fusion::finalize(&fusion::fuse(b, &cfg)?, &cfg)?;
                    Ok(Inference { id: s.id.clone(), map, score })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow { variant, report: evaluate(&results, samples, fpr_limits)? })
        })
        .collect()
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let limits: Vec<f64> = rows.first().map(|r| r.report.aupro.iter().map(|p| p.0).collect()).unwrap_or_default();
    let mut out = format!("{:<8} {:>8} {:>8}", "variant", "I-AUROC", "P-AUROC");
    for l in &limits {
        out.push_str(&format!(" {:>12}", format!("AUPRO@{l}")));
    }
    out.push('\n');
    for r in rows {
        let p = r.report.p_auroc.map_or("-".to_owned(), |p| format!("{p:.4}"));
        out.push_str(&format!("{:<8} {:>8.4} {:>8}", r.variant.name(), r.report.i_auroc, p));
        for (_, v) in &r.report.aupro {
            out.push_str(&format!(" {v:>12.4}"));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------- checkpoints

pub const CHECKPOINT_PARAMS: &str = "params.cmdr";
pub const CHECKPOINT_LAYOUT: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    network: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointLayout {
    mode: Mode,
    d2: Option<usize>,
    d3: Option<usize>,
    mapper: MapperConfig,
    decoder2d: Decoder2DConfig,
    decoder3d: Decoder3DConfig,
    tensors: Vec<TensorEntry>,
}

fn layout_of(bundle: &ModelBundle) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (network, p) in bundle.parts() {
        for (name, shape, len) in p.layout() {
            out.push(TensorEntry { network: network.into(), name, shape, offset, len });
            offset += len;
        }
    }
    out
}

/// Writes flat parameters as one container plus a JSON layout.
pub fn save_checkpoint(dir: &Path, bundle: &ModelBundle) -> Result<()> {
    let flat: Vec<f64> = bundle.parts().iter().flat_map(|(_, p)| p.flatten()).collect();
    let layout = CheckpointLayout {
        mode: bundle.mode,
        d2: bundle.d2,
        d3: bundle.d3,
        mapper: bundle.mapper_cfg,
        decoder2d: bundle.decoder2d_cfg,
        decoder3d: bundle.decoder3d_cfg,
        tensors: layout_of(bundle),
    };
    write_tensor(&dir.join(CHECKPOINT_PARAMS), &Tensor::f64(vec![flat.len() as u64], flat)?)?;
    crate::io::write_atomic(
        &dir.join(CHECKPOINT_LAYOUT),
        serde_json::to_string_pretty(&layout).expect("layout serializes").as_bytes(),
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelBundle> {
    let text = std::fs::read_to_string(dir.join(CHECKPOINT_LAYOUT))?;
    let layout: CheckpointLayout = serde_json::from_str(&text)
        .map_err(|e| Error::Schema { path: CHECKPOINT_LAYOUT.into(), msg: e.to_string() })?;
    let cfg = RunConfig {
        mapper: layout.mapper,
        decoder2d: layout.decoder2d,
        decoder3d: layout.decoder3d,
        ..RunConfig::default()
    };
    let mut bundle = ModelBundle::init(layout.mode, layout.d2, layout.d3, &cfg, 0)?;
    if layout_of(&bundle) != layout.tensors {
        return Err(Error::Schema { path: format!("{CHECKPOINT_LAYOUT}: tensors"), msg: "layout does not match the declared architecture".into() });
    }
    let flat = read_tensor(&dir.join(CHECKPOINT_PARAMS))?.to_f64();
    if flat.len() != bundle.num_params() {
        return Err(Error::Schema {
            path: CHECKPOINT_PARAMS.into(),
            msg: format!("{} values for {} parameters", flat.len(), bundle.num_params()),
        });
    }
    let mut off = 0;
    for (_, p) in bundle.parts_mut() {
        let n = p.num_params();
        p.assign_flat(&flat[off..off + n]);
        off += n;
    }
    Ok(bundle)
}

// ---------------------------------------------------------------- datasets

/// Synthetic train and test samples under the run's mode. The generator seed
/// derives from the global seed.
pub fn synth_samples(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let synth = SynthConfig { seed: derive_seed(cfg.seed, "synth"), ..cfg.synth.clone() };
    let c = cfg.synth_counts;
    let ds = gen_dataset(&synth, c.train, c.test_nominal, c.test_anomalous)?;
    let train = ds.train.iter().enumerate().map(|(i, s)| Sample::from_synth(format!("train_{i:04}"), s).restricted(cfg.mode)).collect();
    let test = ds
        .test
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let tag = if s.is_anomalous() { "anomalous" } else { "nominal" };
            Sample::from_synth(format!("test_{tag}_{i:04}"), s).restricted(cfg.mode)
        })
        .collect();
    Ok((train, test))
}

/// Writes every sample's tensors under `dir` and the manifest at
/// `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, mut header: ManifestHeader, train: &[Sample], test: &[Sample]) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for (split, set) in [(Split::Train, train), (Split::Test, test)] {
        for s in set {
            let label = if s.anomalous { Label::Anomalous } else { Label::Normal };
            let mut rec = SampleRecord::new(s.id.clone(), split, label);
            let put = |suffix: &str, t: Tensor| -> Result<Option<String>> {
                let name = format!("{}_{suffix}.cmdr", s.id);
                write_tensor(&dir.join(&name), &t)?;
                Ok(Some(name))
            };
            if let Some(f) = &s.f2 {
                rec.f2 = put("f2", feature_map_tensor(f))?;
            }
            let valid_source = s.f3.as_ref().or(s.f2.as_ref());
            if let Some(f) = &s.f3 {
                rec.f3 = put("f3", feature_map_tensor(f))?;
            }
            if let Some(f) = valid_source.filter(|f| f.num_valid() < f.num_pixels()) {
                rec.validity = put("valid", mask_tensor(f.validity(), f.height(), f.width())?)?;
            }
            if let (Some(g), Some((h, w))) = (&s.gt, s.grid()) {
                rec.gt = put("gt", mask_tensor(g, h, w)?)?;
            }
            rec.defect_modes = s.defect_modes.clone();
            samples.push(rec);
        }
    }
    header.has_2d = samples.iter().all(|r| r.f2.is_some()) && !samples.is_empty();
    header.has_3d = samples.iter().all(|r| r.f3.is_some()) && !samples.is_empty();
    let manifest = DatasetManifest { header, samples };
    manifest.validate()?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Writes the run's synthetic dataset under `dir`.
pub fn write_synth_dataset(dir: &Path, cfg: &RunConfig) -> Result<DatasetManifest> {
    let (train, test) = synth_samples(cfg)?;
    let s = &cfg.synth;
    let mut header = ManifestHeader::new(
        cfg.mode.needs_2d(),
        cfg.mode.needs_3d(),
        [s.height, s.width],
        cfg.mode.needs_2d().then_some(s.d2),
        cfg.mode.needs_3d().then_some(s.d3),
        cfg.seed,
    );
    header.provenance = format!("synthgen seed={} derived={}", cfg.seed, derive_seed(cfg.seed, "synth"));
    write_dataset(dir, header, &train, &test)
}

/// Point-cloud preprocessing: outlier flagging, chunking, normalization, a
/// seeded split of the chunks, and pseudo-images as 3D-only samples.
pub fn polyprep_samples(scans: &[(String, Vec<Point>)], cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let p = &cfg.polyprep;
    p.validate()?;
    let side = p.pseudo_image_side;
    if side * side != p.chunk_size {
        return Err(Error::Config(format!("pseudo-image side {side} does not tile chunks of {}", p.chunk_size)));
    }
    let mut chunks = Vec::new();
    for (id, points) in scans {
        chunks.extend(polyprep::preprocess_scan(points, id, p, cfg.seed)?);
    }
    let split = polyprep::split_dataset(&chunks, p.train_fraction, &mut SeededRng::derived(cfg.seed, "polyprep/split"))?;
    let to_sample = |i: usize| -> Result<Sample> {
        let c = &chunks[i];
        Ok(Sample {
            id: format!("{}_{:04}", c.scan_id, c.chunk_index),
            anomalous: c.is_anomalous(),
            f2: None,
            f3: Some(polyprep::pseudo_image(&c.points, side)?),
            gt: Some(polyprep::pseudo_image_mask(&c.outlier_mask, side)?),
            defect_modes: Vec::new(),
        })
    };
    let train = split.train.iter().map(|&i| to_sample(i)).collect::<Result<Vec<_>>>()?;
    let test = split.test.iter().map(|&i| to_sample(i)).collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

pub fn write_polyprep_dataset(dir: &Path, scans: &[(String, Vec<Point>)], cfg: &RunConfig) -> Result<DatasetManifest> {
    let (train, test) = polyprep_samples(scans, cfg)?;
    let side = cfg.polyprep.pseudo_image_side;
    let mut header = ManifestHeader::new(false, true, [side, side], None, Some(3), cfg.seed);
    header.provenance = format!("polyprep scans={}", scans.iter().map(|s| s.0.as_str()).collect::<Vec<_>>().join(","));
    write_dataset(dir, header, &train, &test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(mode: Mode) -> RunConfig {
        let mut cfg = RunConfig { seed: 3, mode, ..RunConfig::default() };
        cfg.synth = SynthConfig { height: 16, width: 16, d2: 4, d3: 3, radius_min: 2.0, radius_max: 4.0, dropout: 0.1, ..SynthConfig::default() };
        cfg.synth_counts = crate::io::SynthCounts { train: 3, test_nominal: 2, test_anomalous: 2 };
        cfg.decoder2d.latent = 8;
        cfg.decoder3d.latent = 8;
        cfg.train.epochs = 2;
        cfg.fusion.gate_window = 5;
        cfg
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Joint, Mode::TwoD, Mode::ThreeD] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("4d".parse::<Mode>().is_err());
    }

    #[test]
    fn every_mode_trains_and_scores() {
        for mode in [Mode::Joint, Mode::TwoD, Mode::ThreeD] {
            let cfg = tiny_cfg(mode);
            let (train_set, test) = synth_samples(&cfg).unwrap();
            let (bundle, summary) = train(&train_set, &cfg).unwrap();
            let expected = match mode {
                Mode::Joint => 4,
                _ => 1,
            };
            assert_eq!(summary.reports.len(), expected);
            let results = infer_all(&bundle, &test, &cfg.fusion).unwrap();
            let report = evaluate(&results, &test, &[0.3]).unwrap();
            assert!((0.0..=1.0).contains(&report.i_auroc));
            assert!(report.p_auroc.is_some());
        }
    }

    #[test]
    fn missing_modality_is_reported() {
        let cfg = tiny_cfg(Mode::Joint);
        let (train_set, _) = synth_samples(&tiny_cfg(Mode::ThreeD)).unwrap();
        assert!(matches!(train(&train_set, &cfg), Err(Error::ModalityUnavailable(_))));
    }

    #[test]
    fn anomalous_training_data_is_refused() {
        let cfg = tiny_cfg(Mode::ThreeD);
        let (_, test) = synth_samples(&cfg).unwrap();
        assert!(matches!(train(&test, &cfg), Err(Error::ProtocolViolation(_))));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_inference() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(Mode::Joint);
        let (train_set, test) = synth_samples(&cfg).unwrap();
        let (bundle, _) = train(&train_set, &cfg).unwrap();
        save_checkpoint(dir.path(), &bundle).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(infer(&back, &test[3], &cfg.fusion).unwrap(), infer(&bundle, &test[3], &cfg.fusion).unwrap());
    }

    #[test]
    fn ablation_has_one_row_per_variant() {
        let cfg = tiny_cfg(Mode::Joint);
        let (train_set, test) = synth_samples(&cfg).unwrap();
        let (bundle, _) = train(&train_set, &cfg).unwrap();
        let rows = ablate(&bundle, &test, &cfg.fusion, &[0.3, 0.01]).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| r.report.aupro.len() == 2));
        let table = format_ablation(&rows);
        assert_eq!(table.lines().count(), 8);
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(Mode::Joint);
        let m = write_synth_dataset(dir.path(), &cfg).unwrap();
        let store = crate::io::SampleStore::open(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(store.manifest(), &m);
        let (train_set, test) = synth_samples(&cfg).unwrap();
        assert_eq!(store.load_split(Split::Train).unwrap(), train_set);
        assert_eq!(store.load_split(Split::Test).unwrap(), test);
    }
}

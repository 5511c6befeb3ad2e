//! Synthetic dataset generation, azimuth-protocol splits, end-to-end
//! training of the fused classifier and its ablations, metrics, and run
//! reports.
//!
//! Templates are ground-plane component layouts. A sample renders one
//! template at one azimuth: rotate the layout, drop components outside their
//! visibility window, jitter amplitudes, lift ground coordinates into the
//! slant plane, synthesize the complex image, and optionally add complex
//! Gaussian noise at a requested SNR. The sample's graph always comes from
//! re-estimating centers out of that image, never from the ground truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::asc_model::SynthWorkspace;
use crate::core_types::{
    Complex64Image, LdsfError, RadarConfig, Result, ScatterSet, ScattererParams,
};
use crate::extraction::{extract_all, ExtractionConfig};
use crate::fusion_loss::{
    classify, cross_entropy_batch, cut_distance, fuse, fusion_register, topology_loss, total_loss,
    FusionConfig, TopoSample,
};
use crate::graph_build::{build_graph, GroundGeometry, HeteroGraph};
use crate::gvf::{
    gvf_forward, gvf_logits, gvf_register, gvf_register_head, sparsity_loss, GvfConfig, PruneState,
};
use crate::lemsf::{lemsf_forward, lemsf_register, LemsfConfig};
use crate::nn_core::{Init, ParamStore, Tape, Var};
use crate::optim::OptimConfig;

const SPLIT_SALT: u64 = 0x5041_5254;
const TRAIN_SALT: u64 = 0x5452_4149;
const EVAL_SEED: u64 = 0;

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// One component of a target layout: a base scattering center in ground
/// coordinates, the azimuth window over which it returns energy, and a
/// relative amplitude jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateComponent {
    pub base: ScattererParams,
    /// Inclusive azimuth visibility window [lo, hi] in radians; wraps when
    /// lo > hi. (−π, π) means always visible.
    pub visibility: (f64, f64),
    /// Multiplicative amplitude jitter σ (A ← A·(1 + σ·n), n ~ N(0, 1)).
    pub amp_jitter: f64,
}

/// A target class: a named component layout plus descriptive symmetry tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTemplate {
    pub class_name: String,
    pub components: Vec<TemplateComponent>,
    #[serde(default)]
    pub symmetry: Vec<String>,
}

impl TargetTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.components.len() < 3 {
            return Err(LdsfError::InvalidParameter(format!(
                "template '{}' has {} components, need at least 3",
                self.class_name,
                self.components.len()
            )));
        }
        for c in &self.components {
            c.base.validate()?;
            if !(0.0..1.0).contains(&c.amp_jitter) {
                return Err(LdsfError::InvalidParameter(format!(
                    "amp_jitter must be in [0, 1), got {}",
                    c.amp_jitter
                )));
            }
        }
        Ok(())
    }
}

/// Validates every template and rejects duplicate class names or pairwise
/// identical component layouts.
pub fn validate_templates(templates: &[TargetTemplate]) -> Result<()> {
    if templates.len() < 2 {
        return Err(LdsfError::InvalidParameter(
            "need at least 2 target classes".into(),
        ));
    }
    for t in templates {
        t.validate()?;
    }
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            if templates[i].class_name == templates[j].class_name {
                return Err(LdsfError::InvalidParameter(format!(
                    "duplicate class name '{}'",
                    templates[i].class_name
                )));
            }
            if templates[i].components == templates[j].components {
                return Err(LdsfError::InvalidParameter(format!(
                    "classes '{}' and '{}' share an identical layout",
                    templates[i].class_name, templates[j].class_name
                )));
            }
        }
    }
    Ok(())
}

/// True when `az` (wrapped to [−π, π)) lies inside the inclusive window.
pub fn azimuth_in_window(az: f64, (lo, hi): (f64, f64)) -> bool {
    let az = wrap_angle(az);
    if lo <= hi {
        az >= lo && az <= hi
    } else {
        az >= lo || az <= hi
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

const FULL_CIRCLE: (f64, f64) = (-PI, PI);

/// Three stock layouts with overlapping amplitude ranges, so geometry and
/// topology (not brightness) carry the class signal: a square of corner
/// returns, a five-point cross with two extended arms, and a collinear
/// string with one broadside flash.
pub fn default_templates() -> Vec<TargetTemplate> {
    let deg = |d: f64| d.to_radians();
    let comp = |base: ScattererParams, visibility: (f64, f64)| TemplateComponent {
        base,
        visibility,
        amp_jitter: 0.08,
    };
    vec![
        TargetTemplate {
            class_name: "boxy".into(),
            symmetry: vec!["c4-approx".into()],
            components: vec![
                comp(ScattererParams::local(1.0, 1.0, 1.2, 1.2, 0.0), FULL_CIRCLE),
                comp(ScattererParams::local(0.95, 1.0, 1.2, -1.2, 0.0), FULL_CIRCLE),
                comp(ScattererParams::local(1.05, 1.0, -1.2, 1.2, 0.0), FULL_CIRCLE),
                comp(
                    ScattererParams::local(0.9, 1.0, -1.2, -1.2, 2e-10),
                    FULL_CIRCLE,
                ),
                comp(ScattererParams::local(0.8, 0.0, 0.0, 0.0, 0.0), FULL_CIRCLE),
                comp(
                    ScattererParams::distributed(0.9, 0.5, 2.4, 0.0, 0.0, 1.2),
                    (deg(-60.0), deg(60.0)),
                ),
            ],
        },
        TargetTemplate {
            class_name: "cross".into(),
            symmetry: vec!["c2".into()],
            components: vec![
                comp(ScattererParams::local(1.1, 1.0, 0.0, 0.0, 0.0), FULL_CIRCLE),
                comp(ScattererParams::local(0.85, 0.5, 1.5, 0.0, 0.0), FULL_CIRCLE),
                comp(ScattererParams::local(0.9, 0.5, -1.5, 0.0, 0.0), FULL_CIRCLE),
                comp(ScattererParams::local(0.8, 0.0, 0.0, 1.5, 0.0), FULL_CIRCLE),
                comp(
                    ScattererParams::local(0.95, 0.0, 0.0, -1.5, 2e-10),
                    FULL_CIRCLE,
                ),
                comp(
                    ScattererParams::distributed(0.8, 0.5, 3.0, 0.0, 0.4, 0.4),
                    (deg(-45.0), deg(45.0)),
                ),
                comp(
                    ScattererParams::distributed(0.8, 0.0, 2.2, 0.01, -0.4, -0.4),
                    (deg(45.0), deg(135.0)),
                ),
            ],
        },
        TargetTemplate {
            class_name: "linear".into(),
            symmetry: vec!["mirror-x".into()],
            components: vec![
                comp(ScattererParams::local(0.9, 1.0, -1.8, 0.0, 0.0), FULL_CIRCLE),
                comp(ScattererParams::local(1.0, 0.5, -0.9, 0.0, 0.0), FULL_CIRCLE),
                comp(ScattererParams::local(1.1, 0.0, 0.0, 0.0, 0.0), FULL_CIRCLE),
                comp(ScattererParams::local(1.0, 0.5, 0.9, 0.0, 0.0), FULL_CIRCLE),
                comp(ScattererParams::local(0.9, 1.0, 1.8, 0.0, 0.0), FULL_CIRCLE),
                comp(
                    ScattererParams::local(0.7, 0.0, 0.0, 0.9, 0.0),
                    (deg(-90.0), deg(90.0)),
                ),
                comp(
                    ScattererParams::distributed(0.85, 0.5, 3.6, 0.0, 0.0, -0.9),
                    (deg(-30.0), deg(30.0)),
                ),
            ],
        },
    ]
}

// ---------------------------------------------------------------------------
// Dataset synthesis
// ---------------------------------------------------------------------------

/// Sampling plan for one generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_per_class: usize,
    /// Azimuth grid step in degrees (samples cycle over the grid cells and
    /// draw a uniform offset inside the cell).
    pub azimuth_step_deg: f64,
    /// Per-pixel complex Gaussian noise level; `None` is noiseless.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub snr_db: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_per_class: 60,
            azimuth_step_deg: 5.0,
            snr_db: Some(20.0),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 1 {
            return Err(LdsfError::InvalidParameter(
                "n_per_class must be >= 1".into(),
            ));
        }
        if !(self.azimuth_step_deg > 0.0 && self.azimuth_step_deg <= 360.0) {
            return Err(LdsfError::InvalidParameter(format!(
                "azimuth_step_deg must be in (0, 360], got {}",
                self.azimuth_step_deg
            )));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(LdsfError::InvalidParameter(
                    "snr_db must be finite (use null for noiseless)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A rendered sample before center re-estimation.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub label: usize,
    pub azimuth_rad: f64,
    pub image: Complex64Image,
    pub truth: ScatterSet,
}

/// A fully processed sample. The invariant `id == index in Dataset::samples`
/// lets splits address samples by id.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub azimuth_rad: f64,
    pub image: Complex64Image,
    /// Ground-truth centers (slant plane, post-jitter, visible only).
    pub truth: ScatterSet,
    /// Centers re-estimated from the image.
    pub estimated: ScatterSet,
    /// Component graph built from the re-estimated centers.
    pub graph: HeteroGraph,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub radar: RadarConfig,
    pub azimuth_step_deg: f64,
    pub samples: Vec<Sample>,
}

/// Renders one template at one azimuth: rotate the ground layout, apply
/// visibility windows and amplitude jitter, lift into the slant plane,
/// synthesize, and add noise when `snr_db` is set.
pub fn render_sample(
    template: &TargetTemplate,
    azimuth: f64,
    snr_db: Option<f64>,
    ws: &mut SynthWorkspace,
    rng: &mut ChaCha8Rng,
) -> Result<(Complex64Image, ScatterSet)> {
    let geom = GroundGeometry::from(ws.config());
    let slant_scale = 1.0 / (geom.depression.cos() * geom.squint.cos());
    let (sin_a, cos_a) = azimuth.sin_cos();
    let mut centers = Vec::new();
    for comp in &template.components {
        if !azimuth_in_window(azimuth, comp.visibility) {
            continue;
        }
        let gx = comp.base.x * cos_a - comp.base.y * sin_a;
        let gy = comp.base.x * sin_a + comp.base.y * cos_a;
        let jitter: f64 = rng.sample(StandardNormal);
        let mut c = comp.base;
        c.a = (comp.base.a * (1.0 + comp.amp_jitter * jitter)).max(1e-3);
        c.x = gx * slant_scale;
        c.y = gy;
        centers.push(c);
    }
    if centers.is_empty() {
        return Err(LdsfError::InvalidInput(format!(
            "template '{}' has no visible component at azimuth {:.3} rad",
            template.class_name, azimuth
        )));
    }
    let truth = ScatterSet::new(centers);
    let mut image = ws.synthesize(&truth);
    if let Some(snr) = snr_db {
        add_complex_noise(&mut image, snr, rng);
    }
    Ok((image, truth))
}

/// Adds circular complex Gaussian noise so that the per-image energy ratio
/// (signal / noise) is `snr_db` in expectation.
fn add_complex_noise(image: &mut Complex64Image, snr_db: f64, rng: &mut ChaCha8Rng) {
    let es = image.energy();
    let n = image.data.len() as f64;
    let sigma2 = es / (n * 10f64.powf(snr_db / 10.0));
    let s = (sigma2 / 2.0).sqrt();
    for v in &mut image.data {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        v.re += s * re;
        v.im += s * im;
    }
}

/// Renders the full image set: labels cycle class-major, azimuths cycle the
/// grid with a uniform in-cell offset, all draws from one seeded stream.
pub fn render_dataset(
    templates: &[TargetTemplate],
    ds: &DatasetConfig,
    radar: &RadarConfig,
    seed: u64,
) -> Result<Vec<RawSample>> {
    validate_templates(templates)?;
    ds.validate()?;
    let mut ws = SynthWorkspace::new(radar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = ds.azimuth_step_deg.to_radians();
    let n_cells = ((2.0 * PI / step).round() as usize).max(1);
    let mut out = Vec::with_capacity(templates.len() * ds.n_per_class);
    for (label, template) in templates.iter().enumerate() {
        for i in 0..ds.n_per_class {
            let cell = i % n_cells;
            let u: f64 = rng.random::<f64>();
            let azimuth_rad = -PI + (cell as f64 + u) * step;
            let (image, truth) = render_sample(template, azimuth_rad, ds.snr_db, &mut ws, &mut rng)?;
            out.push(RawSample {
                label,
                azimuth_rad,
                image,
                truth,
            });
        }
    }
    Ok(out)
}

/// Renders and then runs the estimation pipeline per sample: extract centers
/// from the image and build the component graph from the estimates.
pub fn synth_dataset(
    templates: &[TargetTemplate],
    ds: &DatasetConfig,
    radar: &RadarConfig,
    ext: &ExtractionConfig,
    seed: u64,
) -> Result<Dataset> {
    let raws = render_dataset(templates, ds, radar, seed)?;
    let geom = GroundGeometry::from(radar);
    let mut samples = Vec::with_capacity(raws.len());
    for (id, raw) in raws.into_iter().enumerate() {
        let (estimated, _trace) = extract_all(&raw.image, ext)?;
        if estimated.count() == 0 {
            return Err(LdsfError::InvalidInput(format!(
                "sample {id} produced no extractable centers; raise the SNR \
                 or lower min_peak_db"
            )));
        }
        let graph = build_graph(&estimated, &geom)?;
        samples.push(Sample {
            id,
            label: raw.label,
            azimuth_rad: raw.azimuth_rad,
            image: raw.image,
            truth: raw.truth,
            estimated,
            graph,
        });
    }
    Ok(Dataset {
        classes: templates.iter().map(|t| t.class_name.clone()).collect(),
        radar: *radar,
        azimuth_step_deg: ds.azimuth_step_deg,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Evaluation protocol: full-circle stratified operating conditions, or
/// training azimuths limited to a sector while testing stays full-circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Soc,
    Lfm1,
    Lfm2,
    Lfm3,
}

impl Protocol {
    /// The azimuth interval training samples must fall in, degrees.
    pub fn train_window_deg(self) -> Option<(f64, f64)> {
        match self {
            Protocol::Soc => None,
            Protocol::Lfm1 => Some((-180.0, 90.0)),
            Protocol::Lfm2 => Some((-90.0, 90.0)),
            Protocol::Lfm3 => Some((0.0, 90.0)),
        }
    }

    pub const ALL: [Protocol; 4] = [Protocol::Soc, Protocol::Lfm1, Protocol::Lfm2, Protocol::Lfm3];
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Protocol::Soc => "soc",
            Protocol::Lfm1 => "lfm1",
            Protocol::Lfm2 => "lfm2",
            Protocol::Lfm3 => "lfm3",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Protocol {
    type Err = LdsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soc" => Ok(Protocol::Soc),
            "lfm1" => Ok(Protocol::Lfm1),
            "lfm2" => Ok(Protocol::Lfm2),
            "lfm3" => Ok(Protocol::Lfm3),
            other => Err(LdsfError::InvalidParameter(format!(
                "unknown protocol '{other}' (expected soc|lfm1|lfm2|lfm3)"
            ))),
        }
    }
}

/// Train/test sample ids under one protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub protocol: Protocol,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified 50/50 partition per (class, azimuth-grid cell); LFM protocols
/// then restrict the training half to their azimuth window. The test half is
/// identical across protocols for a fixed seed.
pub fn build_splits(dataset: &Dataset, protocol: Protocol, seed: u64) -> Result<SplitSet> {
    if dataset.samples.is_empty() {
        return Err(LdsfError::InvalidInput("empty dataset".into()));
    }
    let step = dataset.azimuth_step_deg.to_radians();
    let n_cells = ((2.0 * PI / step).round() as usize).max(1);
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for s in &dataset.samples {
        let cell = (((s.azimuth_rad + PI) / step).floor() as usize).min(n_cells - 1);
        buckets.entry((s.label, cell)).or_default().push(s.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut odd_to_train = false;
    for ids in buckets.values() {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        let mut take = ids.len() / 2;
        if ids.len() % 2 == 1 {
            if odd_to_train {
                take += 1;
            }
            odd_to_train = !odd_to_train;
        }
        train.extend_from_slice(&ids[..take]);
        test.extend_from_slice(&ids[take..]);
    }
    if let Some((lo_deg, hi_deg)) = protocol.train_window_deg() {
        let (lo, hi) = (lo_deg.to_radians(), hi_deg.to_radians());
        train.retain(|&id| {
            let az = dataset.samples[id].azimuth_rad;
            az >= lo && az <= hi
        });
    }
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        return Err(LdsfError::InvalidInput(format!(
            "protocol {protocol} yields an empty split"
        )));
    }
    Ok(SplitSet {
        protocol,
        train,
        test,
    })
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

/// Which parts of the network train, and how branch features combine.
/// `Full` is low-rank bilinear fusion with the topology loss; `NoTopology`
/// keeps the fusion but sets λ_g = 0; the remaining `Fusion*` modes replace
/// the bilinear combiner with a fixed elementwise rule plus a linear head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Full,
    LemsfOnly,
    GvfOnly,
    NoTopology,
    FusionConcat,
    FusionMax,
    FusionMin,
    FusionMean,
}

impl AblationMode {
    pub fn uses_lemsf(self) -> bool {
        !matches!(self, AblationMode::GvfOnly)
    }

    pub fn uses_gvf(self) -> bool {
        !matches!(self, AblationMode::LemsfOnly)
    }

    /// The λ_g actually applied to the topology term.
    pub fn lambda_eff(self, lambda_g: f64) -> f64 {
        if self == AblationMode::NoTopology {
            0.0
        } else {
            lambda_g
        }
    }

    /// Input width of the auxiliary linear head, for the modes that have one.
    fn head_dim(self, lemsf: &LemsfConfig, gvf: &GvfConfig) -> Option<usize> {
        match self {
            AblationMode::LemsfOnly => Some(lemsf.hidden),
            AblationMode::FusionConcat => Some(lemsf.hidden + gvf.feature_dim()),
            AblationMode::FusionMax | AblationMode::FusionMin | AblationMode::FusionMean => {
                Some(lemsf.hidden)
            }
            AblationMode::Full | AblationMode::NoTopology | AblationMode::GvfOnly => None,
        }
    }

    pub const ALL: [AblationMode; 8] = [
        AblationMode::Full,
        AblationMode::LemsfOnly,
        AblationMode::GvfOnly,
        AblationMode::NoTopology,
        AblationMode::FusionConcat,
        AblationMode::FusionMax,
        AblationMode::FusionMin,
        AblationMode::FusionMean,
    ];
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AblationMode::Full => "full",
            AblationMode::LemsfOnly => "lemsf-only",
            AblationMode::GvfOnly => "gvf-only",
            AblationMode::NoTopology => "no-topology",
            AblationMode::FusionConcat => "fusion-concat",
            AblationMode::FusionMax => "fusion-max",
            AblationMode::FusionMin => "fusion-min",
            AblationMode::FusionMean => "fusion-mean",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for AblationMode {
    type Err = LdsfError;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                LdsfError::InvalidParameter(format!(
                    "unknown ablation mode '{s}' (expected one of full, lemsf-only, gvf-only, \
                     no-topology, fusion-concat, fusion-max, fusion-min, fusion-mean)"
                ))
            })
    }
}

/// A trained (or training) classifier: parameters plus everything needed to
/// rebuild its forward pass.
#[derive(Debug, Clone)]
pub struct LdsfModel {
    pub store: ParamStore,
    pub mode: AblationMode,
    pub classes: Vec<String>,
    pub lemsf: LemsfConfig,
    pub gvf: GvfConfig,
    pub fusion: FusionConfig,
    pub prune: Option<PruneState>,
}

/// Borrowed view used while the store is owned elsewhere (training loop).
pub struct ModelView<'a> {
    pub store: &'a ParamStore,
    pub mode: AblationMode,
    pub lemsf: &'a LemsfConfig,
    pub gvf: &'a GvfConfig,
    pub fusion: &'a FusionConfig,
    pub prune: Option<&'a PruneState>,
    pub classes: usize,
}

impl LdsfModel {
    pub fn view(&self) -> ModelView<'_> {
        ModelView {
            store: &self.store,
            mode: self.mode,
            lemsf: &self.lemsf,
            gvf: &self.gvf,
            fusion: &self.fusion,
            prune: self.prune.as_ref(),
            classes: self.classes.len(),
        }
    }
}

fn validate_mode_dims(mode: AblationMode, lemsf: &LemsfConfig, gvf: &GvfConfig) -> Result<()> {
    if matches!(
        mode,
        AblationMode::FusionMax | AblationMode::FusionMin | AblationMode::FusionMean
    ) && lemsf.hidden != gvf.feature_dim()
    {
        return Err(LdsfError::InvalidParameter(format!(
            "elementwise fusion needs equal branch widths, got {} and {}",
            lemsf.hidden,
            gvf.feature_dim()
        )));
    }
    Ok(())
}

/// Registers every parameter group the mode needs on a fresh store.
pub fn register_model(
    seed: u64,
    mode: AblationMode,
    classes: usize,
    lemsf: &LemsfConfig,
    gvf: &GvfConfig,
    fusion: &FusionConfig,
) -> Result<ParamStore> {
    if classes < 2 {
        return Err(LdsfError::InvalidParameter(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    validate_mode_dims(mode, lemsf, gvf)?;
    let mut store = ParamStore::new(seed);
    if mode.uses_lemsf() {
        lemsf_register(&mut store, lemsf)?;
    }
    if mode.uses_gvf() {
        gvf_register(&mut store, gvf)?;
    }
    match mode {
        AblationMode::Full | AblationMode::NoTopology => {
            fusion_register(&mut store, fusion, lemsf.hidden, gvf.feature_dim())?;
        }
        AblationMode::GvfOnly => gvf_register_head(&mut store, gvf, classes)?,
        _ => {
            let dim = mode
                .head_dim(lemsf, gvf)
                .expect("non-fusion-subnet modes have a head");
            store.register("head.w", &[dim, classes], Init::Glorot)?;
            store.register("head.b", &[classes], Init::Zeros)?;
        }
    }
    Ok(store)
}

/// Magnitude image → GVF input: γ-corrected (square-root) magnitude,
/// average-pooled down to `size`×`size`, peak-normalized to [0, 1].
pub fn gvf_input(image: &Complex64Image, size: usize) -> Result<Vec<f64>> {
    if size == 0 || image.rows % size != 0 || image.cols % size != 0 {
        return Err(LdsfError::DimensionMismatch(format!(
            "cannot pool a {}x{} image to {size}x{size}",
            image.rows, image.cols
        )));
    }
    let mag = image.magnitude().gamma_transform(1.0, 0.5)?;
    let fr = image.rows / size;
    let fc = image.cols / size;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut acc = 0.0;
            for dr in 0..fr {
                for dc in 0..fc {
                    acc += mag.at(r * fr + dr, c * fc + dc);
                }
            }
            out[r * size + c] = acc / (fr * fc) as f64;
        }
    }
    let peak = out.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(out)
}

/// Tape handles from one sample's forward pass.
pub struct SampleForward {
    pub logits: Var,
    /// Graph attention scores when the graph branch ran.
    pub z: Option<Var>,
    /// χ scale handles when the visual branch ran.
    pub chi: Vec<Var>,
}

fn flat(tape: &mut Tape, v: Var) -> Result<Var> {
    if tape.shape(v).len() == 1 {
        return Ok(v);
    }
    let idx: Vec<usize> = (0..tape.value(v).len()).collect();
    tape.gather(v, &idx)
}

fn head_logits(
    tape: &mut Tape,
    store: &ParamStore,
    v: Var,
    in_dim: usize,
    classes: usize,
) -> Result<Var> {
    let w = tape.param(store, "head.w")?;
    let b = tape.param(store, "head.b")?;
    tape.dense(v, w, b, 1, in_dim, classes)
}

/// Runs one sample through the mode's architecture on `tape`.
pub fn forward_sample(
    tape: &mut Tape,
    m: &ModelView<'_>,
    sample: &Sample,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<SampleForward> {
    let mut z = None;
    let mut chi = Vec::new();
    let v_l = if m.mode.uses_lemsf() {
        let out = lemsf_forward(tape, &sample.graph, m.store, m.lemsf, training, rng)?;
        z = Some(out.z);
        Some(out.v)
    } else {
        None
    };
    let v_g = if m.mode.uses_gvf() {
        let img = gvf_input(&sample.image, m.gvf.input_size)?;
        let out = gvf_forward(tape, &img, m.store, m.gvf, m.prune)?;
        chi = out.chi.iter().map(|&(_, v)| v).collect();
        Some(out.v)
    } else {
        None
    };
    let logits = match m.mode {
        AblationMode::Full | AblationMode::NoTopology => {
            let fused = fuse(tape, v_l.unwrap(), v_g.unwrap(), m.store, m.fusion)?;
            classify(tape, fused, m.store, m.fusion)?
        }
        AblationMode::LemsfOnly => {
            head_logits(tape, m.store, v_l.unwrap(), m.lemsf.hidden, m.classes)?
        }
        AblationMode::GvfOnly => gvf_logits(tape, v_g.unwrap(), m.store, m.classes)?,
        AblationMode::FusionConcat => {
            let cat = tape.concat(&[v_l.unwrap(), v_g.unwrap()])?;
            let dim = m.lemsf.hidden + m.gvf.feature_dim();
            head_logits(tape, m.store, cat, dim, m.classes)?
        }
        AblationMode::FusionMax | AblationMode::FusionMin | AblationMode::FusionMean => {
            let a = flat(tape, v_l.unwrap())?;
            let b = flat(tape, v_g.unwrap())?;
            let combined = match m.mode {
                AblationMode::FusionMax => {
                    let d = tape.sub(b, a)?;
                    let r = tape.relu(d);
                    tape.add(a, r)?
                }
                AblationMode::FusionMin => {
                    let d = tape.sub(a, b)?;
                    let r = tape.relu(d);
                    tape.sub(a, r)?
                }
                _ => {
                    let s = tape.add(a, b)?;
                    tape.scale(s, 0.5)
                }
            };
            head_logits(tape, m.store, combined, m.lemsf.hidden, m.classes)?
        }
    };
    Ok(SampleForward { logits, z, chi })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Loop controls. `patience` 0 disables early stopping; `stop_at_pcc` exits
/// as soon as the test PCC reaches the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stop_at_pcc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            patience: 30,
            stop_at_pcc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(LdsfError::InvalidParameter(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of history. `topo_loss` is absent for modes without the graph
/// branch; for the others it is the measured mean intra-class cut distance
/// of training batches (weighted into the objective by the effective λ_g).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub cls_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub topo_loss: Option<f64>,
    pub test_pcc: f64,
}

pub struct TrainOutcome {
    pub model: LdsfModel,
    pub history: Vec<EpochStats>,
    pub best_pcc: f64,
    pub epochs_run: usize,
}

struct BatchOutcome {
    loss: f64,
    cls: f64,
    topo: Option<f64>,
}

fn train_batch(
    store: &mut ParamStore,
    mode: AblationMode,
    lemsf: &LemsfConfig,
    gvf: &GvfConfig,
    fusion: &FusionConfig,
    dataset: &Dataset,
    ids: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let mut logits = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    let mut topo_samples = Vec::new();
    let mut all_chi = Vec::new();
    {
        let view = ModelView {
            store,
            mode,
            lemsf,
            gvf,
            fusion,
            prune: None,
            classes: dataset.classes.len(),
        };
        for &id in ids {
            let sample = &dataset.samples[id];
            let f = forward_sample(&mut tape, &view, sample, true, rng)?;
            logits.push(f.logits);
            labels.push(sample.label);
            if let Some(z) = f.z {
                topo_samples.push(TopoSample {
                    z,
                    a_norm: sample.graph.a_norm.clone(),
                    label: sample.label,
                });
            }
            all_chi.extend(f.chi);
        }
    }
    let cls = cross_entropy_batch(&mut tape, &logits, &labels, dataset.classes.len())?;
    let topo = if mode.uses_lemsf() {
        topology_loss(&mut tape, &topo_samples)?
    } else {
        None
    };
    let lambda = mode.lambda_eff(fusion.lambda_g);
    let mut loss = total_loss(&mut tape, cls, topo, lambda)?;
    if !all_chi.is_empty() {
        // One χ handle per sample per site: divide by the batch size so the
        // penalty stays the per-sample α·Σ|χ|.
        loss = sparsity_loss(&mut tape, loss, &all_chi, gvf.alpha_sparsity / ids.len() as f64)?;
    }
    store.zero_grads();
    tape.backward(loss)?;
    tape.apply_param_grads(store)?;
    let (lemsf_lr, gvf_lr, head_lr) = (lemsf.lr, gvf.lr, fusion.lr);
    store.adam_step_grouped(
        |name| {
            if name.starts_with("gvf.") {
                gvf_lr
            } else if name.starts_with("lemsf.") {
                lemsf_lr
            } else {
                head_lr
            }
        },
        (0.9, 0.999),
        1e-8,
    );
    Ok(BatchOutcome {
        loss: tape.value(loss)[0],
        cls: tape.value(cls)[0],
        topo: topo.map(|t| tape.value(t)[0]),
    })
}

/// Joint training under one protocol split. Deterministic for a fixed seed:
/// the parameter init, batch order, dropout masks, and noise all come from
/// seeded streams.
pub fn train_ldsf(
    dataset: &Dataset,
    split: &SplitSet,
    mode: AblationMode,
    lemsf: &LemsfConfig,
    gvf: &GvfConfig,
    fusion: &FusionConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let classes = dataset.classes.len();
    let mut fusion = fusion.clone();
    fusion.classes = classes;
    let mut store = register_model(seed, mode, classes, lemsf, gvf, &fusion)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRAIN_SALT);
    let mut history = Vec::new();
    let mut order = split.train.clone();
    let mut best_pcc = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_acc = 0.0;
        let mut cls_acc = 0.0;
        let mut topo_acc = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let out = train_batch(
                &mut store, mode, lemsf, gvf, &fusion, dataset, chunk, &mut rng,
            )?;
            let w = chunk.len() as f64;
            loss_acc += out.loss * w;
            cls_acc += out.cls * w;
            topo_acc += out.topo.unwrap_or(0.0) * w;
            count += chunk.len();
        }
        let view = ModelView {
            store: &store,
            mode,
            lemsf,
            gvf,
            fusion: &fusion,
            prune: None,
            classes,
        };
        let metrics = evaluate_view(&view, dataset, &split.test)?;
        let n = count as f64;
        history.push(EpochStats {
            epoch,
            train_loss: loss_acc / n,
            cls_loss: cls_acc / n,
            topo_loss: mode.uses_lemsf().then_some(topo_acc / n),
            test_pcc: metrics.pcc,
        });
        epochs_run = epoch + 1;
        if metrics.pcc > best_pcc + 1e-12 {
            best_pcc = metrics.pcc;
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(th) = tcfg.stop_at_pcc {
            if metrics.pcc >= th {
                break;
            }
        }
        if tcfg.patience > 0 && stale >= tcfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: LdsfModel {
            store,
            mode,
            classes: dataset.classes.clone(),
            lemsf: lemsf.clone(),
            gvf: gvf.clone(),
            fusion,
            prune: None,
        },
        history,
        best_pcc,
        epochs_run,
    })
}

// ---------------------------------------------------------------------------
// Metrics and evaluation
// ---------------------------------------------------------------------------

/// Confusion counts (rows = truth, columns = prediction) and the fraction
/// correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Vec<Vec<usize>>,
    pub pcc: f64,
}

impl Metrics {
    /// Builds the confusion matrix from (truth, prediction) pairs.
    pub fn from_predictions(pairs: &[(usize, usize)], classes: usize) -> Result<Metrics> {
        if pairs.is_empty() {
            return Err(LdsfError::InvalidInput(
                "cannot score an empty prediction set".into(),
            ));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for &(truth, pred) in pairs {
            if truth >= classes || pred >= classes {
                return Err(LdsfError::InvalidInput(format!(
                    "label pair ({truth}, {pred}) out of range for {classes} classes"
                )));
            }
            confusion[truth][pred] += 1;
        }
        let trace: usize = (0..classes).map(|i| confusion[i][i]).sum();
        Ok(Metrics {
            confusion,
            pcc: trace as f64 / pairs.len() as f64,
        })
    }
}

fn evaluate_view(m: &ModelView<'_>, dataset: &Dataset, ids: &[usize]) -> Result<Metrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let mut pairs = Vec::with_capacity(ids.len());
    for &id in ids {
        let sample = &dataset.samples[id];
        let mut tape = Tape::new();
        let f = forward_sample(&mut tape, m, sample, false, &mut rng)?;
        let vals = tape.value(f.logits);
        let pred = (0..m.classes)
            .max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
            .expect("at least two classes");
        pairs.push((sample.label, pred));
    }
    Metrics::from_predictions(&pairs, m.classes)
}

/// Scores a model on the listed sample ids. The model must have been trained
/// for this dataset's class count.
pub fn evaluate_model(model: &LdsfModel, dataset: &Dataset, ids: &[usize]) -> Result<Metrics> {
    if model.classes.len() != dataset.classes.len() {
        return Err(LdsfError::Format(format!(
            "checkpoint was trained for {} classes, dataset has {}",
            model.classes.len(),
            dataset.classes.len()
        )));
    }
    evaluate_view(&model.view(), dataset, ids)
}

/// Mean pairwise cut distance between same-class samples, computed from the
/// graph branch's attention scores in eval mode. `None` when the mode has no
/// graph branch or no class has two samples.
pub fn mean_intraclass_cut(model: &LdsfModel, dataset: &Dataset, ids: &[usize]) -> Result<Option<f64>> {
    if !model.mode.uses_lemsf() {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let mut scored: Vec<(usize, Vec<f64>, &[f64])> = Vec::with_capacity(ids.len());
    for &id in ids {
        let sample = &dataset.samples[id];
        let mut tape = Tape::new();
        let out = lemsf_forward(
            &mut tape,
            &sample.graph,
            &model.store,
            &model.lemsf,
            false,
            &mut rng,
        )?;
        scored.push((
            sample.label,
            tape.value(out.z).to_vec(),
            &sample.graph.a_norm,
        ));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..scored.len() {
        for j in i + 1..scored.len() {
            if scored[i].0 != scored[j].0 {
                continue;
            }
            let mut tape = Tape::new();
            let za = tape.constant(vec![scored[i].1.len()], scored[i].1.clone())?;
            let zb = tape.constant(vec![scored[j].1.len()], scored[j].1.clone())?;
            let cd = cut_distance(&mut tape, za, scored[i].2, zb, scored[j].2)?;
            acc += tape.value(cd)[0];
            count += 1;
        }
    }
    Ok((count > 0).then(|| acc / count as f64))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    mode: AblationMode,
    classes: Vec<String>,
    lemsf: LemsfConfig,
    gvf: GvfConfig,
    fusion: FusionConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    prune: Option<PruneState>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    experiment: Option<ExperimentConfig>,
}

/// Writes `{stem}.json` + `{stem}.bin` under `dir` and returns the blob
/// digest. `experiment` travels inside the manifest so `eval` can rebuild
/// the dataset later.
pub fn save_model(
    model: &LdsfModel,
    dir: &Path,
    stem: &str,
    experiment: Option<&ExperimentConfig>,
) -> Result<String> {
    let meta = ModelMeta {
        mode: model.mode,
        classes: model.classes.clone(),
        lemsf: model.lemsf.clone(),
        gvf: model.gvf.clone(),
        fusion: model.fusion.clone(),
        prune: model.prune.clone(),
        experiment: experiment.cloned(),
    };
    model
        .store
        .save_checkpoint(dir, stem, &serde_json::to_value(&meta)?)
}

/// Loads a model checkpoint, returning the model and the embedded experiment
/// configuration when one was saved.
pub fn load_model(dir: &Path, stem: &str) -> Result<(LdsfModel, Option<ExperimentConfig>)> {
    let (store, meta_value) = ParamStore::load_checkpoint(dir, stem)?;
    let meta: ModelMeta = serde_json::from_value(meta_value)
        .map_err(|e| LdsfError::Format(format!("checkpoint metadata does not parse: {e}")))?;
    Ok((
        LdsfModel {
            store,
            mode: meta.mode,
            classes: meta.classes,
            lemsf: meta.lemsf,
            gvf: meta.gvf,
            fusion: meta.fusion,
            prune: meta.prune,
        },
        meta.experiment,
    ))
}

// ---------------------------------------------------------------------------
// Experiments, run records, reports
// ---------------------------------------------------------------------------

/// The one JSON document the CLI reads: radar geometry, extraction budget,
/// dataset plan, templates, and every network/training hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub radar: RadarConfig,
    pub extraction: ExtractionConfig,
    pub dataset: DatasetConfig,
    pub templates: Vec<TargetTemplate>,
    pub lemsf: LemsfConfig,
    pub gvf: GvfConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    /// Depression angle (degrees) of the shifted-geometry evaluation
    /// scenario generated after SOC training; `None` disables it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eoc_depression_deg: Option<f64>,
}

/// A 64×64 desk-scale grid with the default 0.3 m resolution.
pub fn toy_radar(n: usize) -> RadarConfig {
    RadarConfig {
        nf: n,
        nphi: n,
        ..RadarConfig::default()
    }
}

/// Extraction budget tuned for dataset generation throughput: the optimizer
/// tolerance and iteration cap are loosened, everything else is the default.
pub fn fast_extraction() -> ExtractionConfig {
    ExtractionConfig {
        optim: OptimConfig {
            tol: 1e-5,
            max_iter: 60,
            ..OptimConfig::default()
        },
        relax_sweeps: 0,
        ..ExtractionConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            radar: toy_radar(64),
            extraction: fast_extraction(),
            dataset: DatasetConfig::default(),
            templates: default_templates(),
            lemsf: LemsfConfig::default(),
            gvf: GvfConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            eoc_depression_deg: Some(30.0),
        }
    }
}

impl ExperimentConfig {
    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}

/// One scenario scored by one checkpoint. The digest ties the score to the
/// exact parameter blob, so a report can verify that every scenario of an
/// operating-condition study used the same trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEval {
    pub scenario: String,
    pub pcc: f64,
    pub checkpoint_sha256: String,
}

/// Everything one training run leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub protocol: Protocol,
    pub ablation: AblationMode,
    pub classes: Vec<String>,
    pub epochs_run: usize,
    pub final_pcc: f64,
    pub best_pcc: f64,
    pub checkpoint_sha256: String,
    pub history: Vec<EpochStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_intraclass_cut: Option<f64>,
    pub evals: Vec<ScenarioEval>,
}

impl RunRecord {
    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}

/// Runs the whole pipeline for one (protocol, ablation, seed): synthesize,
/// split, train, checkpoint, score the protocol test set, and — after SOC
/// training with `eoc_depression_deg` set — score the shifted-depression
/// scenario with the same checkpoint. Writes `{stem}.run.json` beside the
/// checkpoint and returns the record with the trained model.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    ablation: AblationMode,
    seed: u64,
    out_dir: &Path,
    stem: &str,
) -> Result<(RunRecord, LdsfModel)> {
    let dataset = synth_dataset(&cfg.templates, &cfg.dataset, &cfg.radar, &cfg.extraction, seed)?;
    let split = build_splits(&dataset, protocol, seed)?;
    let outcome = train_ldsf(
        &dataset, &split, ablation, &cfg.lemsf, &cfg.gvf, &cfg.fusion, &cfg.train, seed,
    )?;
    let sha = save_model(&outcome.model, out_dir, stem, Some(cfg))?;
    let mut evals = vec![ScenarioEval {
        scenario: format!("{protocol}-test"),
        pcc: evaluate_model(&outcome.model, &dataset, &split.test)?.pcc,
        checkpoint_sha256: sha.clone(),
    }];
    if protocol == Protocol::Soc {
        if let Some(dep_deg) = cfg.eoc_depression_deg {
            let radar = RadarConfig {
                depression: dep_deg.to_radians(),
                ..cfg.radar
            };
            let eoc =
                synth_dataset(&cfg.templates, &cfg.dataset, &radar, &cfg.extraction, seed)?;
            let eoc_split = build_splits(&eoc, Protocol::Soc, seed)?;
            evals.push(ScenarioEval {
                scenario: format!("eoc-d-like-{dep_deg:.0}deg"),
                pcc: evaluate_model(&outcome.model, &eoc, &eoc_split.test)?.pcc,
                checkpoint_sha256: sha.clone(),
            });
        }
    }
    let record = RunRecord {
        seed,
        protocol,
        ablation,
        classes: dataset.classes.clone(),
        epochs_run: outcome.epochs_run,
        final_pcc: outcome.history.last().map_or(0.0, |h| h.test_pcc),
        best_pcc: outcome.best_pcc,
        checkpoint_sha256: sha,
        history: outcome.history.clone(),
        final_intraclass_cut: mean_intraclass_cut(&outcome.model, &dataset, &split.train)?,
        evals,
    };
    record.save_json(&out_dir.join(format!("{stem}.run.json")))?;
    Ok((record, outcome.model))
}

/// Mean ± std of the protocol-test PCC over the runs in one
/// (ablation, protocol) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolStat {
    pub ablation: AblationMode,
    pub protocol: Protocol,
    pub runs: usize,
    pub mean_pcc: f64,
    pub std_pcc: f64,
}

/// Robustness summary for one ablation: SOC accuracy, the three restricted
/// protocols, and the mean PCC drop from SOC to the restricted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub ablation: AblationMode,
    pub soc_mean_pcc: f64,
    pub lfm_mean_pcc: [f64; 3],
    pub mean_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutStat {
    pub ablation: AblationMode,
    pub runs: usize,
    pub mean_final_cut: f64,
}

/// Aggregated view over many runs: per-group accuracy, the azimuth
/// robustness trend table, checkpoint-consistency of scenario evals, and
/// final intra-class cut distances per ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol_stats: Vec<ProtocolStat>,
    pub lfm_trend: Vec<TrendRow>,
    /// True when, in every run, all scenario evals used that run's
    /// checkpoint (the operating-condition rule: no retraining per
    /// scenario).
    pub ofa_consistent: bool,
    pub intraclass_cut: Vec<CutStat>,
}

impl Report {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_runs(records: &[RunRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(LdsfError::InvalidInput("no run records to aggregate".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.ablation.to_string(), r.protocol.to_string()))
            .or_default()
            .push(r.final_pcc);
    }
    let mut protocol_stats = Vec::new();
    for ((ab, pr), pccs) in &groups {
        let (mean, std) = mean_std(pccs);
        protocol_stats.push(ProtocolStat {
            ablation: ab.parse()?,
            protocol: pr.parse()?,
            runs: pccs.len(),
            mean_pcc: mean,
            std_pcc: std,
        });
    }

    let mut lfm_trend = Vec::new();
    let ablations: Vec<AblationMode> = {
        let mut seen = Vec::new();
        for r in records {
            if !seen.contains(&r.ablation) {
                seen.push(r.ablation);
            }
        }
        seen
    };
    for ab in &ablations {
        let get = |p: Protocol| -> Option<f64> {
            groups
                .get(&(ab.to_string(), p.to_string()))
                .map(|v| mean_std(v).0)
        };
        let (Some(soc), Some(l1), Some(l2), Some(l3)) = (
            get(Protocol::Soc),
            get(Protocol::Lfm1),
            get(Protocol::Lfm2),
            get(Protocol::Lfm3),
        ) else {
            continue;
        };
        lfm_trend.push(TrendRow {
            ablation: *ab,
            soc_mean_pcc: soc,
            lfm_mean_pcc: [l1, l2, l3],
            mean_drop: soc - (l1 + l2 + l3) / 3.0,
        });
    }

    let ofa_consistent = records.iter().all(|r| {
        r.evals
            .iter()
            .all(|e| e.checkpoint_sha256 == r.checkpoint_sha256)
    });

    let mut cut_groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Some(c) = r.final_intraclass_cut {
            cut_groups.entry(r.ablation.to_string()).or_default().push(c);
        }
    }
    let mut intraclass_cut = Vec::new();
    for (ab, cuts) in &cut_groups {
        intraclass_cut.push(CutStat {
            ablation: ab.parse()?,
            runs: cuts.len(),
            mean_final_cut: mean_std(cuts).0,
        });
    }

    Ok(Report {
        protocol_stats,
        lfm_trend,
        ofa_consistent,
        intraclass_cut,
    })
}

// ---------------------------------------------------------------------------
// Dataset directory I/O (the `synth` CLI output)
// ---------------------------------------------------------------------------

/// Index of one written dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub radar: RadarConfig,
    pub azimuth_step_deg: f64,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub label: usize,
    pub azimuth_rad: f64,
    pub image: String,
    pub truth: String,
}

/// Writes rendered samples as one container image + truth JSON per sample,
/// plus a `manifest.json` index.
pub fn save_dataset_dir(
    raws: &[RawSample],
    classes: &[String],
    radar: &RadarConfig,
    azimuth_step_deg: f64,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(raws.len());
    for (id, raw) in raws.iter().enumerate() {
        let image = format!("s{id:05}.csar");
        let truth = format!("s{id:05}.truth.json");
        raw.image.save_csar(dir.join(&image))?;
        raw.truth.save_json(dir.join(&truth))?;
        entries.push(ManifestEntry {
            id,
            label: raw.label,
            azimuth_rad: raw.azimuth_rad,
            image,
            truth,
        });
    }
    let manifest = DatasetManifest {
        classes: classes.to_vec(),
        radar: *radar,
        azimuth_step_deg,
        samples: entries,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

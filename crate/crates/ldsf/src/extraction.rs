//! The Table-1 regional-decoupling pipeline: segment once, then repeatedly
//! peel off the strongest scattering center — watershed region, initial θ,
//! per-α amplitude refit, continuous refinement over the region-masked cost,
//! discrete α re-selection, CLEAN complex subtraction — until a termination
//! rule fires.
//!
//! Refinement parameterization: the continuous components are box-normalized
//! to comparable scales (A by the region peak, x and y by their pixel
//! spacings, L by ten resolution cells, φ̄ by π, γ by the physical
//! [`GAMMA_NORM_SCALE`]); α is held at a discrete value during continuous
//! refinement and re-selected afterwards by evaluating the cost at each of
//! the five canonical values with a closed-form optimal amplitude (the cost
//! is exactly quadratic in A over the region support).

use crate::asc_model::{self, SynthWorkspace};
use crate::core_types::{
    Complex64Image, LdsfError, Result, ScatterSet, ScattererKind, ScattererParams,
};
use crate::optim::{self, OptimConfig};
use crate::segmentation::{self, classify_region_kind, Region};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

/// Normalization scale for γ during optimization. The damping term is
/// exp(−2πfγ·sinφ) with f ≈ 10 GHz, so physically meaningful γ is O(1e-10);
/// this scale makes the normalized coordinate O(1).
pub const GAMMA_NORM_SCALE: f64 = 2e-10;

/// The canonical GTD frequency-dependence exponents.
pub const ALPHA_SET: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

/// Termination rules of the extraction loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    /// Cumulative fit percentage reached `max_fit`.
    Fit,
    /// Next candidate peak fell below `min_peak_db` of the original maximum.
    PeakDb,
    /// `max_centers` centers extracted.
    MaxCenters,
    /// Watershed found no admissible region (or no further progress).
    NoRegion,
}

/// Extraction loop configuration; the termination defaults are the published
/// operating point (95% fit, −20 dB peak floor, 25 centers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub max_fit: f64,
    pub min_peak_db: f64,
    pub max_centers: usize,
    /// Peak-to-peak distance constraint for the watershed candidate loop, px.
    pub dmax: f64,
    /// Budget for the per-center continuous refinement.
    pub optim: OptimConfig,
    /// Post-loop relaxation sweeps (0 disables): each center is re-refined
    /// against the image with every other estimate subtracted, then
    /// near-duplicates are merged and sub-floor dust is culled.
    #[serde(default = "default_relax_sweeps")]
    pub relax_sweeps: usize,
}

fn default_relax_sweeps() -> usize {
    2
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            max_fit: 0.95,
            min_peak_db: -20.0,
            max_centers: 25,
            dmax: 20.0,
            optim: OptimConfig::default(),
            relax_sweeps: default_relax_sweeps(),
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_fit > 0.0 && self.max_fit <= 1.0) {
            return Err(LdsfError::InvalidParameter(format!(
                "max_fit must be in (0, 1], got {}",
                self.max_fit
            )));
        }
        if !(self.min_peak_db < 0.0) {
            return Err(LdsfError::InvalidParameter(format!(
                "min_peak_db must be < 0, got {}",
                self.min_peak_db
            )));
        }
        if self.max_centers < 1 {
            return Err(LdsfError::InvalidParameter(
                "max_centers must be >= 1".into(),
            ));
        }
        if !(self.dmax > 0.0) {
            return Err(LdsfError::InvalidParameter(format!(
                "dmax must be > 0, got {}",
                self.dmax
            )));
        }
        Ok(())
    }
}

/// One extraction iteration, for Fig.-3-style diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    /// Candidate region peak relative to the original global peak, dB
    /// (pre-refinement).
    pub peak_db: f64,
    /// The refined, accepted center.
    pub theta: ScattererParams,
    /// Residual energy after CLEAN subtraction.
    pub residual_energy: f64,
    /// Cumulative fit percentage after this center.
    pub fit: f64,
    /// "bfgs" | "nelder_mead" | "fallback".
    pub optimizer: String,
    /// True when the refinement could not start and θ₀ was used as-is.
    pub refine_fallback: bool,
    /// True when the raw refined subtraction would have raised residual
    /// energy and the amplitude was rescaled to the energy-optimal value.
    pub rescaled: bool,
}

/// Full extraction diagnostics: one record per accepted center plus the
/// termination rule that ended the loop.
#[derive(Debug, Clone, Serialize)]
pub struct ExtractionTrace {
    pub iterations: Vec<IterationRecord>,
    pub termination: TerminationReason,
}

impl ExtractionTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialization cannot fail")
    }
}

/// Initial attribute parameters θ₀ from an extracted region (Table 1 step 3):
/// A = region peak magnitude, (x, y) = scene coordinates of the peak pixel,
/// α = 0; a Distributed region also gets L = major-axis physical length and
/// φ̄ = region orientation.
///
/// The image-domain peak overestimates the spectrum-domain amplitude by
/// ~√(nf·nphi); the first refinement step replaces A with the closed-form
/// optimum, so the raw peak is a deliberate, simple initialization.
pub fn initial_params(r: &Region, residual: &Complex64Image) -> ScattererParams {
    let cfg = &residual.config;
    let (x, y) = asc_model::pixel_to_xy(cfg, r.peak.0 as f64, r.peak.1 as f64);
    match classify_region_kind(r, residual.pixel_spacing) {
        ScattererKind::Local => ScattererParams::local(r.peak_value, 0.0, x, y, 0.0),
        ScattererKind::Distributed => {
            let dir = (r.orientation.sin(), r.orientation.cos());
            let per_px = ((dir.0 * residual.pixel_spacing.0).powi(2)
                + (dir.1 * residual.pixel_spacing.1).powi(2))
            .sqrt();
            let l = r.extent.0 * per_px;
            ScattererParams::distributed(r.peak_value, 0.0, l, r.orientation, x, y)
        }
    }
}

/// Dilation radius of the region bounding box that forms the fit support.
/// Two degeneracies force the padding. A center sitting exactly on a grid
/// pixel images to a near-δ spike (the Dirichlet kernel nulls on every
/// other pixel), so its watershed basin can be a single pixel — far too
/// small to determine (A, x, y, …). And a distributed ridge needs dark
/// pixels beyond *both* ends inside the support, or shrinking L while
/// inflating A fits the visible part equally well. The dilated box stays
/// well inside the ≥ 5 resolution cells separating distinct centers.
const FIT_SUPPORT_HALF_WIDTH: usize = 3;

/// Scratch + context for repeated single-center cost evaluations against a
/// fixed residual restricted to a region's fit support (the region's pixels
/// padded with a small window around its peak).
struct RegionCost<'a> {
    ws: &'a mut SynthWorkspace,
    residual: &'a [Complex<f64>],
    /// Flat indices of the support pixels, row-major.
    support: Vec<usize>,
    /// Σ|residual|² over the support.
    base_energy: f64,
    render: Vec<Complex<f64>>,
}

impl<'a> RegionCost<'a> {
    fn new(ws: &'a mut SynthWorkspace, residual: &'a Complex64Image, region: &Region) -> Self {
        let (rows, cols) = (residual.rows, residual.cols);
        let mut stamp = vec![false; rows * cols];
        for &(r, c) in &region.pixels {
            stamp[r * cols + c] = true;
        }
        let h = FIT_SUPPORT_HALF_WIDTH;
        let (mut r_lo, mut r_hi, mut c_lo, mut c_hi) = (usize::MAX, 0, usize::MAX, 0);
        for &(r, c) in &region.pixels {
            r_lo = r_lo.min(r);
            r_hi = r_hi.max(r);
            c_lo = c_lo.min(c);
            c_hi = c_hi.max(c);
        }
        for r in r_lo.saturating_sub(h)..(r_hi + h + 1).min(rows) {
            for c in c_lo.saturating_sub(h)..(c_hi + h + 1).min(cols) {
                stamp[r * cols + c] = true;
            }
        }
        let support: Vec<usize> = (0..rows * cols).filter(|&i| stamp[i]).collect();
        let base_energy = support
            .iter()
            .map(|&i| residual.data[i].norm_sqr())
            .sum();
        RegionCost {
            ws,
            residual: &residual.data,
            support,
            base_energy,
            render: Vec::new(),
        }
    }

    /// Region-masked reconstruction cost Σ_support |residual − model(θ)|².
    fn cost(&mut self, theta: &ScattererParams) -> f64 {
        self.ws.render_into(std::slice::from_ref(theta), &mut self.render);
        self.support
            .iter()
            .map(|&i| (self.residual[i] - self.render[i]).norm_sqr())
            .sum()
    }

    /// Full-grid energy of the model at `theta` (amplitude included).
    fn model_energy(&mut self, theta: &ScattererParams) -> f64 {
        self.ws
            .render_into(std::slice::from_ref(theta), &mut self.render);
        self.render.iter().map(|u| u.norm_sqr()).sum()
    }

    /// Linear-in-amplitude fit data from a single render at `probe_a`:
    /// P = ⟨r, u⟩ (complex) over the support, Q_r = ‖u‖² over the support
    /// and Q_tot = ‖u‖² over the whole grid (the model is exactly linear
    /// in A).
    fn linear_fit(&mut self, theta: &ScattererParams, probe_a: f64) -> LinearFit {
        let mut t = *theta;
        t.a = probe_a;
        self.ws.render_into(std::slice::from_ref(&t), &mut self.render);
        let mut ip = Complex::new(0.0, 0.0);
        let mut q_r = 0.0;
        for &i in &self.support {
            let (r, u) = (self.residual[i], self.render[i]);
            ip += r * u.conj();
            q_r += u.norm_sqr();
        }
        let q_tot: f64 = self.render.iter().map(|u| u.norm_sqr()).sum();
        LinearFit {
            probe_a,
            ip,
            q_r,
            q_tot,
        }
    }
}

/// Closed-form amplitude fit against a region for a fixed model shape.
#[derive(Debug, Clone, Copy)]
struct LinearFit {
    probe_a: f64,
    ip: Complex<f64>,
    q_r: f64,
    q_tot: f64,
}

impl LinearFit {
    /// Magnitude-matched amplitude |⟨r,u⟩|/‖u‖² over the support: the
    /// least-squares amplitude if the model's phase could be aligned, which
    /// the continuous position refinement then does. Equals the exact
    /// (real, unbiased) optimum when the candidate is already in phase.
    fn best_amplitude(&self) -> f64 {
        if self.q_r > 0.0 {
            self.probe_a * self.ip.norm() / self.q_r
        } else {
            0.0
        }
    }

    /// Real-part-projected amplitude max(Re⟨r,u⟩, 0)/‖u‖²: the exact
    /// least-squares amplitude under the real-positive-A constraint.
    fn inphase_amplitude(&self) -> f64 {
        if self.q_r > 0.0 && self.ip.re > 0.0 {
            self.probe_a * self.ip.re / self.q_r
        } else {
            0.0
        }
    }

    /// Variable-projection cost: the support cost with a complex amplitude
    /// eliminated in closed form, c₀ − |⟨r,u⟩|²/‖u‖²_support. Invariant to
    /// the probe amplitude, bounded below the baseline by Cauchy–Schwarz,
    /// and free of the quadrature moat that the real-A cost has near a
    /// sub-pixel position error.
    fn varpro_cost(&self, c0: f64) -> f64 {
        if self.q_r > 0.0 {
            c0 - self.ip.norm_sqr() / self.q_r
        } else {
            c0
        }
    }

    /// Candidate-ranking score: matched-filter correlation |⟨r,u⟩|² with
    /// the model's *full-grid* energy in the quadratic term. Two pitfalls
    /// shape this definition. First, the plain region-masked optimum is
    /// degenerate — a far-off candidate whose main lobe misses the support
    /// can "fit" it with an enormous amplitude via its sidelobe tail (P²/Q
    /// with Q → 0); the full-grid energy penalty removes the degeneracy.
    /// Second, a sub-pixel position error rotates the model's phase at the
    /// peak (which a real positive A cannot absorb), so the real-part
    /// correlation of a half-pixel-adjacent candidate can vanish; the
    /// complex magnitude scores position information independently of that
    /// phase, which the refinement absorbs into (x, y). Lower is better;
    /// c₀ (the support energy) is the A = 0 baseline.
    fn score(&self, c0: f64) -> f64 {
        if self.q_tot > 0.0 {
            c0 - self.ip.norm_sqr() / self.q_tot
        } else {
            c0
        }
    }
}

/// Outcome metadata of one [`refine_center`] run.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// "bfgs" | "nelder_mead" | "fallback".
    pub optimizer: String,
    pub fallback: bool,
}

/// Soft trust region around the scan-selected candidate. The ASC model has
/// distant parameter aliases (wrapped positions, φ̄ ± kπ visibility flips,
/// narrow-visibility smears) whose tails can imitate a small region support;
/// quadratic walls keep the refinement in the basin the watershed picked
/// while being identically zero — gradients included — near the candidate.
struct TrustRegion {
    x0: f64,
    y0: f64,
    /// Positional half-widths (m).
    dx: f64,
    dy: f64,
    l0: f64,
    dl: f64,
    phi0: f64,
    dphi: f64,
    dgamma: f64,
    /// Penalty scale (the support energy), making the walls cost-comparable.
    scale: f64,
}

impl TrustRegion {
    fn penalty(&self, t: &ScattererParams) -> f64 {
        let wall = |excess: f64, unit: f64| -> f64 {
            let e = excess.max(0.0) / unit;
            e * e
        };
        let mut p = 0.0;
        p += wall((t.x - self.x0).abs() - self.dx, self.dx);
        p += wall((t.y - self.y0).abs() - self.dy, self.dy);
        match t.kind {
            ScattererKind::Local => {
                p += wall(t.gamma.abs() - self.dgamma, self.dgamma);
            }
            ScattererKind::Distributed => {
                p += wall((t.l - self.l0).abs() - self.dl, self.dl);
                p += wall((t.phi_bar - self.phi0).abs() - self.dphi, self.dphi);
            }
        }
        100.0 * self.scale * p
    }
}

/// One model branch of [`refine_center`], with the scatterer kind held
/// fixed: selects the best discrete α by closed-form amplitude refit,
/// jointly refines the continuous components with [`optim::refine_best`],
/// then re-checks α and re-refines once if the argmin moved. Kind
/// invariants (Local: L = φ̄ = 0; Distributed: γ = 0) hold by construction.
/// Returns the refined center, the optimizer outcome, the final
/// region-masked cost, and the region's baseline energy.
fn refine_with_kind(
    residual: &Complex64Image,
    region: &Region,
    theta0: &ScattererParams,
    opts: &OptimConfig,
    alpha_candidates: bool,
    ws: &mut SynthWorkspace,
) -> (ScattererParams, RefineOutcome, f64, f64) {
    let spacing = residual.pixel_spacing;
    let a_scale = region.peak_value.max(f64::MIN_POSITIVE);
    let l_scale = 10.0 * spacing.0;
    // φ̄ only matters within ~± the observed aperture: outside it the
    // visibility sinc is flat and (L, φ̄, A) degenerate into a dim-point
    // continuum. Normalizing by the span keeps optimizer steps inside the
    // identifiable canyon.
    let phi_scale = residual.config.aspect_span;
    let mut rc = RegionCost::new(ws, residual, region);

    // Probe amplitude for the quadratic refit: the image peak over √N is the
    // right order of magnitude for the spectrum-domain amplitude.
    let n_px = (residual.rows * residual.cols) as f64;
    let probe_a = (theta0.a / n_px.sqrt()).max(f64::MIN_POSITIVE);

    // Coarse position scan: the point-spread function's sidelobe rings make
    // the cost oscillate with ~1 px period, so a start more than half a pixel
    // off can strand a purely local optimizer. Testing integer pixel offsets
    // within ±2 px by matched-filter score deterministically lands the start
    // inside the main-lobe basin.
    let c0 = rc.base_energy;
    let mut theta = *theta0;
    {
        let mut best = (theta0.x, theta0.y, f64::INFINITY);
        for dr in -2..=2_i64 {
            for dc in -2..=2_i64 {
                let mut t = *theta0;
                t.x = theta0.x + dr as f64 * spacing.0;
                t.y = theta0.y + dc as f64 * spacing.1;
                let s = rc.linear_fit(&t, probe_a).score(c0);
                if s < best.2 {
                    best = (t.x, t.y, s);
                }
            }
        }
        theta.x = best.0;
        theta.y = best.1;
    }

    // Discrete α pre-selection with closed-form amplitude refit.
    {
        let mut best = (theta.alpha, probe_a, f64::INFINITY);
        for alpha in ALPHA_SET {
            let mut t = theta;
            t.alpha = alpha;
            let fit = rc.linear_fit(&t, probe_a);
            let s = fit.score(c0);
            if s < best.2 {
                let a = fit.best_amplitude();
                best = (alpha, if a > 0.0 { a } else { probe_a }, s);
            }
        }
        theta.alpha = best.0;
        theta.a = best.1;
    }

    let mut outcome = RefineOutcome {
        optimizer: "fallback".into(),
        fallback: false,
    };

    let trust = TrustRegion {
        x0: theta.x,
        y0: theta.y,
        dx: 3.0 * spacing.0,
        dy: 3.0 * spacing.1,
        l0: theta.l,
        dl: (1.5 * theta.l).max(5.0 * spacing.0),
        phi0: theta.phi_bar,
        // Beyond ±1 span the visibility sinc only offers its decaying tail,
        // where a runaway amplitude can impersonate any response shape.
        dphi: phi_scale,
        dgamma: 50.0 * GAMMA_NORM_SCALE,
        scale: c0.max(f64::MIN_POSITIVE),
    };

    // Stage A: variable-projection refinement of the position/shape
    // components with the (complex) amplitude eliminated per evaluation.
    // A sub-pixel position error shows up as a phase rotation that a real
    // positive A cannot absorb, so the full cost has a flat quadrature moat
    // around a half-pixel-adjacent start; the projected cost does not, and
    // its minimizer coincides with the full-cost minimizer (where the
    // projected amplitude comes out real). The full-cost polish below then
    // starts in phase.
    //
    // α is selected here by *refined* cost, not at a frozen position: a
    // wrong exponent plus a compensating few-hundredths-of-a-pixel shift
    // imitates the true model closely, so comparing α values at any single
    // position keeps whichever α that position already favors. Refining the
    // continuous components under each α breaks the tie — the true α reaches
    // the global (zero-residual) basin, the impostors stall above it.
    {
        let kind = theta.kind;
        let v0: Vec<f64> = match kind {
            ScattererKind::Local => vec![
                theta.x / spacing.0,
                theta.y / spacing.1,
                theta.gamma / GAMMA_NORM_SCALE,
            ],
            ScattererKind::Distributed => vec![
                theta.x / spacing.0,
                theta.y / spacing.1,
                theta.l / l_scale,
                theta.phi_bar / phi_scale,
            ],
        };
        let unpack = |v: &[f64], alpha: f64| -> ScattererParams {
            match kind {
                ScattererKind::Local => ScattererParams {
                    a: probe_a,
                    alpha,
                    l: 0.0,
                    phi_bar: 0.0,
                    gamma: v[2] * GAMMA_NORM_SCALE,
                    x: v[0] * spacing.0,
                    y: v[1] * spacing.1,
                    kind,
                },
                ScattererKind::Distributed => ScattererParams {
                    a: probe_a,
                    alpha,
                    l: (v[2] * l_scale).abs(),
                    phi_bar: v[3] * phi_scale,
                    gamma: 0.0,
                    x: v[0] * spacing.0,
                    y: v[1] * spacing.1,
                    kind,
                },
            }
        };
        let incumbent = theta.alpha;
        // Selection budget: Stage A only has to rank the α candidates and
        // land the winner inside the polish basin — the full budget belongs
        // to the Stage B polish. A quarter of the caller's budget settles a
        // quasi-Newton descent on these 3–4-dim projected costs, and a stall
        // exits early through the line-search failure path anyway.
        let mut sel = opts.clone();
        sel.max_iter = (opts.max_iter / 4).max(20);
        let seed = optim::bfgs(
            |v| {
                let t = unpack(v, incumbent);
                rc.linear_fit(&t, probe_a).varpro_cost(c0) + trust.penalty(&t)
            },
            &v0,
            &sel,
        )
        .ok()
        .map(|r| (r.x_min, r.f_min));
        if let Some((v1, c1)) = seed {
            // The other α candidates start warm from the incumbent's
            // position, so the same capped descent settles them in a few
            // steps. Candidates are skipped entirely when the incumbent
            // already fits to numerical depth, and pre-filtered by their
            // frozen-position cost when it is beyond rescue.
            let warm = v1.clone();
            let mut best = (incumbent, v1, c1);
            if alpha_candidates && c1 > 1e-9 * c0 {
                for alpha in ALPHA_SET {
                    if alpha == incumbent {
                        continue;
                    }
                    let frozen = rc
                        .linear_fit(&unpack(&warm, alpha), probe_a)
                        .varpro_cost(c0);
                    if frozen > 50.0 * c1 + 1e-12 * c0 {
                        continue;
                    }
                    let r = optim::bfgs(
                        |v| {
                            let t = unpack(v, alpha);
                            rc.linear_fit(&t, probe_a).varpro_cost(c0) + trust.penalty(&t)
                        },
                        &warm,
                        &sel,
                    );
                    if let Ok(r) = r {
                        if r.f_min < best.2 {
                            best = (alpha, r.x_min, r.f_min);
                        }
                    }
                }
            }
            let t = unpack(&best.1, best.0);
            theta.alpha = best.0;
            theta.x = t.x;
            theta.y = t.y;
            theta.gamma = t.gamma;
            theta.l = t.l;
            theta.phi_bar = t.phi_bar;
            let fit = rc.linear_fit(&theta, probe_a);
            let a = fit.inphase_amplitude();
            theta.a = if a > 0.0 {
                a
            } else {
                let a = fit.best_amplitude();
                if a > 0.0 {
                    a
                } else {
                    probe_a
                }
            };
        }
    }
    for pass in 0..2 {
        // Pack the continuous components in normalized units.
        let kind = theta.kind;
        let alpha = theta.alpha;
        let x0: Vec<f64> = match kind {
            ScattererKind::Local => vec![
                theta.a / a_scale,
                theta.x / spacing.0,
                theta.y / spacing.1,
                theta.gamma / GAMMA_NORM_SCALE,
            ],
            ScattererKind::Distributed => vec![
                theta.a / a_scale,
                theta.x / spacing.0,
                theta.y / spacing.1,
                theta.l / l_scale,
                theta.phi_bar / phi_scale,
            ],
        };
        let unpack = |v: &[f64]| -> ScattererParams {
            match kind {
                ScattererKind::Local => ScattererParams {
                    a: (v[0] * a_scale).abs().max(f64::MIN_POSITIVE),
                    alpha,
                    l: 0.0,
                    phi_bar: 0.0,
                    gamma: v[3] * GAMMA_NORM_SCALE,
                    x: v[1] * spacing.0,
                    y: v[2] * spacing.1,
                    kind,
                },
                ScattererKind::Distributed => ScattererParams {
                    a: (v[0] * a_scale).abs().max(f64::MIN_POSITIVE),
                    alpha,
                    l: (v[3] * l_scale).abs(),
                    phi_bar: v[4] * phi_scale,
                    gamma: 0.0,
                    x: v[1] * spacing.0,
                    y: v[2] * spacing.1,
                    kind,
                },
            }
        };
        let mut fobj = |v: &[f64]| {
            let t = unpack(v);
            rc.cost(&t) + trust.penalty(&t)
        };
        // BFGS leads; the simplex runs only when the quasi-Newton path
        // failed to resolve the basin (line-search death or budget
        // exhaustion above the numerical floor) — on the clean path it
        // would just re-derive the same point at full price.
        let bres = optim::bfgs(&mut fobj, &x0, opts);
        let settled = matches!(&bres, Ok(b) if b.converged || b.f_min <= 1e-9 * c0);
        let result = if settled {
            bres
        } else {
            let nm = optim::nelder_mead(&mut fobj, &x0, opts);
            match (bres, nm) {
                (Ok(b), Ok(nm)) => Ok(if b.f_min <= nm.f_min { b } else { nm }),
                (Ok(b), Err(_)) => Ok(b),
                (Err(_), Ok(nm)) => Ok(nm),
                (Err(e), Err(_)) => Err(e),
            }
        };
        match result {
            Ok(r) => {
                theta = unpack(&r.x_min);
                outcome.optimizer = match r.method {
                    optim::Method::Bfgs => "bfgs".into(),
                    optim::Method::NelderMead => "nelder_mead".into(),
                };
            }
            Err(_) => {
                outcome.fallback = true;
                outcome.optimizer = "fallback".into();
                theta = *theta0;
                break;
            }
        }
        // Discrete α re-selection: plain cost at the refined θ with each α
        // swapped in, keeping the argmin.
        let mut alpha_new = theta.alpha;
        let mut best_c = f64::INFINITY;
        for alpha in ALPHA_SET {
            let mut t = theta;
            t.alpha = alpha;
            let c = rc.cost(&t);
            if c < best_c {
                best_c = c;
                alpha_new = alpha;
            }
        }
        if alpha_new == theta.alpha || pass == 1 {
            break;
        }
        theta.alpha = alpha_new;
        let a = {
            let fit = rc.linear_fit(&theta, probe_a);
            fit.best_amplitude()
        };
        if a > 0.0 {
            theta.a = a;
        }
    }
    // A refinement stranded in the wrong model branch can run its amplitude
    // away: the support cost barely moves while the full-grid model energy
    // ×10s the region's. Such a θ poisons everything downstream (branch
    // selection, the CLEAN update, the cumulative fit ratio), so its
    // amplitude is rescaled onto the energy cap; the recomputed — now
    // honest — cost votes it down in the branch comparison.
    let e_model = rc.model_energy(&theta);
    if e_model > MODEL_ENERGY_CAP * c0 && e_model > 0.0 {
        theta.a *= (MODEL_ENERGY_CAP * c0 / e_model).sqrt();
    }
    let final_cost = rc.cost(&theta);
    (theta, outcome, final_cost, c0)
}

/// A legitimate fit's full-grid energy tops out near its region support
/// energy (the support holds the main lobe; sidelobes and a truncated ridge
/// tail add tens of percent). Beyond this multiple the fit is explaining
/// pixels it cannot see.
const MODEL_ENERGY_CAP: f64 = 4.0;

/// Fraction of the region's energy the first branch may leave unexplained
/// before the alternate scatterer kind is also tried. Noise floors on a
/// bright support sit well below this; a kind mismatch sits well above it.
const KIND_SWAP_RTOL: f64 = 0.02;

/// The greedy pass of a relaxation-enabled run uses this looser swap
/// tolerance: a point fit with a not-yet-corrected α stalls a few percent
/// above the floor, which is no reason to pay for the distributed branch
/// when the sweeps will revisit the kind anyway.
const GREEDY_SWAP_RTOL: f64 = 0.05;

/// Refines one center against `residual` over the region-masked cost
/// (Table 1 step 4), selecting the scatterer kind by fit. The watershed
/// region's shape is only a hint: a point target between grid nodes paints
/// a sidelobe cross whose elongated basin masquerades as a distributed
/// ridge, so trusting the hint strands the refinement in the wrong model
/// branch. The local branch runs first (fewer parameters); the distributed
/// branch runs too unless the local fit already explains the region, and
/// the lower final cost wins.
pub fn refine_center(
    residual: &Complex64Image,
    region: &Region,
    theta0: &ScattererParams,
    opts: &OptimConfig,
    ws: &mut SynthWorkspace,
) -> (ScattererParams, RefineOutcome) {
    refine_center_inner(residual, region, theta0, opts, true, KIND_SWAP_RTOL, ws)
}

/// [`refine_center`] with two refinement knobs exposed: the per-α candidate
/// stage can be skipped and the kind-swap tolerance loosened. The greedy
/// loop of a relaxation-enabled extraction does both — the relaxation
/// sweeps re-decide α and kind against isolated residuals, where the
/// decision is cheaper and better conditioned — while direct callers keep
/// the full treatment.
fn refine_center_inner(
    residual: &Complex64Image,
    region: &Region,
    theta0: &ScattererParams,
    opts: &OptimConfig,
    alpha_candidates: bool,
    swap_rtol: f64,
    ws: &mut SynthWorkspace,
) -> (ScattererParams, RefineOutcome) {
    let spacing = residual.pixel_spacing;
    let local0 = ScattererParams {
        kind: ScattererKind::Local,
        l: 0.0,
        phi_bar: 0.0,
        gamma: if theta0.kind == ScattererKind::Local {
            theta0.gamma
        } else {
            0.0
        },
        ..*theta0
    };
    let (theta_l, out_l, cost_l, base) =
        refine_with_kind(residual, region, &local0, opts, alpha_candidates, ws);
    if cost_l <= swap_rtol * base {
        return (theta_l, out_l);
    }
    let dist0 = ScattererParams {
        kind: ScattererKind::Distributed,
        gamma: 0.0,
        l: if theta0.l > 0.0 {
            theta0.l
        } else {
            3.0 * spacing.0
        },
        ..*theta0
    };
    let (theta_d, out_d, cost_d, _) =
        refine_with_kind(residual, region, &dist0, opts, alpha_candidates, ws);
    if cost_d < cost_l {
        (theta_d, out_d)
    } else {
        (theta_l, out_l)
    }
}

/// CLEAN update (Table 1 steps 6–7): the residual minus the full synthesized
/// image of `{c}` — complex subtraction over the whole grid, removing main
/// lobe and sidelobes together.
pub fn clean_subtract(residual: &Complex64Image, c: &ScattererParams) -> Result<Complex64Image> {
    if residual.rows != residual.config.nf || residual.cols != residual.config.nphi {
        return Err(LdsfError::DimensionMismatch(format!(
            "image {}x{} does not match its config grid {}x{}",
            residual.rows, residual.cols, residual.config.nf, residual.config.nphi
        )));
    }
    let model = asc_model::synthesize_image(&ScatterSet::new(vec![*c]), &residual.config)?;
    residual.subtract(&model)
}

/// Half-width (px) of the square refinement window a relaxation sweep pins
/// around a center's own response peak.
const RELAX_HALF: usize = 4;

/// Two estimates closer than this (resolution cells) describe one response:
/// the greedy loop keeps legitimate centers several cells apart (they own
/// separate watershed basins), so only a split fit produces such a pair.
const MERGE_RADIUS_CELLS: f64 = 1.5;

/// One relaxation sweep (strongest center first): each center is re-refined
/// against the observed image with every *other* current estimate
/// subtracted. The greedy loop decides each θ while dimmer neighbors are
/// still unsubtracted, and their sidelobe tails through the region are
/// routinely larger than the spectral signature separating adjacent α
/// values; against the isolated residual that contamination is gone and the
/// α selection becomes decisive again. An update is kept only when it does
/// not increase the center's isolated residual energy. Returns whether any
/// center materially changed (position by > 0.02 cells, amplitude or length
/// by > 0.5%, or a discrete α/kind flip).
/// Image-domain peak magnitude of each center's own rendered response.
/// Amplitudes are not comparable across kinds (a ridge's or tail-suppressed
/// response's A can be orders of magnitude above its visible peak), so
/// "strongest" anywhere in the relaxation machinery means this, matching the
/// quantity `min_peak_db` thresholds in the greedy loop.
fn image_peaks(centers: &[ScattererParams], ws: &mut SynthWorkspace) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = Vec::new();
    centers
        .iter()
        .map(|c| {
            ws.render_into(std::slice::from_ref(c), &mut buf);
            buf.iter().map(|z| z.norm()).fold(0.0, f64::max)
        })
        .collect()
}

fn relax_sweep(
    observed: &Complex64Image,
    centers: &mut [ScattererParams],
    opts: &OptimConfig,
    ws: &mut SynthWorkspace,
) -> bool {
    let (rows, cols) = (observed.rows, observed.cols);
    let spacing = observed.pixel_spacing;
    let peaks = image_peaks(centers, ws);
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&i, &j| peaks[j].partial_cmp(&peaks[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut moved = false;
    let mut others_img: Vec<Complex<f64>> = Vec::new();
    let mut model: Vec<Complex<f64>> = Vec::new();
    for &i in &order {
        let others: Vec<ScattererParams> = centers
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, c)| *c)
            .collect();
        ws.render_into(&others, &mut others_img);
        let mut residual = observed.clone();
        for (r, m) in residual.data.iter_mut().zip(&others_img) {
            *r -= m;
        }
        // Anchor the window on the center's own response peak, which also
        // holds for distributed ridges whose (x, y) is the ridge midpoint.
        ws.render_into(std::slice::from_ref(&centers[i]), &mut model);
        let (mut pr, mut pc, mut pv) = (0usize, 0usize, -1.0_f64);
        for r in 0..rows {
            for c in 0..cols {
                let v = model[r * cols + c].norm();
                if v > pv {
                    (pr, pc, pv) = (r, c, v);
                }
            }
        }
        let (r_lo, r_hi) = (pr.saturating_sub(RELAX_HALF), (pr + RELAX_HALF).min(rows - 1));
        let (c_lo, c_hi) = (pc.saturating_sub(RELAX_HALF), (pc + RELAX_HALF).min(cols - 1));
        let mut pixels = Vec::new();
        let mut peak = (pr, pc);
        let mut peak_value = 0.0;
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                pixels.push((r, c));
                let v = residual.at(r, c).norm();
                if v > peak_value {
                    peak_value = v;
                    peak = (r, c);
                }
            }
        }
        let side = (2 * RELAX_HALF + 1) as f64;
        let region = Region {
            pixels,
            peak,
            peak_value,
            extent: (side, side),
            orientation: 0.0,
        };
        let (theta_new, _outcome) =
            refine_center_inner(&residual, &region, &centers[i], opts, true, KIND_SWAP_RTOL, ws);
        ws.render_into(std::slice::from_ref(&centers[i]), &mut model);
        let e_old: f64 = residual
            .data
            .iter()
            .zip(&model)
            .map(|(r, m)| (r - m).norm_sqr())
            .sum();
        ws.render_into(std::slice::from_ref(&theta_new), &mut model);
        let e_new: f64 = residual
            .data
            .iter()
            .zip(&model)
            .map(|(r, m)| (r - m).norm_sqr())
            .sum();
        if e_new <= e_old {
            let old = centers[i];
            let dcell =
                ((theta_new.x - old.x) / spacing.0).hypot((theta_new.y - old.y) / spacing.1);
            if dcell > 0.02
                || theta_new.alpha != old.alpha
                || theta_new.kind != old.kind
                || (theta_new.a - old.a).abs() > 0.005 * old.a.abs().max(f64::MIN_POSITIVE)
                || (theta_new.l - old.l).abs() > 0.005 * (old.l.abs() + spacing.0)
            {
                moved = true;
            }
            centers[i] = theta_new;
        }
    }
    moved
}

/// A center is redundant when deleting it from the joint amplitude solve
/// raises the total squared error by less than this fraction of the
/// center's own explained energy. A real center's removal costs its whole
/// lobe (ratio ≈ 1); a split or bridge fit's removal costs almost nothing
/// because the remaining centers' re-solved amplitudes absorb its share.
const REDUNDANT_CONTRIB: f64 = 0.05;

/// Redistributes amplitude globally and eliminates redundant centers. With
/// every position and shape frozen, amplitudes enter the model linearly, so
/// the best per-center scale factors r solve the least-squares
/// ‖observed − Σᵢ rᵢ·mᵢ‖² via the real normal equations
/// Re⟨mᵢ,mⱼ⟩·r = Re⟨observed,mᵢ⟩. One-at-a-time refits cannot do this: a
/// split fit — one spurious response bridging two under-fitted real ones —
/// is a stable equilibrium of sequential refinement, because each center is
/// locally optimal given the others. And the joint solve alone does not
/// break it either: least squares happily shares amplitude among correlated
/// responses instead of zeroing the spurious one. Sparsity comes from the
/// nested-model comparison ([`REDUNDANT_CONTRIB`]): the center whose removal
/// is cheapest relative to its own energy is deleted and the system
/// re-solved, until every survivor pays its way; negative-coefficient
/// centers (pure cancellation terms) are likewise dropped. Returns whether
/// any amplitude changed materially or a center was dropped.
fn joint_rescale(
    observed: &Complex64Image,
    centers: &mut Vec<ScattererParams>,
    ws: &mut SynthWorkspace,
) -> bool {
    let n = centers.len();
    if n < 2 {
        return false;
    }
    let mut renders: Vec<Vec<Complex<f64>>> = Vec::with_capacity(n);
    for c in centers.iter() {
        let mut buf = Vec::new();
        ws.render_into(std::slice::from_ref(c), &mut buf);
        renders.push(buf);
    }
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    renders[i]
                        .iter()
                        .zip(&renders[j])
                        .map(|(a, b)| a.re * b.re + a.im * b.im)
                        .sum()
                })
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = (0..n)
        .map(|i| {
            observed
                .data
                .iter()
                .zip(&renders[i])
                .map(|(o, m)| o.re * m.re + o.im * m.im)
                .sum()
        })
        .collect();
    let ridge = 1e-12
        * (0..n)
            .map(|i| gram[i][i])
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
    // Least-squares coefficients over the subset, and the explained energy
    // rᵀb they achieve (total error = ‖observed‖² − rᵀb at the optimum).
    let solve_subset = |active: &[usize]| -> Option<(Vec<f64>, f64)> {
        let mut a: Vec<Vec<f64>> = active
            .iter()
            .enumerate()
            .map(|(p, &i)| {
                let mut row: Vec<f64> = active.iter().map(|&j| gram[i][j]).collect();
                row[p] += ridge;
                row
            })
            .collect();
        let mut b: Vec<f64> = active.iter().map(|&i| rhs[i]).collect();
        if !solve_in_place(&mut a, &mut b) {
            return None;
        }
        let explained = b.iter().zip(active).map(|(r, &i)| r * rhs[i]).sum();
        Some((b, explained))
    };

    let mut active: Vec<usize> = (0..n).collect();
    let mut dropped = false;
    let scales = loop {
        let Some((r, explained)) = solve_subset(&active) else {
            return false; // singular despite the ridge: leave amplitudes be
        };
        if active.len() == 1 {
            break r;
        }
        // Cheapest deletion relative to the deleted center's own energy.
        let mut worst: Option<(usize, f64)> = None;
        for p in 0..active.len() {
            let reduced: Vec<usize> = active
                .iter()
                .enumerate()
                .filter(|&(q, _)| q != p)
                .map(|(_, &i)| i)
                .collect();
            let Some((_, expl_without)) = solve_subset(&reduced) else {
                continue;
            };
            let own = r[p] * r[p] * gram[active[p]][active[p]];
            let cost = (explained - expl_without) / own.max(f64::MIN_POSITIVE);
            let cost = if r[p] <= 0.0 { f64::NEG_INFINITY } else { cost };
            if worst.is_none_or(|(_, w)| cost < w) {
                worst = Some((p, cost));
            }
        }
        match worst {
            Some((p, cost)) if cost <= REDUNDANT_CONTRIB => {
                active.remove(p);
                dropped = true;
            }
            _ => break r,
        }
    };
    let mut changed = dropped;
    let mut kept: Vec<ScattererParams> = Vec::with_capacity(active.len());
    for (pos, &i) in active.iter().enumerate() {
        let mut c = centers[i];
        if (scales[pos] - 1.0).abs() > 0.005 {
            changed = true;
        }
        c.a *= scales[pos];
        kept.push(c);
    }
    *centers = kept;
    changed
}

/// Gaussian elimination with partial pivoting, solving `a·x = b` in place
/// (`b` becomes `x`). Returns false when a pivot vanishes.
fn solve_in_place(a: &mut [Vec<f64>], b: &mut [f64]) -> bool {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                a[i][col]
                    .abs()
                    .partial_cmp(&a[j][col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        if a[pivot][col].abs() < f64::MIN_POSITIVE {
            return false;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in col + 1..n {
            s -= a[col][c] * b[c];
        }
        b[col] = s / a[col][col];
    }
    true
}

/// Sorts strongest (by rendered image peak) first, merges pairs closer than
/// [`MERGE_RADIUS_CELLS`] (the dimmer one is dropped; the next relaxation
/// sweep re-absorbs its share of the response into the survivor), and culls
/// dust whose peak sits below `min_peak_db` of the strongest — the loop's
/// peak floor applied to the estimates themselves. Returns whether anything
/// was dropped.
fn merge_and_cull(
    centers: &mut Vec<ScattererParams>,
    spacing: (f64, f64),
    min_peak_db: f64,
    ws: &mut SynthWorkspace,
) -> bool {
    let n0 = centers.len();
    let peaks = image_peaks(centers, ws);
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&i, &j| peaks[j].partial_cmp(&peaks[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<(ScattererParams, f64)> = Vec::new();
    for &i in &order {
        let c = centers[i];
        let dup = kept.iter().any(|(k, _)| {
            ((k.x - c.x) / spacing.0).hypot((k.y - c.y) / spacing.1) < MERGE_RADIUS_CELLS
        });
        if !dup {
            kept.push((c, peaks[i]));
        }
    }
    let floor = kept.first().map_or(0.0, |&(_, p)| p) * 10f64.powf(min_peak_db / 20.0);
    kept.retain(|&(_, p)| p >= floor);
    let changed = kept.len() != n0;
    *centers = kept.into_iter().map(|(c, _)| c).collect();
    changed
}

/// Runs the whole Table-1 loop on `observed`: one 2-D Otsu segmentation, then
/// watershed → initial θ → refine → CLEAN until a termination rule fires.
/// After the loop, `relax_sweeps` relaxation passes re-refine each center
/// against the image minus all other estimates (see [`relax_sweep`]),
/// jointly re-solving all amplitudes ([`joint_rescale`]) and merging
/// duplicates / culling dust between passes.
/// Returns the extracted set (strongest first) and the
/// per-iteration trace of the greedy loop. Deterministic: identical inputs
/// give identical output bits.
pub fn extract_all(
    observed: &Complex64Image,
    cfg: &ExtractionConfig,
) -> Result<(ScatterSet, ExtractionTrace)> {
    cfg.validate()?;
    let orig_energy = observed.energy();
    if orig_energy <= 0.0 {
        return Err(LdsfError::InvalidInput(
            "extraction needs a non-zero-energy image".into(),
        ));
    }
    let orig_mag = observed.magnitude();
    let (orig_peak, _) = orig_mag.argmax();
    let mask = segmentation::otsu2d(&orig_mag)?;
    let mut ws = SynthWorkspace::new(&observed.config)?;

    // A relaxation-enabled run treats the greedy loop as a coarse CLEAN
    // pass — half the refinement budget, no α candidates, a loose kind-swap
    // tolerance — because the sweeps redo every center from a warm start
    // against a cleaner background.
    let relaxing = cfg.relax_sweeps > 0;
    let mut greedy_opts = cfg.optim.clone();
    if relaxing {
        greedy_opts.max_iter = (cfg.optim.max_iter / 2).max(40);
    }
    let greedy_swap = if relaxing {
        GREEDY_SWAP_RTOL
    } else {
        KIND_SWAP_RTOL
    };

    let mut residual = observed.clone();
    let mut model_total = vec![Complex::new(0.0, 0.0); observed.data.len()];
    let mut centers: Vec<ScattererParams> = Vec::new();
    let mut regions: Vec<Region> = Vec::new();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut render = Vec::new();

    let termination = loop {
        // Cumulative fit = energy of the reconstructed model over the
        // original energy (Parseval-consistent with fit_percentage).
        let fit = (model_total.iter().map(|z| z.norm_sqr()).sum::<f64>() / orig_energy)
            .clamp(0.0, 1.0);
        if fit >= cfg.max_fit {
            // Coherent overlap between model responses can push the model
            // energy ratio past max_fit while real centers are still
            // unexplained, so the residual has to corroborate the stop.
            let explained = (1.0 - residual.energy() / orig_energy).clamp(0.0, 1.0);
            if explained >= cfg.max_fit {
                break TerminationReason::Fit;
            }
        }
        if centers.len() >= cfg.max_centers {
            break TerminationReason::MaxCenters;
        }
        let region =
            match segmentation::extract_max_region(&residual.magnitude(), &mask, &regions, cfg.dmax)
            {
                Ok(r) => r,
                Err(LdsfError::NoRegion(_)) => break TerminationReason::NoRegion,
                Err(e) => return Err(e),
            };
        let peak_db = 20.0 * (region.peak_value / orig_peak).log10();
        if peak_db < cfg.min_peak_db {
            break TerminationReason::PeakDb;
        }

        let theta0 = initial_params(&region, &residual);
        let (mut theta, outcome) = refine_center_inner(
            &residual,
            &region,
            &theta0,
            &greedy_opts,
            !relaxing,
            greedy_swap,
            &mut ws,
        );

        // CLEAN subtraction with an energy-honesty guard: the raw refined
        // subtraction is kept only while the model's own energy (mm) stays
        // within 4× the energy it removes from the residual (2·dot − mm).
        // Outside that — including the energy-increasing case — the
        // amplitude is rescaled to the full-grid optimum β·A, after which
        // the added model energy equals the explained energy exactly, so
        // the cumulative fit ratio cannot outrun the actual reconstruction.
        // If no positive rescale can make progress, stop.
        ws.render_into(std::slice::from_ref(&theta), &mut render);
        let dot: f64 = residual
            .data
            .iter()
            .zip(&render)
            .map(|(r, m)| r.re * m.re + r.im * m.im)
            .sum();
        let mm: f64 = render.iter().map(|m| m.norm_sqr()).sum();
        let explained_raw = 2.0 * dot - mm;
        let mut rescaled = false;
        if mm > 4.0 * explained_raw.max(0.0) {
            let beta = if mm > 0.0 { dot / mm } else { 0.0 };
            if beta <= 1e-6 {
                break TerminationReason::NoRegion;
            }
            theta.a *= beta;
            ws.render_into(std::slice::from_ref(&theta), &mut render);
            rescaled = true;
        }
        for ((r, m), t) in residual.data.iter_mut().zip(&render).zip(&mut model_total) {
            *r -= m;
            *t += m;
        }
        let residual_energy = residual.energy();
        let fit = (model_total.iter().map(|z| z.norm_sqr()).sum::<f64>() / orig_energy)
            .clamp(0.0, 1.0);
        iterations.push(IterationRecord {
            peak_db,
            theta,
            residual_energy,
            fit,
            optimizer: outcome.optimizer,
            refine_fallback: outcome.fallback,
            rescaled,
        });
        centers.push(theta);
        regions.push(region);
    };

    if cfg.relax_sweeps > 0 && !centers.is_empty() {
        let spacing = observed.pixel_spacing;
        // Relaxation starts warm (each θ is within a fraction of a cell of
        // its basin), so half the greedy budget per refinement suffices.
        let mut relax_opts = cfg.optim.clone();
        relax_opts.max_iter = (cfg.optim.max_iter / 2).max(40);
        merge_and_cull(&mut centers, spacing, cfg.min_peak_db, &mut ws);
        joint_rescale(observed, &mut centers, &mut ws);
        for _ in 0..cfg.relax_sweeps {
            let moved = relax_sweep(observed, &mut centers, &relax_opts, &mut ws);
            let rescaled = joint_rescale(observed, &mut centers, &mut ws);
            let culled = merge_and_cull(&mut centers, spacing, cfg.min_peak_db, &mut ws);
            if !moved && !rescaled && !culled {
                break;
            }
        }
    }

    Ok((
        ScatterSet::new(centers),
        ExtractionTrace {
            iterations,
            termination,
        },
    ))
}

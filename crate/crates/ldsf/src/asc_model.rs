//! The attributed-scattering-center forward model: per-center frequency/aspect
//! response, scene spectrum synthesis, unitary inverse DFT imaging, and the
//! reconstruction objective used by parameter refinement.
//!
//! Conventions, fixed here and relied on everywhere:
//!
//! * The (f, φ) grid uses midpoint sampling: `f_m = fc − B/2 + (m+0.5)·B/nf`,
//!   and likewise for aspect.
//! * The image is the **unitary** 2-D inverse DFT (positive exponent,
//!   `1/sqrt(nf·nphi)` scale) of the spectrum, fftshifted on both axes, so a
//!   scatterer at the scene origin lands on pixel `(nf/2, nphi/2)` and
//!   Parseval holds exactly (spectrum energy = image energy).
//! * Rows index range with `x = (row − nf/2)·c/(2B)`; columns index
//!   cross-range with `y = (col − nphi/2)·c/(2·fc·span)`; for a non-zero
//!   aspect center the mapping is in the rotated look frame (see
//!   [`xy_to_pixel`]).

use crate::core_types::{
    Complex64Image, LdsfError, RadarConfig, Result, ScatterSet, ScattererKind, ScattererParams,
    C_LIGHT,
};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

/// Largest magnitude allowed inside the aspect-damping exponent before
/// clamping; keeps `exp` finite for adversarial γ values.
const GAMMA_EXP_CLAMP: f64 = 600.0;

/// Unnormalized sinc with the removable singularity patched by its Taylor
/// value `1 − u²/6` for |u| < 1e-12.
#[inline]
pub fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0 - u * u / 6.0
    } else {
        u.sin() / u
    }
}

/// Frequency and aspect sample values for a config's grid (midpoint rule).
#[derive(Debug, Clone)]
pub struct GridTables {
    pub freqs: Vec<f64>,
    pub phis: Vec<f64>,
    sin_phi: Vec<f64>,
    cos_phi: Vec<f64>,
}

impl GridTables {
    pub fn new(cfg: &RadarConfig) -> Self {
        let df = cfg.bandwidth / cfg.nf as f64;
        let f0 = cfg.fc - cfg.bandwidth / 2.0;
        let freqs: Vec<f64> = (0..cfg.nf).map(|m| f0 + (m as f64 + 0.5) * df).collect();
        let dp = cfg.aspect_span / cfg.nphi as f64;
        let p0 = cfg.aspect_center - cfg.aspect_span / 2.0;
        let phis: Vec<f64> = (0..cfg.nphi).map(|n| p0 + (n as f64 + 0.5) * dp).collect();
        let sin_phi = phis.iter().map(|p| p.sin()).collect();
        let cos_phi = phis.iter().map(|p| p.cos()).collect();
        GridTables {
            freqs,
            phis,
            sin_phi,
            cos_phi,
        }
    }
}

/// Evaluates Eq.(2): the independent response of one scattering center at a
/// single (f, φ) sample.
///
/// `E = A·(jf/fc)^α · sinc(2πf/c · L·sin(φ−φ̄)) · exp(−j4πf/c·(x·cosφ + y·sinφ))
///      · exp(−2πfγ·sinφ)`
///
/// `(jf/fc)^α` uses the principal branch, which for f > 0 equals
/// `(f/fc)^α·e^{jαπ/2}`. The aspect-damping exponent is real, as printed.
pub fn eval_response(c: &ScattererParams, f: f64, phi: f64, cfg: &RadarConfig) -> Complex<f64> {
    let amp = c.a * (f / cfg.fc).powf(c.alpha);
    let quad = Complex::from_polar(1.0, c.alpha * FRAC_PI_2);
    let sinc_term = sinc(2.0 * PI * f / C_LIGHT * c.l * (phi - c.phi_bar).sin());
    let phase = -4.0 * PI * f / C_LIGHT * (c.x * phi.cos() + c.y * phi.sin());
    let damp = (-2.0 * PI * f * c.gamma * phi.sin())
        .clamp(-GAMMA_EXP_CLAMP, GAMMA_EXP_CLAMP)
        .exp();
    quad * Complex::from_polar(amp * sinc_term * damp, phase)
}

/// Evaluates Eq.(1): the coherent sum of all centers at one (f, φ) sample.
/// An empty set sums to zero.
pub fn eval_total(s: &ScatterSet, f: f64, phi: f64, cfg: &RadarConfig) -> Complex<f64> {
    s.centers
        .iter()
        .map(|c| eval_response(c, f, phi, cfg))
        .fold(Complex::new(0.0, 0.0), |acc, z| acc + z)
}

/// Reusable synthesis machinery: grid tables, FFT plans, and scratch buffers
/// for one grid shape. Construct once and call [`SynthWorkspace::synthesize`]
/// many times; the free function [`synthesize_image`] wraps this for one-shot
/// use.
pub struct SynthWorkspace {
    cfg: RadarConfig,
    grids: GridTables,
    fft_f: Arc<dyn Fft<f64>>,
    fft_phi: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex<f64>>,
    /// Spectrum accumulator, aspect-major: `spec[n*nf + m]`.
    spec: Vec<Complex<f64>>,
    /// Transpose buffer, range-major: `tran[p*nphi + n]`.
    tran: Vec<Complex<f64>>,
}

impl SynthWorkspace {
    pub fn new(cfg: &RadarConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let fft_f = planner.plan_fft_inverse(cfg.nf);
        let fft_phi = planner.plan_fft_inverse(cfg.nphi);
        let scratch_len = fft_f
            .get_inplace_scratch_len()
            .max(fft_phi.get_inplace_scratch_len());
        Ok(SynthWorkspace {
            cfg: *cfg,
            grids: GridTables::new(cfg),
            fft_f,
            fft_phi,
            scratch: vec![Complex::new(0.0, 0.0); scratch_len],
            spec: vec![Complex::new(0.0, 0.0); cfg.nf * cfg.nphi],
            tran: vec![Complex::new(0.0, 0.0); cfg.nf * cfg.nphi],
        })
    }

    pub fn config(&self) -> &RadarConfig {
        &self.cfg
    }

    pub fn grids(&self) -> &GridTables {
        &self.grids
    }

    /// Accumulates the model spectrum of `centers` into the internal buffer
    /// (aspect-major layout), replacing previous contents.
    ///
    /// Per aspect row the frequency sweep is evaluated with complex
    /// recurrences (one rotation per factor that is linear in f), so the inner
    /// loop contains no transcendental calls. Matches [`eval_response`] to
    /// floating-point round-off.
    fn fill_spectrum(&mut self, centers: &[ScattererParams]) {
        let (nf, nphi) = (self.cfg.nf, self.cfg.nphi);
        let f0 = self.grids.freqs[0];
        let df = if nf > 1 {
            self.grids.freqs[1] - self.grids.freqs[0]
        } else {
            0.0
        };
        for z in &mut self.spec {
            *z = Complex::new(0.0, 0.0);
        }
        let mut alpha_amp = vec![0.0; nf];
        for c in centers {
            for (m, f) in self.grids.freqs.iter().enumerate() {
                alpha_amp[m] = (f / self.cfg.fc).powf(c.alpha);
            }
            let quad_a = Complex::from_polar(c.a, c.alpha * FRAC_PI_2);
            let distributed = c.kind == ScattererKind::Distributed && c.l > 0.0;
            for n in 0..nphi {
                let (sp, cp) = (self.grids.sin_phi[n], self.grids.cos_phi[n]);
                // Phase ramp e^{-j4πf(x cosφ + y sinφ)/c}, linear in f.
                let k = 4.0 * PI * (c.x * cp + c.y * sp) / C_LIGHT;
                let mut ph = Complex::from_polar(1.0, -k * f0) * quad_a;
                let rot = Complex::from_polar(1.0, -k * df);
                // Aspect damping e^{-2πfγ sinφ}, exponential in f.
                let g = 2.0 * PI * c.gamma * sp;
                let (e0, de) = (-g * f0, -g * df);
                let elast = e0 + de * (nf.saturating_sub(1)) as f64;
                let damp_fast = e0.abs() <= GAMMA_EXP_CLAMP && elast.abs() <= GAMMA_EXP_CLAMP;
                let mut env = if damp_fast { e0.exp() } else { 0.0 };
                let env_rot = de.exp();
                // sinc(2πfL sin(φ−φ̄)/c): track (sin u, cos u) by rotation.
                let sl = 2.0 * PI * c.l * (self.grids.phis[n] - c.phi_bar).sin() / C_LIGHT;
                let (mut u, du) = (sl * f0, sl * df);
                let (mut su, mut cu) = (u.sin(), u.cos());
                let (sdu, cdu) = (du.sin(), du.cos());
                let row = &mut self.spec[n * nf..(n + 1) * nf];
                for (m, slot) in row.iter_mut().enumerate() {
                    let damp = if damp_fast {
                        env
                    } else {
                        (e0 + de * m as f64)
                            .clamp(-GAMMA_EXP_CLAMP, GAMMA_EXP_CLAMP)
                            .exp()
                    };
                    let shape = if distributed {
                        if u.abs() < 1e-12 {
                            1.0 - u * u / 6.0
                        } else {
                            su / u
                        }
                    } else {
                        1.0
                    };
                    *slot += ph * (alpha_amp[m] * damp * shape);
                    ph *= rot;
                    env *= env_rot;
                    if distributed {
                        let s_new = su * cdu + cu * sdu;
                        cu = cu * cdu - su * sdu;
                        su = s_new;
                        u += du;
                    }
                }
            }
        }
    }

    /// Unitary 2-D inverse DFT of the internal spectrum, fftshifted on both
    /// axes, written into `out` (row-major, rows = range).
    fn transform_into(&mut self, out: &mut [Complex<f64>]) {
        let (nf, nphi) = (self.cfg.nf, self.cfg.nphi);
        debug_assert_eq!(out.len(), nf * nphi);
        // Transform along f for each aspect row (contiguous in `spec`).
        for row in self.spec.chunks_exact_mut(nf) {
            self.fft_f.process_with_scratch(row, &mut self.scratch);
        }
        // Transpose to range-major.
        for n in 0..nphi {
            for p in 0..nf {
                self.tran[p * nphi + n] = self.spec[n * nf + p];
            }
        }
        // Transform along φ for each range row.
        for row in self.tran.chunks_exact_mut(nphi) {
            self.fft_phi.process_with_scratch(row, &mut self.scratch);
        }
        // Unitary scale + fftshift both axes.
        let scale = 1.0 / ((nf * nphi) as f64).sqrt();
        let (sr, sc) = (nf / 2, nphi / 2);
        for p in 0..nf {
            let dst_r = (p + sr) % nf;
            for q in 0..nphi {
                out[dst_r * nphi + (q + sc) % nphi] = self.tran[p * nphi + q] * scale;
            }
        }
    }

    /// Renders `centers` into a caller-provided image buffer, reusing all
    /// internal scratch. `out` is resized to the grid.
    pub fn render_into(&mut self, centers: &[ScattererParams], out: &mut Vec<Complex<f64>>) {
        out.resize(self.cfg.nf * self.cfg.nphi, Complex::new(0.0, 0.0));
        self.fill_spectrum(centers);
        self.transform_into(out);
    }

    /// Convenience wrapper returning a full [`Complex64Image`].
    pub fn synthesize(&mut self, s: &ScatterSet) -> Complex64Image {
        let mut img = Complex64Image::zeros(self.cfg);
        self.fill_spectrum(&s.centers);
        let mut out = std::mem::take(&mut img.data);
        self.transform_into(&mut out);
        img.data = out;
        img
    }
}

/// Samples Eq.(1) on the config's (f, φ) grid and applies the unitary 2-D
/// inverse DFT. One-shot convenience over [`SynthWorkspace`].
pub fn synthesize_image(s: &ScatterSet, cfg: &RadarConfig) -> Result<Complex64Image> {
    Ok(SynthWorkspace::new(cfg)?.synthesize(s))
}

/// Squared L2 norm of the complex difference between `observed` and the
/// synthesis of `s` on the observed image's grid.
pub fn reconstruction_cost(observed: &Complex64Image, s: &ScatterSet) -> Result<f64> {
    if observed.rows != observed.config.nf || observed.cols != observed.config.nphi {
        return Err(LdsfError::DimensionMismatch(format!(
            "image {}x{} does not match its config grid {}x{}",
            observed.rows, observed.cols, observed.config.nf, observed.config.nphi
        )));
    }
    let model = synthesize_image(s, &observed.config)?;
    Ok(observed
        .data
        .iter()
        .zip(&model.data)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum())
}

/// Ratio of reconstructed energy to observed energy, clamped to [0, 1]:
/// the fitting-percentage termination statistic.
pub fn fit_percentage(observed: &Complex64Image, s: &ScatterSet) -> Result<f64> {
    let denom = observed.energy();
    if denom <= 0.0 {
        return Err(LdsfError::InvalidInput(
            "fit_percentage needs a non-zero-energy observed image".into(),
        ));
    }
    let model = synthesize_image(s, &observed.config)?;
    Ok((model.energy() / denom).clamp(0.0, 1.0))
}

/// Maps scene coordinates (x, y) in metres to fractional (row, col) pixel
/// coordinates. For a non-zero aspect center the image axes measure the
/// rotated look-frame coordinates `u = x·cosφ₀ + y·sinφ₀`,
/// `v = −x·sinφ₀ + y·cosφ₀`.
pub fn xy_to_pixel(cfg: &RadarConfig, x: f64, y: f64) -> (f64, f64) {
    let (s0, c0) = cfg.aspect_center.sin_cos();
    let u = x * c0 + y * s0;
    let v = -x * s0 + y * c0;
    (
        u / cfg.range_res() + (cfg.nf / 2) as f64,
        v / cfg.cross_res() + (cfg.nphi / 2) as f64,
    )
}

/// Inverse of [`xy_to_pixel`]: fractional (row, col) to scene (x, y) metres.
pub fn pixel_to_xy(cfg: &RadarConfig, row: f64, col: f64) -> (f64, f64) {
    let u = (row - (cfg.nf / 2) as f64) * cfg.range_res();
    let v = (col - (cfg.nphi / 2) as f64) * cfg.cross_res();
    let (s0, c0) = cfg.aspect_center.sin_cos();
    (u * c0 - v * s0, u * s0 + v * c0)
}

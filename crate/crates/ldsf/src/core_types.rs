//! SAR data model, radar geometry, deterministic preprocessing, and the
//! container file formats shared by every other module.
//!
//! The two image currencies are [`Complex64Image`] (complex reflectivity plus
//! radar geometry) and [`MagnitudeImage`] (its modulus). Scattering-center
//! parameter records ([`ScattererParams`]) and sets ([`ScatterSet`]) round-trip
//! through a fixed JSON layout; complex imagery round-trips bit-exactly through
//! the CSAR container (one JSON header line + interleaved little-endian f32).

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Speed of light (m/s), the `c` of the forward model.
pub const C_LIGHT: f64 = 299_792_458.0;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum LdsfError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed container: {0}")]
    Format(String),
    /// No admissible watershed region remains; the extraction loop treats
    /// this as a termination signal rather than a failure.
    #[error("no admissible region: {0}")]
    NoRegion(String),
}

pub type Result<T> = std::result::Result<T, LdsfError>;

/// Radar collection geometry: carrier, bandwidth, aperture, and grid size.
///
/// The default models the X-band 0.3 m × 0.3 m regime: `fc` = 9.6 GHz with
/// bandwidth and aspect span chosen so that `range_res()` and `cross_res()`
/// both come out to exactly 0.3 m on a 128×128 grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    /// Center frequency f_c (Hz).
    pub fc: f64,
    /// Frequency span B (Hz).
    pub bandwidth: f64,
    /// Nominal azimuth φ₀ (rad) at the aperture center.
    pub aspect_center: f64,
    /// Synthetic-aperture angular extent (rad).
    pub aspect_span: f64,
    /// Angle between the slant plane and the ground plane (rad).
    pub depression: f64,
    /// Squint angle (rad).
    pub squint: f64,
    /// Number of frequency samples (range axis).
    pub nf: usize,
    /// Number of aspect samples (cross-range axis).
    pub nphi: usize,
}

impl Default for RadarConfig {
    fn default() -> Self {
        let fc = 9.6e9;
        let res = 0.3;
        RadarConfig {
            fc,
            bandwidth: C_LIGHT / (2.0 * res),
            aspect_center: 0.0,
            aspect_span: C_LIGHT / (2.0 * fc * res),
            depression: 17.0_f64.to_radians(),
            squint: 0.0,
            nf: 128,
            nphi: 128,
        }
    }
}

impl RadarConfig {
    /// Range resolution c/(2B), m per pixel.
    pub fn range_res(&self) -> f64 {
        C_LIGHT / (2.0 * self.bandwidth)
    }

    /// Cross-range resolution c/(2 f_c Δφ), m per pixel.
    pub fn cross_res(&self) -> f64 {
        C_LIGHT / (2.0 * self.fc * self.aspect_span)
    }

    /// Checks the geometric invariants: positive carrier and bandwidth, at
    /// least a 2×2 grid, |depression| < π/2.
    pub fn validate(&self) -> Result<()> {
        if !(self.fc > 0.0) {
            return Err(LdsfError::InvalidParameter(format!(
                "fc must be > 0, got {}",
                self.fc
            )));
        }
        if !(self.bandwidth > 0.0) {
            return Err(LdsfError::InvalidParameter(format!(
                "bandwidth must be > 0, got {}",
                self.bandwidth
            )));
        }
        if self.nf < 2 || self.nphi < 2 {
            return Err(LdsfError::InvalidParameter(format!(
                "grid must be at least 2x2, got {}x{}",
                self.nf, self.nphi
            )));
        }
        if !(self.depression.abs() < std::f64::consts::FRAC_PI_2) {
            return Err(LdsfError::InvalidParameter(format!(
                "|depression| must be < pi/2, got {}",
                self.depression
            )));
        }
        if !(self.aspect_span > 0.0) {
            return Err(LdsfError::InvalidParameter(format!(
                "aspect_span must be > 0, got {}",
                self.aspect_span
            )));
        }
        Ok(())
    }
}

/// Local (point-like) vs. Distributed (extended) scattering mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScattererKind {
    Local,
    Distributed,
}

/// One attributed-scattering-center record θ = {A, α, L, φ̄, γ, x, y}.
///
/// Kind constraints: a `Local` center has L = φ̄ = 0 (no extent); a
/// `Distributed` center has γ = 0 (no aspect damping). `x` is the range
/// coordinate, `y` cross-range, both in metres in the slant plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScattererParams {
    #[serde(rename = "A")]
    pub a: f64,
    pub alpha: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "phi_bar_rad")]
    pub phi_bar: f64,
    pub gamma: f64,
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
    pub kind: ScattererKind,
}

impl ScattererParams {
    /// A point scatterer at (x, y) with amplitude `a`, frequency exponent
    /// `alpha`, and aspect-dependence `gamma`.
    pub fn local(a: f64, alpha: f64, x: f64, y: f64, gamma: f64) -> Self {
        ScattererParams {
            a,
            alpha,
            l: 0.0,
            phi_bar: 0.0,
            gamma,
            x,
            y,
            kind: ScattererKind::Local,
        }
    }

    /// An extended scatterer of length `l` and orientation `phi_bar` centered
    /// at (x, y).
    pub fn distributed(a: f64, alpha: f64, l: f64, phi_bar: f64, x: f64, y: f64) -> Self {
        ScattererParams {
            a,
            alpha,
            l,
            phi_bar,
            gamma: 0.0,
            x,
            y,
            kind: ScattererKind::Distributed,
        }
    }

    /// Checks the kind constraints and amplitude positivity.
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(LdsfError::InvalidParameter(format!(
                "amplitude must be > 0, got {}",
                self.a
            )));
        }
        match self.kind {
            ScattererKind::Local => {
                if self.l != 0.0 || self.phi_bar != 0.0 {
                    return Err(LdsfError::InvalidParameter(
                        "Local scatterer must have L = 0 and phi_bar = 0".into(),
                    ));
                }
            }
            ScattererKind::Distributed => {
                if self.gamma != 0.0 {
                    return Err(LdsfError::InvalidParameter(
                        "Distributed scatterer must have gamma = 0".into(),
                    ));
                }
                if self.l < 0.0 {
                    return Err(LdsfError::InvalidParameter(format!(
                        "length must be >= 0, got {}",
                        self.l
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An ordered set Θ of scattering centers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScatterSet {
    pub centers: Vec<ScattererParams>,
}

impl ScatterSet {
    pub fn new(centers: Vec<ScattererParams>) -> Self {
        ScatterSet { centers }
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.centers {
            c.validate()?;
        }
        Ok(())
    }

    /// Serializes to the interchange JSON: a bare array of objects with fields
    /// in the fixed order {A, alpha, L, phi_bar_rad, gamma, x_m, y_m, kind},
    /// floats written with 9 significant digits.
    pub fn to_json(&self) -> String {
        let mut out = String::from("[");
        for (i, c) in self.centers.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let kind = match c.kind {
                ScattererKind::Local => "Local",
                ScattererKind::Distributed => "Distributed",
            };
            out.push_str(&format!(
                "{{\"A\":{:.8e},\"alpha\":{:.8e},\"L\":{:.8e},\"phi_bar_rad\":{:.8e},\
                 \"gamma\":{:.8e},\"x_m\":{:.8e},\"y_m\":{:.8e},\"kind\":\"{}\"}}",
                c.a, c.alpha, c.l, c.phi_bar, c.gamma, c.x, c.y, kind
            ));
        }
        out.push(']');
        out
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// CSAR container header; one JSON line followed by interleaved f32 samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CsarHeader {
    rows: usize,
    cols: usize,
    dtype: String,
    fc_hz: f64,
    bandwidth_hz: f64,
    aspect_center_rad: f64,
    aspect_span_rad: f64,
    depression_rad: f64,
    squint_rad: f64,
    range_res_m: f64,
    cross_res_m: f64,
}

const CSAR_DTYPE: &str = "c64le-interleaved-f32";

/// Row-major complex image with radar geometry. Rows index range (frequency
/// axis after transform), columns index cross-range (aspect axis).
#[derive(Debug, Clone, PartialEq)]
pub struct Complex64Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex<f64>>,
    pub config: RadarConfig,
    /// (range m/px, cross-range m/px).
    pub pixel_spacing: (f64, f64),
}

impl Complex64Image {
    /// An all-zero image on the config's grid with derived pixel spacing.
    pub fn zeros(config: RadarConfig) -> Self {
        Complex64Image {
            rows: config.nf,
            cols: config.nphi,
            data: vec![Complex::new(0.0, 0.0); config.nf * config.nphi],
            config,
            pixel_spacing: (config.range_res(), config.cross_res()),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> Complex<f64> {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut Complex<f64> {
        &mut self.data[r * self.cols + c]
    }

    /// Per-pixel complex modulus; geometry metadata preserved.
    pub fn magnitude(&self) -> MagnitudeImage {
        MagnitudeImage {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.norm()).collect(),
            config: self.config,
            pixel_spacing: self.pixel_spacing,
        }
    }

    /// Sum of squared moduli.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Pixel-wise difference `self - other` (the CLEAN residual update).
    pub fn subtract(&self, other: &Complex64Image) -> Result<Complex64Image> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LdsfError::DimensionMismatch(format!(
                "cannot subtract {}x{} from {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        let mut out = self.clone();
        for (d, o) in out.data.iter_mut().zip(&other.data) {
            *d -= o;
        }
        Ok(out)
    }

    /// Centered crop; for odd margins the extra line is dropped from the
    /// high-index side.
    pub fn crop_center(&self, out_rows: usize, out_cols: usize) -> Result<Complex64Image> {
        let (r0, c0) = crop_origin(self.rows, self.cols, out_rows, out_cols)?;
        let mut data = Vec::with_capacity(out_rows * out_cols);
        for r in 0..out_rows {
            let src = (r0 + r) * self.cols + c0;
            data.extend_from_slice(&self.data[src..src + out_cols]);
        }
        Ok(Complex64Image {
            rows: out_rows,
            cols: out_cols,
            data,
            config: self.config,
            pixel_spacing: self.pixel_spacing,
        })
    }

    /// Writes the CSAR container: a one-line JSON header terminated by `\n`,
    /// then rows×cols×2 little-endian f32 values, row-major, real then
    /// imaginary per pixel. A written file read back and re-written is
    /// byte-identical.
    pub fn write_csar<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = CsarHeader {
            rows: self.rows,
            cols: self.cols,
            dtype: CSAR_DTYPE.to_string(),
            fc_hz: self.config.fc,
            bandwidth_hz: self.config.bandwidth,
            aspect_center_rad: self.config.aspect_center,
            aspect_span_rad: self.config.aspect_span,
            depression_rad: self.config.depression,
            squint_rad: self.config.squint,
            range_res_m: self.pixel_spacing.0,
            cross_res_m: self.pixel_spacing.1,
        };
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for z in &self.data {
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a CSAR container written by [`Complex64Image::write_csar`].
    pub fn read_csar<R: Read>(r: &mut R) -> Result<Complex64Image> {
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = r.read(&mut byte)?;
            if n == 0 {
                return Err(LdsfError::Format("missing header newline".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
            if header_bytes.len() > 1 << 16 {
                return Err(LdsfError::Format("header line too long".into()));
            }
        }
        let header: CsarHeader = serde_json::from_slice(&header_bytes)?;
        if header.dtype != CSAR_DTYPE {
            return Err(LdsfError::Format(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }
        let n = header.rows * header.cols;
        let mut body = vec![0u8; n * 8];
        r.read_exact(&mut body).map_err(|e| {
            LdsfError::Format(format!("truncated body ({} samples expected): {}", n, e))
        })?;
        let mut data = Vec::with_capacity(n);
        for px in body.chunks_exact(8) {
            let re = f32::from_le_bytes([px[0], px[1], px[2], px[3]]) as f64;
            let im = f32::from_le_bytes([px[4], px[5], px[6], px[7]]) as f64;
            data.push(Complex::new(re, im));
        }
        let config = RadarConfig {
            fc: header.fc_hz,
            bandwidth: header.bandwidth_hz,
            aspect_center: header.aspect_center_rad,
            aspect_span: header.aspect_span_rad,
            depression: header.depression_rad,
            squint: header.squint_rad,
            nf: header.rows,
            nphi: header.cols,
        };
        Ok(Complex64Image {
            rows: header.rows,
            cols: header.cols,
            data,
            config,
            pixel_spacing: (header.range_res_m, header.cross_res_m),
        })
    }

    pub fn save_csar(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_csar(&mut f)
    }

    pub fn load_csar(path: impl AsRef<Path>) -> Result<Complex64Image> {
        let mut f = std::fs::File::open(path)?;
        Self::read_csar(&mut f)
    }
}

/// Row-major non-negative image with the same geometry metadata as
/// [`Complex64Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub config: RadarConfig,
    pub pixel_spacing: (f64, f64),
}

impl MagnitudeImage {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sum of squared values.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Contrast adjustment V_out = a · V_in^γ after normalizing the grid to
    /// [0, 1] by its maximum (an all-zero image stays all-zero).
    pub fn gamma_transform(&self, a: f64, gamma: f64) -> Result<MagnitudeImage> {
        if !(gamma > 0.0) {
            return Err(LdsfError::InvalidParameter(format!(
                "gamma exponent must be > 0, got {}",
                gamma
            )));
        }
        let max = self.data.iter().cloned().fold(0.0_f64, f64::max);
        let mut out = self.clone();
        if max == 0.0 {
            return Ok(out);
        }
        for v in &mut out.data {
            *v = a * (*v / max).powf(gamma);
        }
        Ok(out)
    }

    /// Centered crop with the same tie-break rule as
    /// [`Complex64Image::crop_center`].
    pub fn crop_center(&self, out_rows: usize, out_cols: usize) -> Result<MagnitudeImage> {
        let (r0, c0) = crop_origin(self.rows, self.cols, out_rows, out_cols)?;
        let mut data = Vec::with_capacity(out_rows * out_cols);
        for r in 0..out_rows {
            let src = (r0 + r) * self.cols + c0;
            data.extend_from_slice(&self.data[src..src + out_cols]);
        }
        Ok(MagnitudeImage {
            rows: out_rows,
            cols: out_cols,
            data,
            config: self.config,
            pixel_spacing: self.pixel_spacing,
        })
    }

    /// Value and flat index of the maximum pixel.
    pub fn argmax(&self) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &v) in self.data.iter().enumerate() {
            if v > best.0 {
                best = (v, i);
            }
        }
        best
    }
}

fn crop_origin(
    rows: usize,
    cols: usize,
    out_rows: usize,
    out_cols: usize,
) -> Result<(usize, usize)> {
    if out_rows > rows || out_cols > cols {
        return Err(LdsfError::DimensionMismatch(format!(
            "crop {}x{} exceeds image {}x{}",
            out_rows, out_cols, rows, cols
        )));
    }
    Ok(((rows - out_rows) / 2, (cols - out_cols) / 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {} ~= {} (tol {}), diff {}",
            a,
            b,
            tol,
            (a - b).abs()
        );
    }

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Complex64Image {
        let mut cfg = RadarConfig::default();
        cfg.nf = rows;
        cfg.nphi = cols;
        let mut img = Complex64Image::zeros(cfg);
        for z in &mut img.data {
            *z = Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        img
    }

    #[test]
    fn magnitude_pythagorean_and_zero() {
        let mut cfg = RadarConfig::default();
        cfg.nf = 2;
        cfg.nphi = 2;
        let mut img = Complex64Image::zeros(cfg);
        *img.at_mut(0, 0) = Complex::new(3.0, 4.0);
        let mag = img.magnitude();
        assert_close(mag.at(0, 0), 5.0, 1e-15);
        assert_close(mag.at(1, 1), 0.0, 0.0);
        assert_eq!(mag.pixel_spacing, img.pixel_spacing);
    }

    #[test]
    fn magnitude_matches_scalar_oracle_on_random_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1d5f ^ 11);
        let img = random_image(&mut rng, 8, 8);
        let mag = img.magnitude();
        for (z, &m) in img.data.iter().zip(&mag.data) {
            // Oracle: explicit sqrt(re^2 + im^2) rather than Complex::norm.
            let oracle = (z.re * z.re + z.im * z.im).sqrt();
            assert_close(m, oracle, 1e-13);
        }
    }

    #[test]
    fn magnitude_invariant_under_global_phase_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let img = random_image(&mut rng, 6, 5);
        let psi = 1.234_f64;
        let rot = Complex::new(psi.cos(), psi.sin());
        let mut rotated = img.clone();
        for z in &mut rotated.data {
            *z *= rot;
        }
        let (a, b) = (img.magnitude(), rotated.magnitude());
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn gamma_transform_fixed_points_and_pow_oracle() {
        let mut cfg = RadarConfig::default();
        cfg.nf = 2;
        cfg.nphi = 2;
        let img = MagnitudeImage {
            rows: 2,
            cols: 2,
            data: vec![1.0, 0.0, 0.25, 0.5],
            config: cfg,
            pixel_spacing: (0.3, 0.3),
        };
        let out = img.gamma_transform(1.0, 0.6).unwrap();
        assert_close(out.data[0], 1.0, 1e-15);
        assert_close(out.data[1], 0.0, 0.0);
        // Independent exp/log oracle for 0.25^0.6.
        let oracle = (0.6 * 0.25_f64.ln()).exp();
        assert_close(out.data[2], oracle, 1e-14);
    }

    #[test]
    fn gamma_transform_normalizes_by_max_and_handles_all_zero() {
        let mut cfg = RadarConfig::default();
        cfg.nf = 2;
        cfg.nphi = 2;
        let img = MagnitudeImage {
            rows: 2,
            cols: 2,
            data: vec![4.0, 2.0, 0.0, 1.0],
            config: cfg,
            pixel_spacing: (0.3, 0.3),
        };
        let out = img.gamma_transform(1.0, 0.6).unwrap();
        assert_close(out.data[0], 1.0, 1e-15);
        assert_close(out.data[1], (0.6 * 0.5_f64.ln()).exp(), 1e-14);
        let zeros = MagnitudeImage {
            data: vec![0.0; 4],
            ..img.clone()
        };
        let out = zeros.gamma_transform(1.0, 0.6).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_transform_rejects_nonpositive_gamma() {
        let mut cfg = RadarConfig::default();
        cfg.nf = 2;
        cfg.nphi = 2;
        let img = Complex64Image::zeros(cfg).magnitude();
        assert!(matches!(
            img.gamma_transform(1.0, 0.0),
            Err(LdsfError::InvalidParameter(_))
        ));
        assert!(matches!(
            img.gamma_transform(1.0, -0.5),
            Err(LdsfError::InvalidParameter(_))
        ));
    }

    #[test]
    fn gamma_transform_is_monotone() {
        let mut cfg = RadarConfig::default();
        cfg.nf = 1;
        cfg.nphi = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vals: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..5.0)).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let img = MagnitudeImage {
            rows: 1,
            cols: 16,
            data: vals,
            config: cfg,
            pixel_spacing: (0.3, 0.3),
        };
        let out = img.gamma_transform(2.0, 0.7).unwrap();
        for w in out.data.windows(2) {
            assert!(w[0] <= w[1] + 1e-15);
        }
    }

    #[test]
    fn crop_center_margins_and_tie_break() {
        let mut cfg = RadarConfig::default();
        cfg.nf = 130;
        cfg.nphi = 130;
        let mut img = Complex64Image::zeros(cfg);
        for r in 0..130 {
            for c in 0..130 {
                *img.at_mut(r, c) = Complex::new(r as f64 * 1000.0 + c as f64, 0.0);
            }
        }
        let out = img.crop_center(128, 128).unwrap();
        // Symmetric margin: window starts at (1,1).
        assert_close(out.at(0, 0).re, 1001.0, 0.0);
        assert_close(out.at(127, 127).re, 128.0 * 1000.0 + 128.0, 0.0);

        // Identity when dims match.
        let same = out.crop_center(128, 128).unwrap();
        assert_eq!(same.data, out.data);

        // Odd margin: extra line dropped from the high-index side.
        let mut cfg = RadarConfig::default();
        cfg.nf = 131;
        cfg.nphi = 131;
        let mut img = Complex64Image::zeros(cfg);
        for r in 0..131 {
            for c in 0..131 {
                *img.at_mut(r, c) = Complex::new(r as f64 * 1000.0 + c as f64, 0.0);
            }
        }
        let out = img.crop_center(128, 128).unwrap();
        assert_close(out.at(0, 0).re, 1001.0, 0.0);
        assert_close(out.at(127, 127).re, 128.0 * 1000.0 + 128.0, 0.0);
    }

    #[test]
    fn crop_center_rejects_oversize_and_is_idempotent() {
        let mut cfg = RadarConfig::default();
        cfg.nf = 16;
        cfg.nphi = 16;
        let img = Complex64Image::zeros(cfg);
        assert!(matches!(
            img.crop_center(17, 16),
            Err(LdsfError::DimensionMismatch(_))
        ));
        let once = img.crop_center(10, 12).unwrap();
        let twice = once.crop_center(10, 12).unwrap();
        assert_eq!(once.data, twice.data);
    }

    #[test]
    fn image_energy_cases() {
        let mut cfg = RadarConfig::default();
        cfg.nf = 3;
        cfg.nphi = 3;
        let mut img = Complex64Image::zeros(cfg);
        assert_close(img.energy(), 0.0, 0.0);
        *img.at_mut(1, 1) = Complex::new(3.0, 4.0);
        assert_close(img.energy(), 25.0, 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = random_image(&mut rng, 7, 9);
        // Brute-force oracle.
        let mut acc = 0.0;
        for z in &img.data {
            acc += z.re * z.re + z.im * z.im;
        }
        assert_close(img.energy(), acc, 1e-12 * acc.max(1.0));
        let mag = img.magnitude();
        assert_close(mag.energy(), acc, 1e-10 * acc.max(1.0));
    }

    #[test]
    fn csar_round_trip_is_byte_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 5, 9);
        let mut bytes1 = Vec::new();
        img.write_csar(&mut bytes1).unwrap();
        let back = Complex64Image::read_csar(&mut bytes1.as_slice()).unwrap();
        assert_eq!(back.rows, 5);
        assert_eq!(back.cols, 9);
        let mut bytes2 = Vec::new();
        back.write_csar(&mut bytes2).unwrap();
        assert_eq!(bytes1, bytes2, "read-then-write must be byte-identical");
        // And the f32 quantization is within f32 eps of the original.
        for (a, b) in img.data.iter().zip(&back.data) {
            assert_close(a.re, b.re, 1e-6);
            assert_close(a.im, b.im, 1e-6);
        }
    }

    #[test]
    fn csar_header_fields_and_errors() {
        let img = {
            let mut cfg = RadarConfig::default();
            cfg.nf = 2;
            cfg.nphi = 3;
            Complex64Image::zeros(cfg)
        };
        let mut bytes = Vec::new();
        img.write_csar(&mut bytes).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["dtype"], "c64le-interleaved-f32");
        assert_eq!(header["rows"], 2);
        assert_eq!(header["cols"], 3);
        for key in [
            "fc_hz",
            "bandwidth_hz",
            "aspect_center_rad",
            "aspect_span_rad",
            "depression_rad",
            "squint_rad",
            "range_res_m",
            "cross_res_m",
        ] {
            assert!(header.get(key).is_some(), "missing header field {}", key);
        }
        assert_eq!(bytes.len(), nl + 1 + 2 * 3 * 8);

        // Truncated body -> Format error.
        let truncated = &bytes[..bytes.len() - 4];
        assert!(matches!(
            Complex64Image::read_csar(&mut &truncated[..]),
            Err(LdsfError::Format(_))
        ));
        // Wrong dtype -> Format error.
        let bad = bytes.clone();
        let s = String::from_utf8(bad[..nl].to_vec()).unwrap();
        let s = s.replace("c64le-interleaved-f32", "c64le-f64");
        let mut bad2 = s.into_bytes();
        bad2.push(b'\n');
        bad2.extend_from_slice(&bytes[nl + 1..]);
        assert!(matches!(
            Complex64Image::read_csar(&mut bad2.as_slice()),
            Err(LdsfError::Format(_))
        ));
    }

    #[test]
    fn scatter_set_json_round_trip_and_field_order() {
        let set = ScatterSet::new(vec![
            ScattererParams::local(1.25, 0.5, 1.2345678, -0.87654321, 1.5e-10),
            ScattererParams::distributed(2.5, -1.0, 3.0, 0.3141592653, -2.0, 0.25),
        ]);
        let json = set.to_json();
        // Fixed field order within each object.
        let idx = |needle: &str| json.find(needle).unwrap();
        assert!(idx("\"A\":") < idx("\"alpha\":"));
        assert!(idx("\"alpha\":") < idx("\"L\":"));
        assert!(idx("\"L\":") < idx("\"phi_bar_rad\":"));
        assert!(idx("\"phi_bar_rad\":") < idx("\"gamma\":"));
        assert!(idx("\"gamma\":") < idx("\"x_m\":"));
        assert!(idx("\"x_m\":") < idx("\"y_m\":"));
        assert!(idx("\"y_m\":") < idx("\"kind\":"));
        assert!(json.contains("\"Local\""));
        assert!(json.contains("\"Distributed\""));

        let back = ScatterSet::from_json(&json).unwrap();
        assert_eq!(back.count(), 2);
        for (a, b) in set.centers.iter().zip(&back.centers) {
            // 9 significant digits survive the round trip.
            assert_close(a.a, b.a, 1e-8 * a.a.abs().max(1.0));
            assert_close(a.x, b.x, 1e-8 * a.x.abs().max(1.0));
            assert_close(a.gamma, b.gamma, 1e-8 * a.gamma.abs().max(1e-12));
            assert_eq!(a.kind, b.kind);
        }
    }

    #[test]
    fn scatterer_kind_constraints() {
        let ok = ScattererParams::local(1.0, 0.0, 0.0, 0.0, 1e-10);
        ok.validate().unwrap();
        let ok = ScattererParams::distributed(1.0, 1.0, 2.0, 0.1, 0.0, 0.0);
        ok.validate().unwrap();

        let mut bad = ScattererParams::local(1.0, 0.0, 0.0, 0.0, 0.0);
        bad.l = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = ScattererParams::distributed(1.0, 0.0, 2.0, 0.1, 0.0, 0.0);
        bad.gamma = 1e-10;
        assert!(bad.validate().is_err());
        let bad = ScattererParams::local(0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn radar_config_validation_and_resolution() {
        let cfg = RadarConfig::default();
        cfg.validate().unwrap();
        assert_close(cfg.range_res(), 0.3, 1e-12);
        assert_close(cfg.cross_res(), 0.3, 1e-12);

        let mut bad = cfg;
        bad.fc = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.nf = 1;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.depression = 2.0;
        assert!(bad.validate().is_err());
    }
}

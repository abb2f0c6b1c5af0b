//! C-band geophysical model functions (GMFs) and SSR normalization.
//!
//! The co-pol GMF is CMOD5.N, the 28-coefficient equivalent-neutral-wind
//! formulation; the cross-pol GMF is a pluggable incidence-only polynomial in
//! dB space. Both load their coefficients from versioned JSON files with an
//! integrity checksum — no coefficient is hard-coded in the evaluation path.
//!
//! SSR ("SAR-to-smooth-reference ratio") normalization divides each measured
//! backscatter value by the GMF prediction for a fixed reference sea state
//! (10 m/s wind blowing at 45° to the antenna look), leaving a ratio that is
//! ~1 over rain-free ocean and perturbed where rain or wind anomalies change
//! the surface.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Reference wind speed used by SSR normalization, m/s.
pub const REFERENCE_WIND_SPEED_MS: f64 = 10.0;
/// Reference wind direction relative to the antenna look, degrees.
pub const REFERENCE_WIND_DIRECTION_DEG: f64 = 45.0;

/// Number of coefficients in the CMOD5-family formulation.
pub const CMOD5_COEFFICIENT_COUNT: usize = 28;

const BUILTIN_CMOD5N: &str = include_str!("../data/gmf/cmod5n.json");
const BUILTIN_CMOD2POL: &str = include_str!("../data/gmf/cmod2pol.json");

#[derive(Debug, Error)]
pub enum GmfError {
    #[error("incidence angle {theta}° outside valid range [{lo}°, {hi}°]")]
    IncidenceOutOfRange { theta: f64, lo: f64, hi: f64 },
    #[error("wind speed {0} must be finite and non-negative")]
    InvalidWindSpeed(f64),
    #[error("{origin}: checksum mismatch (file says {expected}, content hashes to {computed})")]
    ChecksumMismatch {
        origin: String,
        expected: String,
        computed: String,
    },
    #[error("{origin}: expected {expected} coefficients, found {found}")]
    CoefficientCount {
        origin: String,
        expected: usize,
        found: usize,
    },
    #[error("{origin}: {reason}")]
    BadCoefficients { origin: String, reason: String },
    #[error("failed to read {origin}: {source}")]
    Io {
        origin: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {origin}: {source}")]
    Parse {
        origin: String,
        #[source]
        source: serde_json::Error,
    },
}

/// A versioned, checksummed GMF coefficient table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmfCoefficients {
    pub name: String,
    pub version: u32,
    pub coefficients: Vec<f64>,
    pub valid_incidence_deg: [f64; 2],
    pub sha256: String,
}

impl GmfCoefficients {
    /// Checksum over a canonical byte layout: UTF-8 name, NUL, u32 LE
    /// version, f64 LE coefficients, f64 LE validity bounds.
    pub fn canonical_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0u8]);
        h.update(self.version.to_le_bytes());
        for c in &self.coefficients {
            h.update(c.to_le_bytes());
        }
        h.update(self.valid_incidence_deg[0].to_le_bytes());
        h.update(self.valid_incidence_deg[1].to_le_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Parse a coefficient table from JSON text and verify integrity.
    /// `origin` labels the source (a path or "builtin") in errors.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self, GmfError> {
        let co: GmfCoefficients =
            serde_json::from_str(text).map_err(|source| GmfError::Parse {
                origin: origin.to_string(),
                source,
            })?;
        let computed = co.canonical_digest();
        if computed != co.sha256 {
            return Err(GmfError::ChecksumMismatch {
                origin: origin.to_string(),
                expected: co.sha256.clone(),
                computed,
            });
        }
        if co.coefficients.is_empty() || co.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(GmfError::BadCoefficients {
                origin: origin.to_string(),
                reason: "coefficients must be non-empty and finite".into(),
            });
        }
        let [lo, hi] = co.valid_incidence_deg;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(GmfError::BadCoefficients {
                origin: origin.to_string(),
                reason: format!("invalid incidence validity range [{lo}, {hi}]"),
            });
        }
        Ok(co)
    }

    pub fn load(path: &Path) -> Result<Self, GmfError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| GmfError::Io {
            origin: origin.clone(),
            source,
        })?;
        Self::from_json_str(&text, &origin)
    }

    fn check_incidence(&self, theta: f64) -> Result<(), GmfError> {
        let [lo, hi] = self.valid_incidence_deg;
        if !theta.is_finite() || theta < lo || theta > hi {
            return Err(GmfError::IncidenceOutOfRange { theta, lo, hi });
        }
        Ok(())
    }
}

/// One GMF evaluation point.
#[derive(Debug, Clone, Copy)]
pub struct GmfInput {
    /// Wind speed at 10 m, m/s. Must be finite and >= 0.
    pub wind_speed_ms: f64,
    /// Wind direction relative to the antenna look direction, degrees.
    /// Any real value; wrapped into [0, 360) internally.
    pub wind_direction_rel_deg: f64,
    /// Incidence angle, degrees. Checked against the coefficient file's
    /// validity range.
    pub incidence_deg: f64,
}

/// The CMOD5.N co-pol (VV) geophysical model function.
#[derive(Debug, Clone)]
pub struct Cmod5n {
    co: GmfCoefficients,
}

impl Cmod5n {
    /// The coefficient table shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_coefficients(
            GmfCoefficients::from_json_str(BUILTIN_CMOD5N, "builtin cmod5n")
                .expect("builtin cmod5n table is valid"),
        )
        .expect("builtin cmod5n table has 28 coefficients")
    }

    pub fn from_file(path: &Path) -> Result<Self, GmfError> {
        Self::from_coefficients(GmfCoefficients::load(path)?)
    }

    pub fn from_coefficients(co: GmfCoefficients) -> Result<Self, GmfError> {
        if co.coefficients.len() != CMOD5_COEFFICIENT_COUNT {
            return Err(GmfError::CoefficientCount {
                origin: co.name.clone(),
                expected: CMOD5_COEFFICIENT_COUNT,
                found: co.coefficients.len(),
            });
        }
        Ok(Cmod5n { co })
    }

    pub fn coefficients(&self) -> &GmfCoefficients {
        &self.co
    }

    /// Evaluate the GMF: linear-units NRCS (sigma^0) for the given wind
    /// state and incidence angle. Strictly positive for wind speeds > 0;
    /// exactly zero at zero wind speed.
    ///
    /// The relative direction is folded into [0°, 180°] before the cosine is
    /// taken, which makes the even symmetry
    /// `evaluate(v, phi, theta) == evaluate(v, 360 - phi, theta)` hold
    /// bit-for-bit, not just analytically.
    pub fn evaluate(&self, input: &GmfInput) -> Result<f64, GmfError> {
        let v = input.wind_speed_ms;
        if !v.is_finite() || v < 0.0 {
            return Err(GmfError::InvalidWindSpeed(v));
        }
        self.co.check_incidence(input.incidence_deg)?;

        // 1-indexed view of the table so the code matches the published form.
        let c = |i: usize| self.co.coefficients[i - 1];
        const ZPOW: f64 = 1.6;
        const THETM: f64 = 40.0;
        const THETHR: f64 = 25.0;

        let x = (input.incidence_deg - THETM) / THETHR;
        let xx = x * x;

        // B0: wind-speed / incidence term.
        let a0 = c(1) + c(2) * x + c(3) * xx + c(4) * x * xx;
        let a1 = c(5) + c(6) * x;
        let a2 = c(7) + c(8) * x;
        let gam = c(9) + c(10) * x + c(11) * xx;
        let s0 = c(12) + c(13) * x;
        let s = a2 * v;
        let a3 = if s >= s0 {
            1.0 / (1.0 + (-s).exp())
        } else {
            let a3_at_s0 = 1.0 / (1.0 + (-s0).exp());
            a3_at_s0 * (s / s0).powf(s0 * (1.0 - a3_at_s0))
        };
        let b0 = a3.powf(gam) * 10f64.powf(a0 + a1 * v);

        // B1: upwind/downwind asymmetry.
        let b1 = c(15) * v * (0.5 + x - (4.0 * (x + c(16) + c(17) * v)).tanh());
        let b1 = (c(14) * (1.0 + x) - b1) / ((0.34 * (v - c(18))).exp() + 1.0);

        // B2: upwind/crosswind modulation.
        let y0 = c(19);
        let pn = c(20);
        let a = y0 - (y0 - 1.0) / pn;
        let b = 1.0 / (pn * (y0 - 1.0).powf(pn - 1.0));
        let v0 = c(21) + c(22) * x + c(23) * xx;
        let d1 = c(24) + c(25) * x + c(26) * xx;
        let d2 = c(27) + c(28) * x;
        let mut v2 = v / v0 + 1.0;
        if v2 < y0 {
            v2 = a + b * (v2 - 1.0).powf(pn);
        }
        let b2 = (-d1 + d2 * v2) * (-v2).exp();

        // Fold direction so the even cosine symmetry is exact in IEEE terms.
        let phi = input.wind_direction_rel_deg.rem_euclid(360.0);
        let phi = if phi > 180.0 { 360.0 - phi } else { phi };
        let csfi = phi.to_radians().cos();
        let cs2fi = 2.0 * csfi * csfi - 1.0;

        Ok(b0 * (1.0 + b1 * csfi + b2 * cs2fi).powf(ZPOW))
    }
}

/// Incidence-only cross-pol GMF: a polynomial in incidence evaluated in dB
/// space, `sigma0 = 10^(poly(theta)/10)`. The shipped default is affine
/// (two coefficients); higher-order tables plug in through the same file
/// format.
#[derive(Debug, Clone)]
pub struct XpolGmf {
    co: GmfCoefficients,
}

impl XpolGmf {
    pub fn builtin() -> Self {
        XpolGmf {
            co: GmfCoefficients::from_json_str(BUILTIN_CMOD2POL, "builtin cmod2pol")
                .expect("builtin cmod2pol table is valid"),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, GmfError> {
        Ok(XpolGmf {
            co: GmfCoefficients::load(path)?,
        })
    }

    pub fn coefficients(&self) -> &GmfCoefficients {
        &self.co
    }

    /// Linear-units NRCS at the given incidence angle.
    pub fn evaluate(&self, incidence_deg: f64) -> Result<f64, GmfError> {
        self.co.check_incidence(incidence_deg)?;
        // Horner evaluation of the dB-space polynomial, ascending order.
        let mut db = 0.0;
        for &c in self.co.coefficients.iter().rev() {
            db = db * incidence_deg + c;
        }
        Ok(10f64.powf(db / 10.0))
    }
}

/// A normalized backscatter pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsrPair {
    pub ssr_vv: f64,
    pub ssr_vh: f64,
}

/// Normalizes measured dual-pol backscatter by the reference-sea-state GMF
/// predictions.
#[derive(Debug, Clone)]
pub struct SsrNormalizer {
    vv: Cmod5n,
    vh: XpolGmf,
}

impl SsrNormalizer {
    pub fn new(vv: Cmod5n, vh: XpolGmf) -> Self {
        SsrNormalizer { vv, vh }
    }

    pub fn builtin() -> Self {
        SsrNormalizer::new(Cmod5n::builtin(), XpolGmf::builtin())
    }

    /// Reference co-pol NRCS at this incidence: CMOD5.N at 10 m/s, 45°.
    pub fn reference_vv(&self, incidence_deg: f64) -> Result<f64, GmfError> {
        self.vv.evaluate(&GmfInput {
            wind_speed_ms: REFERENCE_WIND_SPEED_MS,
            wind_direction_rel_deg: REFERENCE_WIND_DIRECTION_DEG,
            incidence_deg,
        })
    }

    /// Reference cross-pol NRCS at this incidence.
    pub fn reference_vh(&self, incidence_deg: f64) -> Result<f64, GmfError> {
        self.vh.evaluate(incidence_deg)
    }

    /// Normalize one dual-pol measurement (linear units) at an incidence
    /// angle. Homogeneous of degree 1 in the measured backscatter: scaling
    /// both inputs by k scales both outputs by k.
    pub fn normalize(
        &self,
        sigma0_vv: f64,
        sigma0_vh: f64,
        incidence_deg: f64,
    ) -> Result<SsrPair, GmfError> {
        Ok(SsrPair {
            ssr_vv: sigma0_vv / self.reference_vv(incidence_deg)?,
            ssr_vh: sigma0_vh / self.reference_vh(incidence_deg)?,
        })
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Zero-centred smoothing kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Epanechnikov,
    #[default]
    Triangular,
    Gaussian,
}

impl KernelKind {
    /// Density at `u` (no NaN check).
    #[inline]
    pub fn density(self, u: f64) -> f64 {
        match self {
            KernelKind::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelKind::Triangular => {
                let a = u.abs();
                if a <= 1.0 {
                    1.0 - a
                } else {
                    0.0
                }
            }
            KernelKind::Gaussian => INV_SQRT_2PI * (-0.5 * u * u).exp(),
        }
    }

    /// Derivative `K'(u)`. The triangular kernel uses 0 at its kink.
    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            KernelKind::Epanechnikov => {
                if u.abs() < 1.0 {
                    -1.5 * u
                } else {
                    0.0
                }
            }
            KernelKind::Triangular => {
                if u.abs() < 1.0 {
                    -u.signum() * (u != 0.0) as u8 as f64
                } else {
                    0.0
                }
            }
            KernelKind::Gaussian => -u * INV_SQRT_2PI * (-0.5 * u * u).exp(),
        }
    }

    /// Half-width beyond which the density is exactly zero in `f64`.
    /// For the Gaussian this is where `exp(-u^2/2)` underflows.
    pub fn support_radius(self) -> f64 {
        match self {
            KernelKind::Epanechnikov | KernelKind::Triangular => 1.0,
            KernelKind::Gaussian => 38.7,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Epanechnikov => "epanechnikov",
            KernelKind::Triangular => "triangular",
            KernelKind::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            "triangular" => Ok(KernelKind::Triangular),
            "gaussian" | "normal" => Ok(KernelKind::Gaussian),
            other => Err(Error::InvalidArgument(format!(
                "unknown kernel `{other}`; expected epanechnikov, triangular or gaussian"
            ))),
        }
    }
}

/// Kernel density at `u`, rejecting NaN.
pub fn kernel_eval(u: f64, kind: KernelKind) -> Result<f64> {
    if u.is_nan() {
        return Err(Error::InvalidArgument("kernel argument is NaN".into()));
    }
    Ok(kind.density(u))
}

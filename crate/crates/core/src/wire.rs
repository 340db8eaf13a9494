//! JSON bodies exchanged with the restoration service.
//!
//! Images travel as base64-encoded PNG or PNM files. The control scalar is
//! accepted as a JSON number or a numeric string ("0.5", "NaN"), so that
//! non-finite values reach validation instead of failing in the parser.

use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::checkpoint::Provenance;
use crate::degrade::{DatasetSource, DegradationSpec};
use crate::eval::Psnr;
use crate::image::{self, Format, Image, ImageError};
use crate::model::{ModelConfig, ModuleCoefficients};

/// A control scalar as sent by a client. May be non-finite until validated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Control(pub f64);

impl Control {
    pub fn finite(self) -> Option<f64> {
        self.0.is_finite().then_some(self.0)
    }
}

impl Serialize for Control {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.0.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Control {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Control;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a numeric string")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Control, E> {
                Ok(Control(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Control, E> {
                Ok(Control(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Control, E> {
                Ok(Control(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Control, E> {
                v.trim().parse::<f64>().map(Control).map_err(|_| E::custom(format!("not a number: {v:?}")))
            }
        }
        d.deserialize_any(V)
    }
}

/// Body of `POST /restore`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreRequest {
    /// Base64 PNG or PNM.
    pub image: String,
    pub alpha: Control,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

/// Reply to `POST /restore`. The image is encoded in the request's format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreResponse {
    pub image: String,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<Psnr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    pub model_id: String,
    pub timing_ms: f64,
}

/// Alpha grid as `"start:stop:step"`, a comma list, or a JSON array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Text(String),
    Values(Vec<f64>),
}

/// Body of `POST /sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub dataset: DatasetSource,
    pub spec: DegradationSpec,
    pub alphas: GridSpec,
    /// `cfsnet` (default), `cfsnet-sa` or `main-only`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
}

/// Reply to `GET /model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub config: ModelConfig,
    pub provenance: Provenance,
    pub parameter_count: usize,
}

/// Reply to `GET /coeffs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffsResponse {
    pub alpha: f64,
    pub model_id: String,
    pub modules: Vec<ModuleCoefficients>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: String,
}

/// Every non-2xx reply carries `{"error": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// Machine-readable, stable across releases.
    pub code: String,
    pub message: String,
    /// Correlation id, present on internal failures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum WireImageError {
    #[error("image is not valid base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("unrecognised image format (expected PNG or PNM)")]
    UnknownFormat,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Decodes a base64 image and reports the container it came in.
pub fn decode_image(text: &str) -> Result<(Image, Format), WireImageError> {
    let bytes = STANDARD.decode(text.trim())?;
    let format = Format::sniff(&bytes).ok_or(WireImageError::UnknownFormat)?;
    Ok((image::decode(&bytes)?, format))
}

pub fn encode_image(img: &Image, format: Format) -> Result<String, ImageError> {
    Ok(STANDARD.encode(image::encode(img, format)?))
}

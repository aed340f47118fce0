//! Wire types for `/v1/segment` and decoding of the submitted image.

use base64::Engine;
use image::DynamicImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use usam::data::Window;
use usam::prompting::PromptPoint;
use usam::rle::Rle;

use crate::ApiError;

pub const MAX_POINTS: usize = 64;
/// 16-bit inputs carry HU shifted by this offset when a window is requested.
pub const HU_OFFSET: f32 = 1024.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentOptions {
    #[serde(default)]
    pub return_logits: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRequest {
    pub patient_id: String,
    pub slice_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub center: f32,
    pub width: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    /// Base64 PNG, grayscale. 8-bit and 16-bit are scaled to [0, 1] by bit
    /// depth unless `window` is given, in which case 16-bit values are read
    /// as HU + 1024.
    #[serde(default)]
    pub image: Option<String>,
    /// A pair from the dataset the service was started with.
    #[serde(default)]
    pub pair: Option<PairRequest>,
    #[serde(default)]
    pub points: Vec<PromptPoint>,
    #[serde(default)]
    pub window: Option<WindowSpec>,
    #[serde(default)]
    pub options: SegmentOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsPayload {
    /// (classes, height, width) at model resolution.
    pub shape: [usize; 3],
    /// Little-endian f32 values, base64 encoded.
    pub data_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: Rle,
    pub class_counts: Vec<u64>,
    pub class_names: Vec<String>,
    pub config_tag: String,
    pub step: u64,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<LogitsPayload>,
}

impl SegmentRequest {
    pub fn parse(bytes: &[u8]) -> Result<Self, ApiError> {
        let req: Self = serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
        if req.points.len() > MAX_POINTS {
            return Err(ApiError::bad_request(format!(
                "{} points exceed the limit of {MAX_POINTS}",
                req.points.len()
            )));
        }
        match (&req.image, &req.pair) {
            (Some(_), Some(_)) => Err(ApiError::bad_request("give either `image` or `pair`, not both")),
            (None, None) => Err(ApiError::bad_request("request needs `image` or `pair`")),
            _ => Ok(req),
        }
    }
}

/// Decode a base64 PNG into intensities in [0, 1].
pub fn decode_image(b64: &str, window: Option<WindowSpec>) -> Result<Array2<f32>, ApiError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| ApiError::bad_request(format!("image is not a PNG: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(ApiError::bad_request("image is empty"));
    }
    let window = window
        .map(|s| Window::new(s.center, s.width).map_err(|e| ApiError::bad_request(e.to_string())))
        .transpose()?;
    let values: Vec<f32> = match (&img, window) {
        (DynamicImage::ImageLuma16(buf), Some(win)) => buf.as_raw().iter().map(|&v| win.apply(v as f32 - HU_OFFSET)).collect(),
        (_, Some(_)) => return Err(ApiError::bad_request("a HU window needs a 16-bit grayscale image")),
        (DynamicImage::ImageLuma8(buf), None) => buf.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        (other, None) => other.to_luma16().as_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
    };
    Array2::from_shape_vec((h, w), values).map_err(|e| ApiError::bad_request(e.to_string()))
}

#![no_main]

use libfuzzer_sys::fuzz_target;
use usam_serve::{decode_image, SegmentRequest};

fuzz_target!(|data: &[u8]| {
    let Ok(req) = SegmentRequest::parse(data) else { return };
    if let Some(b64) = &req.image {
        let _ = decode_image(b64, req.window);
    }
});

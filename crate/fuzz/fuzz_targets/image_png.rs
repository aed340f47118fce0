#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = usam::data::read_image_png(data) {
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});

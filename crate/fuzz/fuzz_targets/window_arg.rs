#![no_main]

use libfuzzer_sys::fuzz_target;
use usam::data::Window;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(w) = text.parse::<Window>() {
        for hu in [-3000.0f32, -1000.0, 0.0, 40.0, 3000.0] {
            let v = w.apply(hu);
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }
});

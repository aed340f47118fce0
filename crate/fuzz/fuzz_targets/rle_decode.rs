#![no_main]

use libfuzzer_sys::fuzz_target;
use usam::rle::Rle;

fuzz_target!(|data: &[u8]| {
    let Ok(rle) = serde_json::from_slice::<Rle>(data) else { return };
    // keep allocations bounded; the decoder itself rejects inconsistent totals
    if (rle.height as u64) * (rle.width as u64) > 1 << 22 {
        return;
    }
    if let Ok(mask) = rle.decode() {
        assert_eq!(Rle::encode(&mask).decode().unwrap(), mask);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use sound2img_core::audio::decode_wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = decode_wav(data) {
        assert!(clip.sample_rate() > 0);
        assert!(clip.samples().iter().all(|v| v.is_finite()));
    }
});

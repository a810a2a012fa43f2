#![no_main]

use libfuzzer_sys::fuzz_target;
use sound2img_core::manifest::RunManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = RunManifest::from_json(data) {
        let back = RunManifest::from_json(m.to_json().as_bytes()).expect("round trip");
        assert_eq!(back.to_json(), m.to_json());
    }
});

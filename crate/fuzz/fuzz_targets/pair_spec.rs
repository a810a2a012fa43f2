#![no_main]

use libfuzzer_sys::fuzz_target;
use sound2img_core::eval::PairSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = PairSpec::from_json(data) {
        if spec.validate().is_ok() {
            for p in &spec.pairs {
                let _ = spec.expected_for(p);
                let _ = p.label();
            }
        }
    }
});

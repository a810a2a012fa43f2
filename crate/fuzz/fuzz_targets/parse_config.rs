#![no_main]

use libfuzzer_sys::fuzz_target;
use sound2img_cli::config::{parse_config, Settings, ABLATE, DATASET, EVAL, GENERATE};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(file) = parse_config(text) {
        for scope in [GENERATE, ABLATE, EVAL, DATASET] {
            let mut settings = Settings::default();
            if file.apply(&mut settings, scope).is_ok() {
                let _ = settings.pipeline_config();
            }
        }
    }
});

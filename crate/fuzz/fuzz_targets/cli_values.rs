#![no_main]

use libfuzzer_sys::fuzz_target;
use sound2img_core::eval::parse_metrics;
use sound2img_core::pipeline::{AblationSet, TextPosition};

// Comma lists and enums that arrive straight from flags or config values.
fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(set) = s.parse::<AblationSet>() {
        let round: AblationSet = set.to_string().parse().expect("display parses back");
        assert_eq!(round, set);
    }
    let _ = s.parse::<TextPosition>();
    let _ = parse_metrics(s);
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use sound2img_core::eval::MetricReport;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = MetricReport::from_json(data) {
        let _ = r.render_table();
    }
});

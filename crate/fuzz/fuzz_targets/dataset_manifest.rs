#![no_main]

use libfuzzer_sys::fuzz_target;
use sound2img_core::eval::dataset::entry_path;
use sound2img_core::eval::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = DatasetManifest::from_json(data) {
        for e in &m.entries {
            let _ = entry_path(std::path::Path::new("base"), e);
        }
    }
});

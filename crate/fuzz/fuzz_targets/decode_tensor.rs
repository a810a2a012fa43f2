#![no_main]

use libfuzzer_sys::fuzz_target;
use sound2img_core::tensor::{decode_tensor, encode_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data) {
        // Whatever decodes must re-encode to something that decodes to the same tensor.
        let again = decode_tensor(&encode_tensor(&t)).expect("re-encoded tensor decodes");
        assert_eq!(again.shape(), t.shape());
        let bits = |t: &sound2img_core::TensorBuffer| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&again), bits(&t));
    }
});

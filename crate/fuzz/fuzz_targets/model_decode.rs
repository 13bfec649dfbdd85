#![no_main]

use libfuzzer_sys::fuzz_target;
use qtraj::nn::{forward, Conditioning, RnnModel};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = RnnModel::from_bytes(data) {
        let bytes = model.to_bytes().expect("accepted model encodes");
        assert_eq!(RnnModel::from_bytes(&bytes).expect("re-decodes"), model);
        if model.hidden() <= 64 {
            let _ = forward(&model, &[0.5, -1.0], Conditioning::Unknown, None);
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use qtraj::data::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::from_bytes(data) {
        // anything accepted must re-encode to the same bytes
        let again = ds.to_bytes().expect("accepted dataset encodes");
        assert_eq!(Dataset::from_bytes(&again).expect("re-decodes"), ds);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use qtraj::infer::{read_predictions_csv, series_from_rows};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_predictions_csv(data) {
        let _ = series_from_rows(&rows, |r| r.p_forward);
        let _ = series_from_rows(&rows, |r| r.p_smoothed);
    }
});

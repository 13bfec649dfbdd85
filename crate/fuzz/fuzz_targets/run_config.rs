#![no_main]

use libfuzzer_sys::fuzz_target;
use qtraj_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<RunConfig>(data) {
        let _ = cfg.sim.validate();
        let _ = cfg.train.validate();
    }
});

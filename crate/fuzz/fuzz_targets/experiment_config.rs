#![no_main]

use libfuzzer_sys::fuzz_target;
use tlmest::datagen::ScenarioConfig;
use tlmest::experiments::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<ExperimentConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(s) = serde_json::from_slice::<ScenarioConfig>(data) {
        let _ = s.validate();
    }
});

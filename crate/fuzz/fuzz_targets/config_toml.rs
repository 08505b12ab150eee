#![no_main]

use coslat::harness::SimConfig;
use libfuzzer_sys::fuzz_target;

// Any accepted configuration must survive a serialize/parse round trip.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = SimConfig::from_toml_str(text) {
        let again = SimConfig::from_toml_str(&cfg.to_toml_string()).expect("serialized config parses");
        assert_eq!(cfg, again);
    }
});

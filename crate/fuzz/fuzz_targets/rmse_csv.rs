#![no_main]

use coslat::harness::parse_rmse_csv;
use libfuzzer_sys::fuzz_target;

// Malformed tables are errors, never panics; accepted rows are finite.
fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_rmse_csv(data) {
        assert!(rows.iter().all(|r| r.rmse.is_finite() && r.rmse >= 0.0));
    }
});

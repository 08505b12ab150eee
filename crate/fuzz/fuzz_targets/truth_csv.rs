#![no_main]

use coslat::scenario::Truth;
use libfuzzer_sys::fuzz_target;

// Writing rounds to six decimals, so the written form of an accepted table
// must be a fixed point of read-then-write.
fuzz_target!(|data: &[u8]| {
    if let Ok(truth) = Truth::read_csv(data) {
        let mut first = Vec::new();
        truth.write_csv(&mut first).expect("write to memory");
        let reread = Truth::read_csv(first.as_slice()).expect("written truth parses");
        let mut second = Vec::new();
        reread.write_csv(&mut second).expect("write to memory");
        assert_eq!(first, second);
    }
});

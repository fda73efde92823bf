#![no_main]

use libfuzzer_sys::fuzz_target;
use onesided::sparse_io;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = sparse_io::parse_genotype_dense(data) {
        assert!(m.triplets().iter().all(|t| t.value == 1.0 || t.value == 2.0));
    }
});

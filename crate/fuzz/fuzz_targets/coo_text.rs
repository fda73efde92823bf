#![no_main]

use libfuzzer_sys::fuzz_target;
use onesided::sparse_io;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = sparse_io::parse_coo_text(data, None) {
        let mut out = Vec::new();
        sparse_io::write_coo_text(&mut out, m.n_rows(), m.n_cols(), m.triplets()).unwrap();
        assert_eq!(sparse_io::parse_coo_text(&out[..], None).unwrap(), m);
    }
});

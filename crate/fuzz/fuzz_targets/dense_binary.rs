#![no_main]

use libfuzzer_sys::fuzz_target;
use onesided::dense_io;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = dense_io::parse_dense(data) {
        let mut out = Vec::new();
        dense_io::write_dense(&mut out, &m).unwrap();
        assert_eq!(out, data);
    }
    if let Ok(m) = dense_io::parse_dense_square(data) {
        let mut out = Vec::new();
        dense_io::write_dense_square(&mut out, &m).unwrap();
        assert_eq!(out, data);
    }
});

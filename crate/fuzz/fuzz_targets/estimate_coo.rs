#![no_main]

use libfuzzer_sys::fuzz_target;
use onesided::moment;

fuzz_target!(|data: &[u8]| {
    if let Ok(est) = moment::parse_estimate(data) {
        let mut out = Vec::new();
        moment::write_estimate(&mut out, &est).unwrap();
        assert_eq!(moment::parse_estimate(&out[..]).unwrap(), est);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use onesided::sparse_io;

fuzz_target!(|data: &[u8]| {
    if let Ok((m, ids)) = sparse_io::parse_movielens_csv(data) {
        assert_eq!(ids.rows.len(), m.n_rows());
        assert_eq!(ids.cols.len(), m.n_cols());
        assert!(ids.rows.windows(2).all(|w| w[0] < w[1]));
    }
});

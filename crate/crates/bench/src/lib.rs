//! Benchmarks live in `benches/`. Run them with `cargo bench -p gnsp-bench`.

use gnsp_core::Matrix;

/// Deterministic dense matrix with entries in (-1, 1), for benchmark inputs.
pub fn filled(rows: usize, cols: usize, salt: u64) -> Matrix {
    let mut s = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Matrix::from_fn(rows, cols, |_, _| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

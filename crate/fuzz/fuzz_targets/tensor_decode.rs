#![no_main]

use libfuzzer_sys::fuzz_target;
use mal_core::numerics::{decode_tensor, decode_tensor_prefix};

fuzz_target!(|data: &[u8]| {
    let whole = decode_tensor(data);
    if let Ok((t, used)) = decode_tensor_prefix(data) {
        assert!(used <= data.len());
        // A full decode succeeds exactly when the prefix spans the buffer.
        assert_eq!(whole.is_ok(), used == data.len());
        drop(t);
    } else {
        assert!(whole.is_err());
    }
});

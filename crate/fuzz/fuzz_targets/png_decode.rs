#![no_main]

use libfuzzer_sys::fuzz_target;
use mal_core::data::png::decode_png;

fuzz_target!(|data: &[u8]| {
    if let Ok(px) = decode_png(data) {
        let _ = px.to_unit();
    }
});

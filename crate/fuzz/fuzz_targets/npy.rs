#![no_main]

use libfuzzer_sys::fuzz_target;
use xai_eval::{io, npy};

fuzz_target!(|data: &[u8]| {
    if let Ok(arr) = npy::parse(data) {
        let _ = io::heatmap_from_npy(arr.clone());
        let _ = io::mask_from_npy(arr.clone());
        let _ = io::image_from_npy(arr);
    }
});

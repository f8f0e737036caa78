#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = envckb::corpus::import_raw_batch(data) {
        assert!(!images.is_empty());
        for img in &images {
            assert!(img.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
});

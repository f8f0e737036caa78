#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((images, h, w, c)) = envckb::datastore::decode_image_batch(data) {
        for img in &images {
            assert_eq!(img.len(), h * w * c);
            assert!(img.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

// Decoding must never panic; on success a re-encode round-trips.
fuzz_target!(|data: &[u8]| {
    if let Ok((map, consumed)) = envckb::datastore::decode_label_map(data) {
        assert!(consumed <= data.len());
        let z = map.labels.iter().copied().max().unwrap_or(1) as u32;
        let mut out = Vec::new();
        envckb::datastore::encode_label_map(&map, z, &mut out);
        let (back, _) = envckb::datastore::decode_label_map(&out).unwrap();
        assert_eq!(back.labels, map.labels);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

// Decoding must never panic; a decoded checkpoint re-encodes and decodes to
// the same tensor table.
fuzz_target!(|data: &[u8]| {
    if let Ok(ps) = envckb::datastore::decode_checkpoint(data) {
        let bytes = envckb::datastore::encode_checkpoint(&ps);
        envckb::datastore::decode_checkpoint(&bytes).unwrap();
    }
});

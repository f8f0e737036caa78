#![no_main]

use envckb::datastore::{decode_samples, DatasetManifest};
use libfuzzer_sys::fuzz_target;

fn manifest() -> DatasetManifest {
    DatasetManifest {
        version: 1,
        n: 2,
        z: 4,
        m: 2,
        k: 2,
        resolution: 8,
        desc_len: 6,
        c_h: 1.0,
        seed: 0,
        extent: [400.0, 400.0, 60.0],
    }
}

fuzz_target!(|data: &[u8]| {
    let _ = decode_samples(data, &manifest());
});

use envckb::datastore::{self, DatasetManifest, EnvSample};
use envckb::envsense::LabelMap;
use envckb::tensorkit::ParameterSet;
use num_complex::Complex64;
use std::fs;
use std::path::Path;

fn main() {
    let root = Path::new("fuzz/corpus");

    // label map
    let map = LabelMap {
        h: 8,
        w: 8,
        labels: (0..64u8).map(|i| 1 + i % 4).collect(),
        cu_pixel: (4, 4),
        depth: None,
    };
    let mut buf = Vec::new();
    datastore::encode_label_map(&map, 4, &mut buf);
    fs::write(root.join("decode_label_map/valid_map"), &buf).unwrap();

    // samples.bin matching the fuzz target's fixed manifest
    let man = DatasetManifest {
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
    };
    let samples: Vec<EnvSample> = (0..2)
        .map(|i| EnvSample {
            index: i,
            bs_pos: [180.0, 240.0, 40.0],
            cu_pos: [100.0 + i as f64, 100.0, 1.5],
            label_map: map.clone(),
            d_r: 20.0,
            j_po: vec![0.25; 4],
            descriptor: vec![0.125; 6],
            h: vec![Complex64::new(0.5, -0.5); 4],
        })
        .collect();
    let dir = std::env::temp_dir().join("seedgen");
    fs::create_dir_all(&dir).unwrap();
    datastore::write_dataset(&samples, &man, &dir).unwrap();
    fs::copy(dir.join("samples.bin"), root.join("decode_samples/valid_samples")).unwrap();

    // checkpoint
    let mut ps = ParameterSet::new();
    ps.insert("w", &[2, 3], vec![0.5, -0.25, 0.0, 1.0, 2.0, -3.0]);
    ps.insert("b", &[3], vec![0.1, 0.2, 0.3]);
    fs::write(
        root.join("decode_checkpoint/valid_ckpt"),
        datastore::encode_checkpoint(&ps),
    )
    .unwrap();

    // image batch (small) and the bundled corpus header
    let imgs: Vec<Vec<f64>> = (0..2)
        .map(|i| (0..4 * 4 * 3).map(|p| ((p + i) % 256) as f64 / 255.0).collect())
        .collect();
    fs::write(
        root.join("decode_image_batch/valid_batch"),
        datastore::encode_image_batch(&imgs, 4, 4, 3).unwrap(),
    )
    .unwrap();

    // scene config TOML
    let toml = toml::to_string(&envckb::config::SceneConfig::default()).unwrap();
    fs::write(root.join("scene_config_toml/default_config.toml"), toml).unwrap();

    // raw image import: exactly one 32x32x3 image
    fs::write(root.join("import_raw_batch/one_image"), vec![96u8; 3072]).unwrap();

    println!("seeds written");
}

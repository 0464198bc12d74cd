use wscswap::config::DatasetConfig;
use wscswap::synthdata::{SynthDataset, FactorVector, export_images};

fn main() {
    let ds = SynthDataset::new(DatasetConfig::default()).unwrap();
    let mut singles = vec![];
    for (tag, f) in [
        ("id0 neutral", FactorVector { identity_id: 0, pose: [0.0; 3], expression: vec![0.0; 64], background_seed: 1, hair_seed: 1 }),
        ("id0 yawed", FactorVector { identity_id: 0, pose: [0.7, 0.0, 0.0], expression: vec![0.0; 64], background_seed: 1, hair_seed: 1 }),
        ("id0 rolled", FactorVector { identity_id: 0, pose: [0.0, 0.0, 0.7], expression: vec![0.0; 64], background_seed: 1, hair_seed: 1 }),
        ("id1 neutral", FactorVector { identity_id: 1, pose: [0.0; 3], expression: vec![0.0; 64], background_seed: 1, hair_seed: 1 }),
        ("id0 expressive", FactorVector { identity_id: 0, pose: [0.0; 3], expression: vec![1.0; 64], background_seed: 1, hair_seed: 1 }),
    ] {
        let img = ds.render_face(&f, 64).unwrap();
        let px = &img.pixels;
        let mean = px.mean().unwrap();
        let std = (px.mapv(|v| (v - mean) * (v - mean)).mean().unwrap()).sqrt();
        let mask_area = img.face_masks.as_ref().unwrap().sum();
        println!("{tag}: mean {mean:.3} std {std:.3} face px {mask_area}");
        singles.push(img);
    }
    let batch = wscswap::synthdata::ImageBatch::stack(&singles);
    export_images(&batch, std::path::Path::new("/tmp/renders"), "probe").unwrap();
    // mask movement under yaw
    let m0 = singles[0].face_masks.as_ref().unwrap();
    let m1 = singles[1].face_masks.as_ref().unwrap();
    let diff = m0.iter().zip(m1.iter()).filter(|(a, b)| a != b).count();
    println!("mask pixels changed by max yaw: {diff}");
}

use ulfdti::sample::SAMPLE_CHANNELS;
use ulfdti::stats::mean;
use ulfdti::{ShSample, VolumeGrid};
use ulfdti_net::checkpoint::{load, save};
use ulfdti_net::infer::{superresolve, Tiling};
use ulfdti_net::loss::LossWeights;
use ulfdti_net::train::{read_history_csv, smoothed_ends, train, write_history_csv, TrainConfig};
use ulfdti_net::unet::MiniUNetConfig;
use ulfdti_net::{data, DiffSrModel, ModelConfig};

fn tiny_model(seed: u64) -> DiffSrModel {
    DiffSrModel::new(ModelConfig {
        unet: MiniUNetConfig {
            base_features: 4,
            global_tokens: 4,
            ..MiniUNetConfig::default()
        },
        ico_hidden: 2,
        seed,
    })
    .unwrap()
}

fn tiny_config(iterations: usize) -> TrainConfig {
    let mut c = TrainConfig::desk(iterations, 11);
    c.augment.crop_size = [8, 8, 8];
    c.augment.taper_length_voxels = 2;
    c
}

fn tiny_data() -> Vec<ShSample> {
    data::training_set(2, &VolumeGrid::isotropic([12, 12, 12], 1.75), 2).unwrap()
}

#[test]
fn same_seed_gives_identical_history() {
    let d = tiny_data();
    let run = || {
        let mut m = tiny_model(1);
        let h = train(&mut m, &d, &tiny_config(6), |_| {}).unwrap();
        (h, m.params)
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    assert_eq!(h1.len(), 6);
}

#[test]
fn history_roundtrips_through_csv() {
    let d = tiny_data();
    let mut m = tiny_model(2);
    let h = train(&mut m, &d, &tiny_config(3), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_history_csv(&path, &h).unwrap();
    assert_eq!(read_history_csv(&path).unwrap(), h);
    assert!(m.trained);
    assert_eq!(m.iterations, 3);
}

#[test]
fn checkpoint_file_restores_predictions() {
    let d = tiny_data();
    let mut m = tiny_model(3);
    train(&mut m, &d, &tiny_config(2), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save(&path, &m, 11, &LossWeights::default()).unwrap();
    let (back, header) = load(&path).unwrap();
    assert_eq!(header.iterations, 2);
    assert_eq!(header.model, m.config);
    let x = data::sample_to_tensor(&d[0]);
    let a = m.predict(&x).unwrap();
    let b = back.predict(&x).unwrap();
    let scale = a.data.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    for (u, v) in a.data.iter().zip(&b.data) {
        assert!((u - v).abs() <= 1e-5 * scale.max(1.0));
    }
}

#[test]
fn superresolution_restores_input_means() {
    let d = tiny_data();
    let mut m = tiny_model(4);
    train(&mut m, &d, &tiny_config(2), |_| {}).unwrap();
    let coarse = ulfdti::resample::downsample(&d[1].volume, [3.5; 3]);
    let coarse = ShSample::new(coarse).unwrap();
    let out = superresolve(&m, &coarse, d[1].grid(), Tiling::Tiles { size: 8, overlap: 2 }).unwrap();
    assert_eq!(out.grid(), d[1].grid());
    assert_eq!(out.volume.channels, SAMPLE_CHANNELS);
    let n = out.n_voxels();
    for ch in [0, 1] {
        let a = mean(coarse.volume.channel(ch));
        let b = mean(&out.volume.data[ch * n..(ch + 1) * n]);
        assert!(((a - b) / a).abs() < 1e-6, "channel {ch}: {a} vs {b}");
    }
    assert!(out.volume.data.iter().all(|v| v.is_finite()));
}

#[test]
fn fresh_model_is_identity_and_losses_stay_finite() {
    let d = tiny_data();
    let mut m = tiny_model(5);
    let x = data::sample_to_tensor(&d[0]);
    let before = m.predict(&x).unwrap();
    for (a, b) in before.data.iter().zip(&x.data) {
        assert!((a - b).abs() < 1e-9);
    }
    let h = train(&mut m, &d, &tiny_config(4), |_| {}).unwrap();
    assert!(h.iter().all(|r| r.total.is_finite() && r.total >= 0.0));
}

#[test]
fn desk_training_lowers_smoothed_loss() {
    let d = tiny_data();
    let mut m = tiny_model(4);
    let h = train(&mut m, &d, &tiny_config(150), |_| {}).unwrap();
    let (first, last) = smoothed_ends(&h, 30);
    assert!(last < first, "smoothed loss {first} -> {last}");
}

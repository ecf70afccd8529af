use eqocc::data_io::ShapeFamily;
use eqocc::training::{smoothed, train, TrainOutput};
use eqocc::{ModelConfig, TrainConfig};

// The desk model learns sphere occupancy inside 2,000 iterations. Takes
// about 40 minutes on one core.
#[test]
#[ignore = "long training run"]
fn sphere_training_drives_bce_below_threshold() {
    let model = ModelConfig::desk();
    let cfg = TrainConfig {
        families: vec![ShapeFamily::Sphere],
        iterations: 2000,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    };
    let out = train(&model, &cfg, None, &TrainOutput::default()).unwrap();
    let tail = *smoothed(&out.trace, 100).last().unwrap();
    assert!(tail < 0.05, "final smoothed BCE {tail}");
}

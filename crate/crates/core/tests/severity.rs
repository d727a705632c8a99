//! Running-statistics mismatch grows with subject idiosyncrasy.

use adanorm_core::experiments::{prepare_splits, running_dispersion, train_sensor, SensorBenchmark};
use adanorm_core::optim::TrainConfig;
use adanorm_core::NormSpec;

#[test]
fn dispersion_of_filter_means_never_shrinks_with_severity() {
    let mut bench = SensorBenchmark::default();
    bench.train = TrainConfig {
        epochs: 3,
        early_stop_patience: 0,
        ..bench.train.clone()
    };
    let mut last = 0.0;
    for severity in [0.0, 0.4, 0.8] {
        let splits = prepare_splits(&bench, severity, 1).unwrap();
        let (model, _) = train_sensor(&bench, &splits, NormSpec::batch_norm(), 1).unwrap();
        let d = running_dispersion(&model, &splits.test, bench.eval_batch_size).unwrap();
        assert!(
            d >= last,
            "dispersion fell from {last:.4} to {d:.4} when severity rose to {severity}"
        );
        last = d;
    }
}

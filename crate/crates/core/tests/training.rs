use aslsr_core::phantom::make_phantom_set;
use aslsr_core::*;

#[test]
fn reconstruction_dominated_training_halves_the_mse() {
    let set = make_phantom_set(&PhantomSpec {
        shape: [16, 16, 16],
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(set.lr.shape(), [8, 8, 16]);
    let mut s = TrainSettings {
        pyramid: PyramidConfig {
            scale_factor: 2.0,
            num_scales: Some(2),
            min_extent: 4,
        },
        ..Default::default()
    };
    s.generator.base_width = 4;
    s.discriminator.base_width = 4;
    s.loss.alpha = 100.0;
    s.train.epochs_per_scale = 200;
    s.train.seed = 5;
    s.train.log_every = 0;
    let (trained, log) = train_pyramid(&set.lr, &set.t1, &s, None).unwrap();
    assert_eq!(trained.num_scales(), 2);
    assert_eq!(log.records.len(), 400);
    for scale in 0..2 {
        let recs: Vec<_> = log.for_scale(scale).collect();
        let (first, last) = (recs[0], recs[recs.len() - 1]);
        assert!(
            recs.iter().all(
                |r| [r.critic, r.gradient_penalty, r.adversarial, r.mse, r.lowpass, r.total]
                    .iter()
                    .all(|v| v.is_finite())
            ),
            "non-finite record at scale {scale}"
        );
        assert!(
            last.mse <= 0.5 * first.mse,
            "scale {scale}: {} -> {}",
            first.mse,
            last.mse
        );
    }
}

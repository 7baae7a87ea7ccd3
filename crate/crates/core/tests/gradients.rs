use layercache::gradcheck::{check_kl, check_layer, random_case};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_layer_kind_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..90 {
        let (spec, shape) = random_case(i, &mut rng);
        let check = check_layer(spec, &shape, &mut rng).unwrap();
        assert!(
            check.max_error() < 1e-2,
            "{:?} on {:?}: input {:.2e}, params {:?}",
            check.spec,
            check.input_shape,
            check.input_error,
            check.param_errors
        );
    }
}

#[test]
fn kl_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..50 {
        let (logits, log_pd) = check_kl(1 + i % 4, 2 + i % 9, &mut rng).unwrap();
        assert!(logits < 1e-2, "logits {logits:.2e}");
        assert!(log_pd < 1e-2, "log-probabilities {log_pd:.2e}");
    }
}

#[test]
fn five_class_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (logits, _) = check_kl(1, 5, &mut rng).unwrap();
    assert!(logits < 1e-2);
}

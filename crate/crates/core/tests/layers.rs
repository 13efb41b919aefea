mod common;

use common::{gradcheck_error, logdet_error, random_case, round_trip_error, LAYER_KINDS};

#[test]
fn every_layer_inverts_and_reports_its_log_det() {
    for (kind, name) in LAYER_KINDS.iter().enumerate() {
        for seed in 0..25 {
            let case = random_case(kind, seed);
            let rt = round_trip_error(&case);
            assert!(rt <= 1e-8, "{name} seed {seed}: round trip {rt:.3e}");
            let ld = logdet_error(&case);
            assert!(ld <= 1e-5, "{name} seed {seed}: logdet {ld:.3e}");
        }
    }
}

#[test]
fn trainable_layers_pass_gradcheck() {
    for (kind, name) in LAYER_KINDS.iter().enumerate() {
        for seed in 0..10 {
            let case = random_case(kind, seed);
            if let Some(e) = gradcheck_error(&case, seed) {
                assert!(e <= 1e-4, "{name} seed {seed}: gradient error {e:.3e}");
            }
        }
    }
}


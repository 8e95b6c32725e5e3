mod support;

use cod_lab::diffmath::Tensor;
use cod_lab::objective::{cod_loss_value, CodConfig, NegativePool};
use proptest::prelude::*;

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn batch(n: usize, p: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-2.0f64..2.0, p)
            .prop_filter("nonzero", |r| r.iter().map(|x| x * x).sum::<f64>() > 1e-4),
        n,
    )
}

fn pairs() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..=8, 1usize..=16).prop_flat_map(|(n, p)| (batch(n, p), batch(n, p)))
}

fn config() -> impl Strategy<Value = CodConfig> {
    (0.05f64..2.0, any::<bool>(), any::<bool>()).prop_map(|(tau, both, mean)| CodConfig {
        tau,
        negative_pool: if both {
            NegativePool::BothModalities
        } else {
            NegativePool::OppositeOnly
        },
        batch_mean: mean,
        ..CodConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cod_matches_scalar_reference((t, g) in pairs(), cfg in config()) {
        let got = cod_loss_value(&tensor(&t), &tensor(&g), &cfg).unwrap();
        let want = support::cod_oracle::cod_loss(&t, &g, &cfg);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn swapping_modalities_keeps_value((t, g) in pairs(), tau in 0.05f64..2.0) {
        let cfg = CodConfig { tau, ..CodConfig::default() };
        let a = cod_loss_value(&tensor(&t), &tensor(&g), &cfg).unwrap();
        let b = cod_loss_value(&tensor(&g), &tensor(&t), &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn cod_is_nonnegative_with_both_pools((t, g) in pairs(), cfg in config()) {
        // the positive is always in the pool, so each term is at least 0
        prop_assert!(cod_loss_value(&tensor(&t), &tensor(&g), &cfg).unwrap() >= -1e-12);
    }
}

#[test]
fn orthogonal_pairs_worked_batch() {
    let t = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let cfg = CodConfig {
        tau: 1.0,
        ..CodConfig::default()
    };
    let got = cod_loss_value(&tensor(&t), &tensor(&t), &cfg).unwrap();
    let closed = 2.0 * ((std::f64::consts::E + 2.0) / std::f64::consts::E).ln();
    assert!((got - closed).abs() < 1e-12);
    assert!((got - 1.1028).abs() < 1e-4);
}

#[test]
fn stop_gradient_zeroes_teacher_parameters() {
    for seed in 0..20 {
        support::stopgrad::check_seed(seed).unwrap();
    }
}

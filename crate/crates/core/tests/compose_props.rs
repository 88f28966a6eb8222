use dorafactor_core::compose::{
    compose_backward, compose_inner, dual_output_compose, eager_traffic_model, fused_compose, naive_compose,
    stable_compose, ComposeInputs,
};
use dorafactor_core::linalg::{seeded_fixture, seeded_values, Fixture, RealMatrix};
use dorafactor_core::DType;
use proptest::prelude::*;

fn dtype() -> impl Strategy<Value = DType> {
    prop::sample::select(vec![DType::Fp32, DType::Bf16, DType::Fp16])
}

fn operands(rows: usize, d_out: usize, dt: DType, seed: u64) -> (RealMatrix, RealMatrix, Vec<f64>) {
    let base = seeded_fixture(Fixture::Gaussian { mean: 0.0, std: 4.0 }, rows, d_out, seed, dt);
    let lora = seeded_fixture(Fixture::STANDARD_NORMAL, rows, d_out, seed ^ 0x55, dt);
    let g = seeded_values(Fixture::Gaussian { mean: 1.0, std: 0.01 }, d_out, seed ^ 0xaa)
        .into_iter()
        .map(|v| v as f32 as f64)
        .collect();
    (base, lora, g)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fused_dual_and_stable_agree_bitwise(
        rows in 1usize..150, d_out in 1usize..300, tile in 1usize..100,
        dt in dtype(), s in -2.0f64..2.0, seed in any::<u64>(),
    ) {
        let (base, lora, g) = operands(rows, d_out, dt, seed);
        let inputs = ComposeInputs::new(&base, &lora, &g, s).unwrap();
        let stable = stable_compose(&inputs).unwrap();
        let (fused, traffic) = fused_compose(&inputs, tile).unwrap();
        let dual = dual_output_compose(&inputs, true, tile).unwrap();
        prop_assert!(fused.bitwise_eq(&stable));
        prop_assert!(dual.delta.bitwise_eq(&stable));
        prop_assert!(dual.inner.unwrap().bitwise_eq(&compose_inner(&inputs).unwrap()));
        prop_assert_eq!(traffic.pass_count, 1);
    }

    #[test]
    fn stable_is_no_worse_than_half_an_ulp(
        rows in 1usize..20, d_out in 1usize..40, dt in dtype(), seed in any::<u64>(),
    ) {
        let (base, lora, g) = operands(rows, d_out, dt, seed);
        let s = 0.5;
        let inputs = ComposeInputs::new(&base, &lora, &g, s).unwrap();
        let stable = stable_compose(&inputs).unwrap();
        for i in 0..rows {
            for j in 0..d_out {
                let exact = (g[j] - 1.0) * base.get(i, j) + g[j] * (s * lora.get(i, j));
                let err = (stable.get(i, j) - exact).abs();
                // one final rounding plus fp32 intermediate error
                let bound = dt.ulp_at_one() * exact.abs() + 8.0 * f32::EPSILON as f64 * (base.get(i, j).abs() + lora.get(i, j).abs())
                    + dt.round(f64::MIN_POSITIVE);
                prop_assert!(err <= bound, "{} vs {}", stable.get(i, j), exact);
            }
        }
    }

    #[test]
    fn unit_g_kills_base_gradient(rows in 1usize..30, d_out in 1usize..50, dt in dtype(), seed in any::<u64>()) {
        let dy = seeded_fixture(Fixture::STANDARD_NORMAL, rows, d_out, seed, dt);
        let out = compose_backward(&dy, &vec![1.0; d_out], 0.7, None, &vec![1.0; d_out], false).unwrap();
        prop_assert!(out.d_base.data().iter().all(|v| v.to_bits() == 0 || v.to_bits() == (-0.0f64).to_bits()));
    }

    #[test]
    fn eager_traffic_ratio_band(rows in 1usize..10_000, d_out in 1usize..10_000, dt in dtype()) {
        let eager = eager_traffic_model(rows, d_out, dt);
        prop_assert!((10..=12).contains(&eager.pass_count));
        prop_assert_eq!(eager.activation_reads + eager.activation_writes, 9);
    }
}

#[test]
fn naive_loses_correction_stable_keeps_it() {
    let base = RealMatrix::filled(1, 1, DType::Bf16, 256.0);
    let lora = RealMatrix::zeros(1, 1, DType::Bf16);
    let g = [1.0 + 2f64.powi(-9)];
    let inputs = ComposeInputs::new(&base, &lora, &g, 1.0).unwrap();
    assert_eq!(naive_compose(&inputs).unwrap().get(0, 0), 0.0);
    assert_eq!(stable_compose(&inputs).unwrap().get(0, 0), 0.5);
}

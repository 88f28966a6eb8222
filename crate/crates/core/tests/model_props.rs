use dorafactor_core::dispatch::{select_tier, shape_guard, DispatchContext, ForceMode, Tier};
use dorafactor_core::linalg::{plan_chunks, DEFAULT_CHUNK_BUDGET_BYTES};
use dorafactor_core::memory_model::{dense_baseline_bytes, factored_transient_bytes, theoretical_reduction};
use dorafactor_core::stability_lab::{collapse_fractions, sample_g, GModel};
use dorafactor_core::DType;
use proptest::prelude::*;

proptest! {
    #[test]
    fn reduction_strictly_decreasing_in_rank(d_out in 1usize..20_000, d_in in 1usize..40_000, r in 1usize..2048) {
        prop_assert!(theoretical_reduction(d_out, d_in, r + 1) < theoretical_reduction(d_out, d_in, r));
    }

    #[test]
    fn estimates_are_consistent(d_out in 1usize..16_384, d_in in 1usize..32_768, r in 1usize..1024, s_zero: bool, widen: bool) {
        let plan = plan_chunks(d_out, d_in, DEFAULT_CHUNK_BUDGET_BYTES).unwrap();
        let est = factored_transient_bytes(&plan, d_out, r, s_zero, widen);
        prop_assert_eq!(est.persistent_bytes, 0);
        prop_assert_eq!(est.transient_bytes, est.allocations.iter().map(|a| a.bytes).sum::<u64>());
        let dense = dense_baseline_bytes(d_out, d_in, DType::Bf16, true);
        prop_assert_eq!(dense.identity_bytes, (d_in * d_in * 2) as u64);
    }

    #[test]
    fn crossover_is_monotone(rows in 1usize..20_000, d_out_blocks in 1usize..100, extra_rows in 0usize..5000, extra_blocks in 0usize..20) {
        let d_out = d_out_blocks * 128;
        let small = select_tier(&DispatchContext::accelerated(true, rows, d_out)).tier;
        let large = select_tier(&DispatchContext::accelerated(true, rows + extra_rows, d_out + 128 * extra_blocks)).tier;
        if small == Tier::FusedBackward {
            prop_assert_eq!(large, Tier::FusedBackward);
        }
    }

    #[test]
    fn failed_guard_is_always_eager(rows in 1usize..10_000, d_out in 1usize..10_000, which in 0usize..6, training: bool) {
        let mut ctx = DispatchContext::accelerated(training, rows, d_out);
        ctx.force_fused_backward = ForceMode::On;
        match which {
            0 => ctx.accelerator_available = false,
            1 => ctx.kernels_available = false,
            2 => ctx.force_fused = ForceMode::Off,
            3 => ctx.contiguous = false,
            4 => ctx.mag_broadcast_last_dim = false,
            _ => ctx.d_out_divisible_128 = false,
        }
        prop_assert_eq!(select_tier(&ctx).tier, Tier::Eager);
    }

    #[test]
    fn last_dim_magnitude_passes_guard(lead in prop::collection::vec(1usize..8, 0..3), last in 1usize..512, ones in 0usize..3) {
        let mut act = lead.clone();
        act.push(last);
        let mut mag = vec![1; ones.min(act.len() - 1)];
        mag.push(last);
        prop_assert!(shape_guard(&act, &mag));
    }

    #[test]
    fn collapse_fraction_shrinks_with_mantissa(std in 1e-5f64..0.05, seed in any::<u64>()) {
        let g = sample_g(&GModel::Gaussian { mean: 1.0, std }, 2000, seed).unwrap();
        // bf16 (7 bits) >= fp16 (10) >= fp32 (23) >= fp64 (52)
        let f = collapse_fractions(&g, &[DType::Bf16, DType::Fp16, DType::Fp32, DType::Fp64]);
        for w in f.windows(2) {
            prop_assert!(w[0].fraction >= w[1].fraction);
        }
    }
}

use ablb_core::dataset::{positive_set, PromptTemplate, TaskSpec};
use ablb_core::tuner::{
    cancellation_check, epoch_check, run_nasa, Cancellation, EpochVerdict, StopReason, TuneLog, TuneMode, TuneParams,
};
use ablb_core::{BinarySample, HeadId, ModelConfig, ModelState};
use proptest::prelude::*;

fn small_model(seed: u64) -> ModelState {
    ModelState::build(ModelConfig {
        model_dim: 16,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn split() -> (Vec<BinarySample>, Vec<BinarySample>) {
    let task = TaskSpec::add_mod(4, vec![PromptTemplate::default_yes_no()]);
    let all = positive_set(&task.records(), &task.templates, 64).unwrap();
    let (val, train) = all.split_at(5);
    (train.to_vec(), val.to_vec())
}

fn params(lr: f64, mode: TuneMode) -> TuneParams {
    TuneParams {
        lr,
        mode,
        max_epochs: 3,
        batch_size: 4,
        rho: -1e9,
        ..TuneParams::default()
    }
}

fn qk(m: &ModelState, h: HeadId) -> (Vec<u32>, Vec<u32>) {
    let w = &m.params().layers[h.layer].heads[h.head];
    (
        w.wq.iter().map(|v| v.to_bits()).collect(),
        w.wk.iter().map(|v| v.to_bits()).collect(),
    )
}

/// Every parameter except the query/key projections of `moved`.
fn frozen_part(m: &ModelState, moved: &[HeadId]) -> Vec<u32> {
    let mut p = m.params().clone();
    for h in moved {
        let w = &mut p.layers[h.layer].heads[h.head];
        w.wq.fill(0.0);
        w.wk.fill(0.0);
    }
    p.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect()
}

fn replay(log: &TuneLog, rho: f64) {
    for h in &log.heads {
        let (mut a, mut b) = (f64::INFINITY, f64::INFINITY);
        let mut reason = StopReason::MaxEpochs;
        for (&ap, &bp) in h.alpha_trace.iter().zip(&h.beta_trace) {
            if let EpochVerdict::Stop(r) = epoch_check(a, ap, b, bp, rho) {
                reason = r;
                break;
            }
            a = ap;
            b = bp;
        }
        assert_eq!(reason, h.stop_reason);
        assert_eq!(h.epochs, h.alpha_trace.len());
        let last_a = *h.alpha_trace.last().unwrap();
        let last_b = *h.beta_trace.last().unwrap();
        assert_eq!(
            h.cancelled,
            cancellation_check(last_a, h.alpha_init, last_b, h.beta_init) == Cancellation::Revert
        );
        if !h.cancelled {
            assert!(last_a <= h.alpha_init && last_b <= h.beta_init);
            assert_eq!(h.beta_after, last_b);
        }
    }
}

fn head_list(picks: &[(usize, usize)]) -> Vec<HeadId> {
    let mut out: Vec<HeadId> = Vec::new();
    for &(l, h) in picks {
        let id = HeadId::new(l, h);
        if !out.contains(&id) {
            out.push(id);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tuning_respects_the_rules(
        seed in 0u64..1000,
        lr in prop_oneof![Just(0.05), Just(0.5), Just(5.0)],
        picks in prop::collection::vec((0usize..2, 0usize..4), 1..4),
        freeze in any::<bool>(),
    ) {
        let heads = head_list(&picks);
        let (train, val) = split();
        let mode = if freeze { TuneMode::FreezeKey } else { TuneMode::Nasa };
        let p = params(lr, mode);
        let before = small_model(seed);
        let mut m = before.clone();
        let log = run_nasa(&mut m, &heads, &train, &val, f64::NEG_INFINITY, &p).unwrap();
        prop_assert_eq!(log.heads.len(), heads.len());
        replay(&log, p.rho);

        prop_assert_eq!(frozen_part(&m, &heads), frozen_part(&before, &heads));
        for h in &log.heads {
            let id = h.head_id();
            if h.cancelled {
                prop_assert_eq!(qk(&m, id), qk(&before, id));
            }
            if freeze {
                prop_assert_eq!(qk(&m, id).1, qk(&before, id).1);
            }
        }
        if freeze {
            for l in 0..2 {
                for h in 0..4 {
                    let id = HeadId::new(l, h);
                    prop_assert_eq!(qk(&m, id).1, qk(&before, id).1);
                }
            }
        }

        let mut again = before.clone();
        let log2 = run_nasa(&mut again, &heads, &train, &val, f64::NEG_INFINITY, &p).unwrap();
        prop_assert!(again.bit_equal(&m));
        prop_assert_eq!(log2, log);
    }
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let (train, val) = split();
    let before = small_model(3);
    let mut m = before.clone();
    let heads = vec![HeadId::new(0, 1), HeadId::new(1, 2)];
    let log = run_nasa(&mut m, &heads, &train, &val, f64::NEG_INFINITY, &params(0.0, TuneMode::Nasa)).unwrap();
    assert!(m.bit_equal(&before));
    for h in &log.heads {
        assert_eq!(h.stop_reason, StopReason::MaxEpochs);
        assert_eq!(h.epochs, 3);
        assert!(!h.cancelled);
        assert!(h.alpha_trace.iter().all(|&a| a == h.alpha_init));
    }
    assert_eq!(log.initial_val_nas, log.final_val_nas);
}

#[test]
fn halting_freezes_remaining_heads() {
    let (train, val) = split();
    let before = small_model(5);
    let mut m = before.clone();
    let heads = vec![HeadId::new(0, 0), HeadId::new(0, 3), HeadId::new(1, 1)];
    let log = run_nasa(&mut m, &heads, &train, &val, f64::INFINITY, &params(0.5, TuneMode::Nasa)).unwrap();
    assert_eq!(log.halted_at, Some(0));
    assert_eq!(log.heads.len(), 1);
    assert_eq!(frozen_part(&m, &heads[..1]), frozen_part(&before, &heads[..1]));
}

#[test]
fn rho_stops_after_the_first_epoch() {
    let (train, val) = split();
    let mut m = small_model(1);
    let p = TuneParams {
        rho: 1e9,
        ..params(0.5, TuneMode::Nasa)
    };
    let log = run_nasa(&mut m, &[HeadId::new(1, 0)], &train, &val, f64::NEG_INFINITY, &p).unwrap();
    assert_eq!(log.heads[0].stop_reason, StopReason::NasBelowRho);
    assert_eq!(log.heads[0].epochs, 1);
}

#[test]
fn empty_head_list_changes_nothing() {
    let (train, val) = split();
    let before = small_model(2);
    let mut m = before.clone();
    let log = run_nasa(&mut m, &[], &train, &val, 0.0, &params(0.5, TuneMode::Nasa)).unwrap();
    assert!(log.heads.is_empty() && log.initial_val_nas.is_none());
    assert!(m.bit_equal(&before));
}

#[test]
fn stop_disjunction_attribution() {
    // (alpha, alpha', beta, beta', rho) → expected
    let cases = [
        ((1.0, 1.5, 1.0, 0.5, 0.0), EpochVerdict::Stop(StopReason::NasRiseSingle)),
        ((1.0, 1.5, 1.0, 2.0, 9.0), EpochVerdict::Stop(StopReason::NasRiseSingle)),
        ((1.0, 0.5, 1.0, 2.0, 0.9), EpochVerdict::Stop(StopReason::NasBelowRho)),
        ((1.0, 1.0, 1.0, 1.5, 0.5), EpochVerdict::Stop(StopReason::NasRiseModel)),
        ((1.0, 1.0, 1.0, 1.0, 1.0), EpochVerdict::Continue),
        ((f64::INFINITY, 7.0, f64::INFINITY, 7.0, 0.5), EpochVerdict::Continue),
    ];
    for ((a, ap, b, bp, rho), want) in cases {
        assert_eq!(epoch_check(a, ap, b, bp, rho), want, "{a} {ap} {b} {bp} {rho}");
    }
}

#[test]
fn oversized_steps_are_reverted_bit_for_bit() {
    let (train, val) = split();
    let mut reverted = 0;
    for seed in 0..6 {
        let before = small_model(seed);
        let mut m = before.clone();
        let heads = HeadId::all(m.config());
        let p = TuneParams {
            max_epochs: 1,
            ..params(500.0, TuneMode::Nasa)
        };
        let log = run_nasa(&mut m, &heads, &train, &val, f64::NEG_INFINITY, &p).unwrap();
        for h in log.heads.iter().filter(|h| h.cancelled) {
            assert_eq!(qk(&m, h.head_id()), qk(&before, h.head_id()));
            reverted += 1;
        }
    }
    assert!(reverted > 0, "no head was reverted");
}

use proptest::prelude::*;

use nextdit::contextdrop::{drop_ratio, pooled_len, window_for_ratio, DropSpec, WINDOWS};
use nextdit::flowlab::energy_distance;
use nextdit::numkernel::{avg_pool_tokens, softmax};
use nextdit::partitioner::{best_partition, candidate_set, matching_score, pad_batch};
use nextdit::rope::{apply_rope, freq_matrix, scaled_freqs, Coords, ScaleSpec, Strategy as RopeStrategy};
use nextdit::sampler::{make_schedule, Form, ScheduleKind, ScheduleSpec};
use nextdit::Tensor;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn strategy() -> impl Strategy<Value = RopeStrategy> {
    prop::sample::select(RopeStrategy::ALL.to_vec())
}

proptest! {
    #[test]
    fn rope_preserves_row_norms(
        x in tensor(5, 12),
        coords in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 5),
        axes in 1usize..=3,
        strat in strategy(),
        s in 1.0f64..8.0,
        t in 0.0f64..=1.0,
    ) {
        let freqs = scaled_freqs(&freq_matrix(10000.0, 12, axes).unwrap(), &ScaleSpec::new(strat, s, 16.0).at_time(t)).unwrap();
        let y = apply_rope(&x, &Coords(coords), &freqs).unwrap();
        for r in 0..5 {
            let a: f64 = x.row(r).iter().map(|v| v * v).sum();
            let b: f64 = y.row(r).iter().map(|v| v * v).sum();
            prop_assert!((a.sqrt() - b.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn scaled_frequencies_never_exceed_the_base(axes in 1usize..=3, strat in strategy(), s in 1.0f64..16.0, t in 0.0f64..=1.0) {
        let base = freq_matrix(10000.0, 24, axes).unwrap();
        let scaled = scaled_freqs(&base, &ScaleSpec::new(strat, s, 16.0).at_time(t)).unwrap();
        for (a, b) in base.theta.iter().flatten().zip(scaled.theta.iter().flatten()) {
            prop_assert!(*b <= *a * (1.0 + 1e-15));
            prop_assert!(*b >= *a / s * (1.0 - 1e-15));
        }
    }

    #[test]
    fn schedules_are_strictly_increasing(
        mu in 0.05f64..0.95,
        alpha in 0.5f64..30.0,
        beta in 0.5f64..30.0,
        sigma in 0.1f64..10.0,
        steps in 1usize..200,
    ) {
        for kind in [ScheduleKind::Sigmoid { mu, alpha, beta }, ScheduleKind::Rational { sigma }] {
            let ts = make_schedule(&ScheduleSpec::new(kind, steps)).unwrap();
            let t = ts.as_slice();
            prop_assert_eq!(t.len(), steps + 1);
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(t[0] == 0.0 && t[steps] == 1.0);
        }
        let literal = make_schedule(&ScheduleSpec::new(ScheduleKind::Rational { sigma: 1.0 + sigma }, steps).with_form(Form::PaperLiteral)).unwrap();
        prop_assert!(literal.as_slice().iter().all(|&t| (0.0..=1.0).contains(&t)));
    }

    #[test]
    fn best_partition_is_a_scale_invariant_candidate(
        h in 1usize..5000,
        w in 1usize..5000,
        k in 2usize..10,
        n in 1usize..600,
        r in 1.0f64..6.0,
    ) {
        let cands = candidate_set(n, r, 14).unwrap();
        let best = best_partition(h, w, &cands).unwrap();
        prop_assert!(cands.contains(&best));
        prop_assert!(best.area() <= n);
        prop_assert_eq!(best_partition(k * h, k * w, &cands).unwrap(), best);
        // the candidate set is symmetric, so a transposed input scores the same
        let swapped = best_partition(w, h, &cands).unwrap();
        prop_assert_eq!(swapped.area(), best.area());
        prop_assert_eq!(matching_score(&swapped, w, h), matching_score(&best, h, w));
    }

    #[test]
    fn pooling_preserves_the_token_mean(h in 1usize..9, w in 1usize..9, wi in 0usize..5, data in prop::collection::vec(-3.0f64..3.0, 64 * 2)) {
        let window = WINDOWS[wi];
        let x = Tensor::new(vec![h * w, 2], data[..h * w * 2].to_vec()).unwrap();
        let pooled = avg_pool_tokens(&x, (h, w), window).unwrap();
        prop_assert_eq!(pooled.rows(), pooled_len((h, w), window));
        if h % window.0 == 0 && w % window.1 == 0 {
            let mean = |t: &Tensor| t.sum() / t.rows() as f64;
            prop_assert!((mean(&x) - mean(&pooled)).abs() < 1e-12);
        }
    }

    #[test]
    fn drop_windows_respect_the_ratio(r_max in 0.0f64..0.999, t in 0.0f64..=1.0) {
        let spec = DropSpec::new(r_max).unwrap();
        let ratio = drop_ratio(t, &spec);
        let window = window_for_ratio(ratio);
        prop_assert!(nextdit::contextdrop::drop_fraction(window) <= ratio + 1e-15);
        prop_assert!(drop_ratio(1.0, &spec) == 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in tensor(4, 7)) {
        let p = softmax(&x, 1).unwrap();
        for r in 0..4 {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn padding_keeps_sequences_and_marks_pads(lens in prop::collection::vec(1usize..12, 1..6)) {
        let seqs: Vec<Tensor> = lens.iter().map(|&l| Tensor::from_fn(&[l, 3], |i| i as f64 + 1.0)).collect();
        let (batch, mask) = pad_batch(&seqs).unwrap();
        let n = *lens.iter().max().unwrap();
        prop_assert_eq!(batch.shape(), &[lens.len(), n, 3]);
        for (b, &l) in lens.iter().enumerate() {
            prop_assert_eq!(mask.valid_count(b), l);
            let start = b * n * 3;
            prop_assert_eq!(&batch.data()[start..start + l * 3], seqs[b].data());
            prop_assert!(batch.data()[start + l * 3..start + n * 3].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn energy_distance_is_symmetric_and_nonnegative(a in tensor(20, 2), b in tensor(15, 2)) {
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - ba).abs() < 1e-12);
    }
}

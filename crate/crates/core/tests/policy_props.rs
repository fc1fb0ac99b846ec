use grpo_lab::policy::{EvalContext, FeatureSpec, PolicyParams, SnapshotRole};
use grpo_lab::seed;
use grpo_lab::tokens::{Output, Token, Vocab};
use proptest::prelude::*;
use rand::Rng;

const V: usize = 15;

fn params_from(seed_: u64, sigma: f64) -> PolicyParams {
    PolicyParams::gaussian(FeatureSpec::default(), sigma, &mut seed::stream(seed_)).unwrap()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn random_output(rng: &mut impl Rng) -> Output {
    let vocab = Vocab::standard();
    let n = rng.random_range(0..5);
    let mut t: Vec<Token> = (0..n).map(|_| rng.random_range(0..10)).collect();
    t.push(vocab.eos);
    Output::new(t, &vocab).unwrap()
}

#[test]
fn log_prob_grad_matches_central_differences() {
    let mut rng = seed::stream(77);
    let h = 1e-5;
    for inst in 0..120 {
        let p = params_from(1000 + inst, 0.4);
        let ctx_len = rng.random_range(1..24);
        let ctx = EvalContext::new((0..ctx_len).map(|_| rng.random_range(0..V as Token)).collect());
        let o = random_output(&mut rng);
        let g = p.log_prob_grad(&ctx, &o).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        // Every coordinate with a nonzero analytic entry, plus random others.
        let mut idx: Vec<usize> = g.values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        idx.extend((0..10).map(|_| rng.random_range(0..g.values.len())));
        for i in idx {
            let fd = (p.perturbed(i, h).log_prob(&ctx, &o).unwrap() - p.perturbed(i, -h).log_prob(&ctx, &o).unwrap()) / (2.0 * h);
            num += (fd - g.values[i]).powi(2);
            den += g.values[i].powi(2);
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-4, "instance {inst}: relative error {rel}");
    }
}

#[test]
fn uniform_sampling_frequencies_within_three_sigma() {
    let p = PolicyParams::zeros(FeatureSpec::default());
    let ctx = EvalContext::new(vec![1, 2, 3]);
    let mut rng = seed::stream(5);
    let n = 100_000;
    let mut counts = [0u64; V];
    // The first token of each draw is uniform over the alphabet.
    for _ in 0..n {
        let o = p.sample(&ctx, 2, &mut rng).unwrap();
        counts[o.tokens[0] as usize] += 1;
    }
    let q = 1.0 / V as f64;
    let sd = (n as f64 * q * (1.0 - q)).sqrt();
    for (t, &c) in counts.iter().enumerate() {
        assert!((c as f64 - n as f64 * q).abs() < 3.0 * sd + 1.0, "token {t}: {c}");
    }
}

#[test]
fn dominant_logit_is_sampled_almost_always() {
    let mut p = PolicyParams::zeros(FeatureSpec::default());
    p.set_weight(FeatureSpec::BIAS, 4, 20.0);
    let ctx = EvalContext::new(vec![3]);
    let mut rng = seed::stream(9);
    let hits = (0..10_000).filter(|_| p.sample(&ctx, 2, &mut rng).unwrap().tokens[0] == 4).count();
    assert!(hits as f64 / 10_000.0 > 0.999);
    let probs = softmax(&p.logits(&ctx, &[]).unwrap());
    assert!(probs[4] > 0.9999);
}

#[test]
fn uniform_two_token_log_prob() {
    let p = PolicyParams::zeros(FeatureSpec::default());
    let o = Output::new(vec![3, Vocab::standard().eos], &Vocab::standard()).unwrap();
    let lp = p.log_prob(&EvalContext::new(vec![1]), &o).unwrap();
    assert!((lp - 2.0 * (1.0f64 / 15.0).ln()).abs() < 1e-12);
    assert!((lp + 5.4161).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalize(seed_ in 0u64..10_000, ctx in prop::collection::vec(0u16..15, 1..30), prefix in prop::collection::vec(0u16..10, 0..5)) {
        let p = params_from(seed_, 1.0);
        let z = p.logits(&EvalContext::new(ctx), &prefix).unwrap();
        let s: f64 = softmax(&z).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_shift_leaves_probabilities(seed_ in 0u64..10_000, row in 0usize..20, c in -5.0f64..5.0) {
        let p = params_from(seed_, 0.7);
        let ctx = EvalContext::new(vec![1, 2, 3]);
        let o = Output::new(vec![4, 5, Vocab::standard().eos], &Vocab::standard()).unwrap();
        let mut q = p.clone();
        for t in 0..V {
            q.set_weight(row, t, p.weight(row, t) + c);
        }
        prop_assert!((p.log_prob(&ctx, &o).unwrap() - q.log_prob(&ctx, &o).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn contexts_agreeing_on_window_agree(seed_ in 0u64..10_000, head_a in prop::collection::vec(0u16..15, 0..10), head_b in prop::collection::vec(0u16..15, 0..10), tail in prop::collection::vec(0u16..10, 16..20)) {
        // Query parts are identical (no SEP) only when the heads match, so put
        // a shared SEP-led query first and vary what sits beyond the window.
        let sep = Vocab::standard().sep;
        let q = vec![1u16, 2, 3];
        let build = |head: &[u16]| {
            let mut t = q.clone();
            t.push(sep);
            t.extend(head.iter().map(|&x| if x == sep { 0 } else { x }));
            t.extend(&tail);
            EvalContext::new(t)
        };
        let p = params_from(seed_, 0.5);
        prop_assert_eq!(p.logits(&build(&head_a), &[]).unwrap(), p.logits(&build(&head_b), &[]).unwrap());
    }

    #[test]
    fn score_rows_sum_to_zero(seed_ in 0u64..10_000) {
        let p = params_from(seed_, 0.5);
        let o = Output::new(vec![7, 1, Vocab::standard().eos], &Vocab::standard()).unwrap();
        let g = p.log_prob_grad(&EvalContext::new(vec![2, 9]), &o).unwrap();
        for row in g.values.chunks(V) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn snapshots_ignore_later_updates(seed_ in 0u64..10_000, i in 0usize..100, d in -3.0f64..3.0) {
        let mut p = params_from(seed_, 0.5);
        let snap = p.snapshot(SnapshotRole::Old);
        let ctx = EvalContext::new(vec![4, 4]);
        let o = Output::new(vec![8, Vocab::standard().eos], &Vocab::standard()).unwrap();
        let before = snap.log_prob(&ctx, &o).unwrap();
        p.update(|w| w[i] += d);
        prop_assert_eq!(snap.log_prob(&ctx, &o).unwrap(), before);
    }
}

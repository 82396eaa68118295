mod common;

use proptest::prelude::*;
use quase::downstream::{inject_features, FeatureMode};
use quase::encoder::{EncoderConfig, EncoderModel, TokenBatch};
use quase::gradcheck::tiny_encoder;
use quase::pquase::{pooled_pair_representation, ConditionalEncoding};
use quase::span_qa::{decode_beam, decode_greedy, span_loss, token_f1, Span};
use quase::srl_eval::{greedy_match, iou, mapping_upper_bound, span_prf, LabeledSpan, Matcher};
use quase::tensor::{Mask, Mode, Tensor};

use common::{components_oracle, exhaustive};

fn logits(max_t: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (1..=max_t).prop_flat_map(|t| {
        (
            prop::collection::vec(-8.0f32..8.0, t),
            prop::collection::vec(-8.0f32..8.0, t),
        )
    })
}

fn spans(max_end: usize, max_n: usize) -> impl Strategy<Value = Vec<LabeledSpan>> {
    prop::collection::vec((0..max_end, 1..5usize), 0..=max_n)
        .prop_map(|v| v.into_iter().map(|(s, l)| LabeledSpan::new(s, s + l)).collect())
}

/// Largest one-to-one matching by exhaustive search.
fn optimal_matching(preds: &[LabeledSpan], golds: &[LabeledSpan], m: Matcher, used: &mut Vec<bool>) -> usize {
    let Some((p, rest)) = preds.split_first() else { return 0 };
    let mut best = optimal_matching(rest, golds, m, used);
    for j in 0..golds.len() {
        let v = iou(p, &golds[j]);
        let ok = match m {
            Matcher::Exact => v >= 1.0,
            Matcher::Iou(t) => v > 0.0 && v >= t,
        };
        if ok && !used[j] {
            used[j] = true;
            best = best.max(1 + optimal_matching(rest, golds, m, used));
            used[j] = false;
        }
    }
    best
}

fn matchers() -> impl Strategy<Value = Matcher> {
    prop_oneof![Just(Matcher::Exact), (0.05f64..=1.0).prop_map(Matcher::Iou)]
}

fn tiny_model(seed: u64) -> EncoderModel {
    let mut c: EncoderConfig = tiny_encoder(20);
    c.n_layers = 2;
    EncoderModel::new(&c, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn beam_matches_exhaustive_top_k((s, e) in logits(12), k in 1..8usize, max_len in 1..13usize) {
        let oracle = exhaustive(&s, &e, max_len);
        let beam = decode_beam(&s, &e, k, max_len);
        prop_assert_eq!(beam.len(), k.min(oracle.len()));
        for (b, o) in beam.iter().zip(&oracle) {
            prop_assert_eq!((b.start, b.end), (o.1, o.2));
            prop_assert!((b.score - o.0).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_of_one_is_greedy_bit_exactly((s, e) in logits(12), max_len in 1..13usize) {
        let g = decode_greedy(&s, &e, max_len).unwrap();
        let b = decode_beam(&s, &e, 1, max_len);
        prop_assert_eq!(b.len(), 1);
        prop_assert_eq!((b[0].start, b[0].end, b[0].score.to_bits()), (g.start, g.end, g.score.to_bits()));
        prop_assert!(g.start < g.end && g.end <= g.start + max_len && g.end <= s.len());
    }

    #[test]
    fn masked_softmax_is_a_distribution(
        rows in 1..5usize,
        cols in 1..9usize,
        seed in any::<u64>(),
        bits in prop::collection::vec(any::<bool>(), 40),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], 3.0, &mut rng);
        let mut m: Vec<bool> = bits[..rows * cols].to_vec();
        for r in 0..rows {
            m[r * cols + (seed as usize + r) % cols] = true;
        }
        let mask = Mask::new(m.clone(), &[rows, cols]).unwrap();
        let p = x.masked_softmax(&mask, 1).unwrap();
        for r in 0..rows {
            let row = &p.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            for c in 0..cols {
                if !m[r * cols + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn span_loss_is_nonnegative((s, e) in logits(10), g in (0..10usize, 1..4usize)) {
        let t = s.len();
        let start = g.0 % t;
        let gold = Span::new(start, (start + g.1).min(t));
        let l = span_loss(&Tensor::new(s, &[t]).unwrap(), &Tensor::new(e, &[t]).unwrap(), &[gold]).unwrap();
        prop_assert!(l.item().unwrap() >= 0.0);
    }

    #[test]
    fn token_f1_symmetric_and_bounded(a in prop::collection::vec(0..6u8, 0..8), b in prop::collection::vec(0..6u8, 0..8)) {
        let (x, y) = (token_f1(&a, &b), token_f1(&b, &a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn mapping_is_components_of_kept_answers(answers in spans(20, 8), golds in spans(20, 4)) {
        let out = mapping_upper_bound(&answers, &golds);
        prop_assert_eq!(&out, &components_oracle(&answers, &golds));
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                prop_assert!(!a.intersects(b));
            }
        }
        prop_assert_eq!(mapping_upper_bound(&out, &golds), out);
    }

    #[test]
    fn greedy_matching_against_optimal(preds in spans(12, 5), golds in spans(12, 5), m in matchers()) {
        let greedy = greedy_match(&preds, &golds, m).len();
        let best = optimal_matching(&preds, &golds, m, &mut vec![false; golds.len()]);
        prop_assert!(greedy <= best);
        prop_assert!(2 * greedy >= best);
        if m == Matcher::Exact {
            prop_assert_eq!(greedy, best);
        }
        let f = span_prf(&preds, &golds, m).f1;
        prop_assert_eq!(f == 0.0, greedy == 0);
        // two empty sets have nothing matched, so F1 stays 0
        let perfect = greedy > 0 && greedy == preds.len() && greedy == golds.len();
        prop_assert_eq!(f == 1.0, perfect);
    }

    #[test]
    fn iou_of_one_is_exact(preds in spans(12, 5), golds in spans(12, 5)) {
        prop_assert_eq!(span_prf(&preds, &golds, Matcher::Iou(1.0)), span_prf(&preds, &golds, Matcher::Exact));
    }

    #[test]
    fn concatenation_keeps_word_columns(t in 1..6usize, dw in 1..5usize, df in 1..5usize, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&[2, t, dw], 1.0, &mut rng);
        let f = Tensor::randn(&[2, t, df], 1.0, &mut rng);
        let x = inject_features(&w, &f, FeatureMode::Concatenate).unwrap();
        prop_assert_eq!(x.shape(), &[2, t, dw + df][..]);
        for r in 0..2 * t {
            let row = &x.data()[r * (dw + df)..];
            prop_assert_eq!(&row[..dw], &w.data()[r * dw..(r + 1) * dw]);
            prop_assert_eq!(&row[dw..dw + df], &f.data()[r * df..(r + 1) * df]);
        }
    }

    #[test]
    fn pooled_halves_ignore_row_order(t in 1..7usize, seed in any::<u64>(), rot in 0..7usize) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let v = Tensor::randn(&[t + 2, d], 1.0, &mut rng);
        let mut rows: Vec<Vec<f32>> = v.data().chunks(d).map(<[f32]>::to_vec).collect();
        let enc = |rows: &[Vec<f32>]| ConditionalEncoding {
            vectors: Tensor::new(rows.concat(), &[t + 2, d]).unwrap(),
            sentence_range: 1..t + 1,
            question_range: t + 1..t + 2,
        };
        let a = pooled_pair_representation(&enc(&rows)).unwrap().to_vec();
        rows[1..t + 1].rotate_left(rot % t);
        let b = pooled_pair_representation(&enc(&rows)).unwrap().to_vec();
        prop_assert_eq!(&a[..d], &b[..d]);
        for (x, y) in a[d..].iter().zip(&b[d..]) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_never_changes_real_positions(
        seqs in prop::collection::vec(prop::collection::vec(4..20usize, 1..7), 1..4),
        extra in 1..5usize,
        seed in 0..4u64,
    ) {
        let m = tiny_model(seed);
        let tight = TokenBatch::from_sequences(&seqs, None).unwrap();
        let wide = TokenBatch::from_sequences(&seqs, Some(tight.seq_len + extra)).unwrap();
        let a = m.encode(&tight, &mut Mode::Infer).unwrap();
        let b = m.encode(&wide, &mut Mode::Infer).unwrap();
        let d = m.config().d_model;
        for (r, s) in seqs.iter().enumerate() {
            for p in 0..s.len() {
                let i = (r * tight.seq_len + p) * d;
                let j = (r * wide.seq_len + p) * d;
                prop_assert_eq!(&a.data()[i..i + d], &b.data()[j..j + d]);
            }
        }
    }

    #[test]
    fn shuffling_tokens_with_positions_shuffles_output(
        seq in prop::collection::vec(4..20usize, 2..8),
        key in prop::collection::vec(any::<u32>(), 8),
        seed in 0..4u64,
    ) {
        let m = tiny_model(seed);
        let t = seq.len();
        let base = TokenBatch::from_sequences(&[seq.clone()], None).unwrap();
        let mut perm: Vec<usize> = (0..t).collect();
        perm.sort_by_key(|&i| key[i]);
        let mut shuffled = base.clone();
        for (i, &p) in perm.iter().enumerate() {
            shuffled.token_ids[i] = seq[p];
            shuffled.position_ids[i] = p;
        }
        let a = m.encode(&base, &mut Mode::Infer).unwrap();
        let b = m.encode(&shuffled, &mut Mode::Infer).unwrap();
        let d = m.config().d_model;
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..d {
                prop_assert!((b.data()[i * d + c] - a.data()[p * d + c]).abs() < 1e-5);
            }
        }
    }
}

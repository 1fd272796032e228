//! Property tests for invariants that hold over whole input families.
//! Failing cases are not persisted; proptest prints the minimal input.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use probelab::model::{Batch, Model, ModelConfig, Preset};
use probelab::objectives::{corrupt_sr, Action, ExampleGenerator, ObjectiveKind, IGNORE_LABEL};
use probelab::probing::select_best_layer;
use probelab::tensor::{grad_check, ParamStore, Tape, Tensor};
use probelab::tokenizer::{normalize, pack_corpus, train_bpe, BpeOptions, TokenId, Vocab, CLS, MASK, PAD, SEP};
use probelab::training::{adam_step, lr_at, OptimState, TrainConfig};

const CORPUS: &str =
    "a bad cab had a dead bee .\nthe deaf bee fed the cab , a bag .\n\nhe had a head , she had a bed .\n";

fn vocab() -> Vocab {
    train_bpe(CORPUS, 80, &BpeOptions::default()).unwrap()
}

fn text_over_charset() -> impl Strategy<Value = String> {
    proptest::collection::vec("[a-h]{1,7}|[.,]", 1..20).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn decode_inverts_encode_after_normalization(text in text_over_charset()) {
        let v = vocab();
        let ids = v.encode(&text);
        prop_assert!(ids.iter().all(|&id| ![CLS, SEP, MASK, PAD].contains(&id)));
        prop_assert_eq!(v.decode(&ids).unwrap(), normalize(&text, true));
    }

    #[test]
    fn packed_sequences_are_full_length_with_pad_suffix(
        docs in proptest::collection::vec(text_over_charset(), 1..5),
        max_len in 8usize..24,
    ) {
        let v = vocab();
        let corpus = docs.join("\n\n");
        for s in pack_corpus(&v, &corpus, max_len).unwrap() {
            prop_assert_eq!(s.ids.len(), max_len);
            prop_assert_eq!(s.ids[0], CLS);
            let first_pad = s.ids.iter().position(|&t| t == PAD).unwrap_or(max_len);
            prop_assert!(s.ids[first_pad..].iter().all(|&t| t == PAD));
            prop_assert_eq!(s.ids[first_pad - 1], SEP);
        }
    }

    #[test]
    fn examples_obey_rate_rules_and_never_touch_specials(
        text in text_over_charset(),
        seed in any::<u64>(),
        kind_code in 0u8..5,
    ) {
        let v = vocab();
        let kind = ObjectiveKind::from_code(kind_code).unwrap();
        let gen = ExampleGenerator::new(&v, kind, seed);
        for seq in pack_corpus(&v, &text, 32).unwrap() {
            let content: Vec<usize> = (0..seq.ids.len()).filter(|&i| seq.ids[i] as usize >= 5).collect();
            let Ok(ex) = gen.generate(&seq, 0) else {
                prop_assert!(kind == ObjectiveKind::Sr && content.len() < 4);
                continue;
            };
            prop_assert_eq!(&ex, &gen.generate(&seq, 0).unwrap());
            let expected = if kind == ObjectiveKind::Sr {
                content.len()
            } else {
                ((0.15 * content.len() as f64).round() as usize).max(1)
            };
            prop_assert_eq!(ex.supervised(), expected);
            for i in 0..seq.ids.len() {
                if seq.ids[i] as usize >= 5 {
                    continue;
                }
                prop_assert_eq!(ex.input_ids[i], seq.ids[i]);
                prop_assert_eq!(ex.loss_mask[i], 0);
                prop_assert_eq!(ex.labels[i], IGNORE_LABEL);
            }
            if kind == ObjectiveKind::Mlm {
                for i in 0..seq.ids.len() {
                    if ex.loss_mask[i] == 1 {
                        prop_assert_eq!(ex.labels[i], seq.ids[i] as i32);
                    }
                }
            }
        }
    }

    #[test]
    fn sr_shuffle_is_a_derangement_preserving_the_multiset(n in 4usize..60, seed in any::<u64>()) {
        // Distinct content ids make positional fixed points visible.
        let mut ids: Vec<TokenId> = vec![CLS];
        ids.extend((0..n as TokenId).map(|i| i + 5));
        ids.push(SEP);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, plan) = corrupt_sr(&ids, 1000, &mut rng).unwrap();
        let shuffled: Vec<usize> = plan.selected.iter().zip(&plan.actions)
            .filter(|(_, a)| **a == Action::Shuffle).map(|(&p, _)| p).collect();
        let randomized: Vec<usize> = plan.selected.iter().zip(&plan.actions)
            .filter(|(_, a)| **a == Action::Randomize).map(|(&p, _)| p).collect();
        prop_assert!(shuffled.len() >= 2);
        prop_assert!(shuffled.iter().all(|p| !randomized.contains(p)));
        for &p in &shuffled {
            prop_assert_ne!(out[p], ids[p]);
        }
        let mut before: Vec<TokenId> = shuffled.iter().map(|&p| ids[p]).collect();
        let mut after: Vec<TokenId> = shuffled.iter().map(|&p| out[p]).collect();
        before.sort_unstable();
        after.sort_unstable();
        prop_assert_eq!(before, after);
        for i in 0..ids.len() {
            if !shuffled.contains(&i) && !randomized.contains(&i) {
                prop_assert_eq!(out[i], ids[i]);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        data in proptest::collection::vec(-50.0f64..50.0, 54),
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for r in tape.value(y).data().chunks(cols) {
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn composed_graphs_pass_grad_check(
        seed in any::<u64>(),
        n in 1usize..4,
        d in 3usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()
        };
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::new(vec![n, d], uniform(n * d)).unwrap(), false);
        let w = store.add("w", Tensor::new(vec![d, d], uniform(d * d)).unwrap(), false);
        let v = store.add("v", Tensor::new(vec![d, 3], uniform(d * 3)).unwrap(), false);
        let labels: Vec<i64> = (0..n as i64).map(|i| i % 3).collect();
        let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (x, w, v) = (tape.param(s, x), tape.param(s, w), tape.param(s, v));
            let h = tape.matmul(x, w)?;
            let h = tape.layer_norm(h, 1, 1e-12)?;
            let h = tape.gelu(h);
            let a = tape.softmax(h, 1)?;
            let h = tape.mul(h, a)?;
            let h = tape.tanh(h);
            let z = tape.matmul(h, v)?;
            tape.cross_entropy(z, &labels)
        };
        let report = grad_check(f, &mut store, 1e-5).unwrap();
        prop_assert!(report.max_rel_error < 1e-6, "{:?}", report);
    }

    #[test]
    fn dropout_is_identity_at_zero_or_in_eval(data in proptest::collection::vec(-5.0f32..5.0, 1..40), p in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut train = Tape::<f32>::training();
        let x = train.constant(Tensor::new(vec![data.len()], data.clone()).unwrap());
        let y = train.dropout(x, 0.0, &mut rng).unwrap();
        prop_assert_eq!(train.value(y).data(), &data[..]);
        let mut eval = Tape::<f32>::new();
        let x = eval.constant(Tensor::new(vec![data.len()], data.clone()).unwrap());
        let y = eval.dropout(x, p, &mut rng).unwrap();
        prop_assert_eq!(eval.value(y).data(), &data[..]);
    }

    #[test]
    fn lr_schedule_is_continuous_and_peaks_once(warmup in 0u64..50, extra in 1u64..200, peak in 1e-6f64..1e-2) {
        let total = warmup + extra;
        let lrs: Vec<f64> = (0..=total).map(|t| lr_at(t, peak, warmup, total)).collect();
        let max = lrs.iter().cloned().fold(0.0, f64::max);
        prop_assert!((max - peak).abs() <= peak * 1e-12);
        let slope = peak / warmup.max(1).min(extra) as f64;
        for w in lrs.windows(2) {
            prop_assert!((w[1] - w[0]).abs() <= slope * (1.0 + 1e-9));
        }
        prop_assert_eq!(lrs[total as usize], 0.0);
    }

    #[test]
    fn adam_updates_stay_within_the_sanity_bound(
        grads in proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, 6), 1..20),
        lr in 1e-5f64..1e-2,
    ) {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(&[6]), true);
        let cfg = TrainConfig::default();
        let mut state = OptimState::new(&store);
        let bound = 10.0 * lr / (1.0 - cfg.adam.beta1) * (1.0 + 1e-3) + lr * cfg.weight_decay * 1e3;
        for g in grads {
            let before = store.value(id).data().to_vec();
            store.get_mut(id).grad = g;
            adam_step(&mut store, &mut state, lr, &cfg).unwrap();
            for (a, b) in before.iter().zip(store.value(id).data()) {
                prop_assert!(((b - a).abs() as f64) <= bound);
            }
        }
    }

    #[test]
    fn best_layer_is_invariant_under_monotone_maps(
        scores in proptest::collection::vec(0u8..20, 1..13),
        scale in 0.1f64..10.0,
        shift in -50.0f64..50.0,
    ) {
        // Integer-valued scores keep ties exact under the map.
        let raw: Vec<(usize, f64)> = scores.iter().enumerate().map(|(i, &s)| (i + 1, s as f64)).collect();
        let mapped: Vec<(usize, f64)> = raw.iter().map(|&(l, s)| (l, (scale * s + shift).exp())).collect();
        let cubed: Vec<(usize, f64)> = raw.iter().map(|&(l, s)| (l, s.powi(3))).collect();
        let best = select_best_layer(&raw);
        prop_assert_eq!(best, select_best_layer(&mapped));
        prop_assert_eq!(best, select_best_layer(&cubed));
    }
}

fn micro_model(seed: u64) -> Model<f32> {
    let mut c = ModelConfig::from_preset(Preset::Tiny, 40, 12);
    c.d_hidden = 16;
    c.d_ff = 24;
    c.n_heads = 2;
    Model::init(c.with_objective(ObjectiveKind::Mlm), seed).unwrap()
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<TokenId>>> {
    (1usize..5, 2usize..12).prop_flat_map(|(b, l)| {
        proptest::collection::vec(
            (1usize..=l).prop_flat_map(move |real| {
                proptest::collection::vec(5u32..40, real).prop_map(move |mut r| {
                    r.resize(l, PAD);
                    r
                })
            }),
            b,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn attention_ignores_pad_and_rows_sum_to_one(rows in rows_strategy()) {
        let m = micro_model(3);
        let out = m.forward(&Batch::new(&rows).unwrap()).unwrap();
        for a in &out.attention {
            let l = rows[0].len();
            for (i, r) in a.data().chunks(l).enumerate() {
                let b = i / (a.shape()[1] * l);
                prop_assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                for (k, &p) in r.iter().enumerate() {
                    if rows[b][k] == PAD {
                        prop_assert_eq!(p, 0.0);
                    }
                }
            }
        }
        prop_assert_eq!(out.cls_by_layer.len(), m.config().n_layers);
    }

    #[test]
    fn forward_is_equivariant_to_batch_permutation(rows in rows_strategy(), rot in 0usize..4) {
        let m = micro_model(5);
        let k = rot % rows.len();
        let mut rotated = rows.clone();
        rotated.rotate_left(k);
        let a = m.forward(&Batch::new(&rows).unwrap()).unwrap();
        let b = m.forward(&Batch::new(&rotated).unwrap()).unwrap();
        let n = rows.len();
        for (x, y) in a.cls_by_layer.iter().zip(&b.cls_by_layer) {
            let d = x.shape()[1];
            for i in 0..n {
                prop_assert_eq!(x.row(i), y.row((i + n - k) % n), "row {} dim {}", i, d);
            }
        }
    }
}

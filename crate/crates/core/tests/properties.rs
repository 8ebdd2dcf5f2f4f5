use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqrq::codebook::{frame_posteriors, quantize, QuantizedFrameSequence};
use seqrq::ctc::{
    beam_decode, beam_decode_scored, collapse, ctc_log_likelihood, ctc_log_likelihood_value,
    enumerate_probability, greedy_decode, PhonemeSequence,
};
use seqrq::eval::{export_codebook_2d, phoneme_error_rate};
use seqrq::numerics::{argmax, Tape, Tensor};
use seqrq::segmentation::{expand, runs, segment};

fn random_probs(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut p = Tensor::from_fn(t, v, |_, _| rng.random_range(0.05..1.0));
    for i in 0..t {
        let s: f64 = p.row_slice(i).iter().sum();
        for k in 0..v {
            p.set(i, k, p.get(i, k) / s);
        }
    }
    p
}

fn ln(p: &Tensor<f64>) -> Tensor<f64> {
    p.map(f64::ln)
}

/// Probability of every collapsed sequence, by brute force over all paths.
fn collapsed_distribution(p: &Tensor<f64>, blank: usize) -> HashMap<PhonemeSequence, f64> {
    let (t, v) = (p.rows(), p.cols());
    let mut out = HashMap::new();
    let mut path = vec![0usize; t];
    'outer: loop {
        let prob: f64 = path.iter().enumerate().map(|(i, &k)| p.get(i, k)).product();
        *out.entry(collapse(&path, blank)).or_insert(0.0) += prob;
        for i in 0..t {
            path[i] += 1;
            if path[i] < v {
                continue 'outer;
            }
            path[i] = 0;
        }
        return out;
    }
}

fn index_seq() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..4, 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn runs_round_trip(ids in index_seq()) {
        let r = runs(&ids);
        prop_assert_eq!(expand(&r), ids.clone());
        prop_assert!(!r.is_empty() && r.len() <= ids.len());
        prop_assert!(r.windows(2).all(|w| w[0].unit_id != w[1].unit_id));
        prop_assert_eq!(runs(&expand(&r)), r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn segmentation_invariants(ids in index_seq(), blank in 0usize..4) {
        let tape = Tape::new();
        let table = Tensor::from_fn(4, 3, |k, j| (k * 3 + j) as f64 * 0.1);
        let e = tape.leaf(table.clone());
        let q = QuantizedFrameSequence { indices: ids.clone(), st_vectors: e.gather_rows(&ids).unwrap() };
        let seg = segment(&q, blank).unwrap();
        prop_assert_eq!(expand(&seg.tiling), ids.clone());
        let kept: Vec<usize> = seg.tiling.iter().filter(|r| r.unit_id != blank).map(|r| r.unit_id).collect();
        prop_assert_eq!(seg.unit_ids(), kept);
        prop_assert!(seg.len() <= seg.tiling.len());
        for s in &seg.segments {
            // forward value is the codeword itself
            let v = s.vector.value();
            for j in 0..3 {
                prop_assert!((v.get(0, j) - table.get(s.unit_id, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn segment_gradient_is_conserved(ids in index_seq(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blank = 3;
        prop_assume!(ids.iter().any(|&i| i != blank));
        let tape = Tape::new();
        let frames = tape.leaf(Tensor::from_fn(ids.len(), 2, |_, _| rng.random_range(-1.0..1.0)));
        let q = QuantizedFrameSequence { indices: ids.clone(), st_vectors: frames };
        let memory = segment(&q, blank).unwrap().memory().unwrap().unwrap();
        let w = Tensor::from_fn(memory.rows(), 2, |_, _| rng.random_range(-1.0..1.0));
        let loss = memory.mul(tape.constant(w.clone())).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap().get_or_zeros(frames);
        for j in 0..2 {
            let upstream: f64 = (0..w.rows()).map(|s| w.get(s, j)).sum();
            let received: f64 = (0..g.rows()).map(|t| g.get(t, j)).sum();
            prop_assert!((upstream - received).abs() < 1e-12);
        }
        // blank frames receive nothing
        for (t, &id) in ids.iter().enumerate() {
            if id == blank {
                prop_assert_eq!(g.row_slice(t), &[0.0, 0.0][..]);
            }
        }
    }

    #[test]
    fn quantize_and_posteriors_agree(seed in 0u64..10_000, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, v, d) = (rng.random_range(1..6), rng.random_range(2..6), rng.random_range(1..4));
        let h = Tensor::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0));
        let e = Tensor::from_fn(v, d, |_, _| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let q = quantize(tape.leaf(h.clone()), tape.leaf(e.clone())).unwrap();
        let p = frame_posteriors(tape.leaf(h.clone()), tape.leaf(e.clone())).unwrap().value();
        let stv = q.st_vectors.value();
        for i in 0..t {
            let s: f64 = p.row_slice(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row_slice(i).iter().all(|&x| x >= 0.0));
            prop_assert_eq!(argmax(p.row_slice(i)), q.indices[i]);
            prop_assert_eq!(stv.row_slice(i), e.row_slice(q.indices[i]));
        }
        // translating everything by a constant vector
        let c: Vec<f64> = (0..d).map(|j| shift * (j as f64 + 1.0)).collect();
        let hs = Tensor::from_fn(t, d, |i, j| h.get(i, j) + c[j]);
        let es = Tensor::from_fn(v, d, |i, j| e.get(i, j) + c[j]);
        let q2 = quantize(tape.leaf(hs.clone()), tape.leaf(es.clone())).unwrap();
        let p2 = frame_posteriors(tape.leaf(hs), tape.leaf(es)).unwrap().value();
        prop_assert_eq!(q2.indices, q.indices);
        for (a, b) in p.data().iter().zip(p2.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ctc_matches_enumeration(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rng.random_range(2..=4);
        let blank = rng.random_range(0..v);
        let labels: Vec<usize> = (0..v).filter(|&k| k != blank).collect();
        let s = rng.random_range(1..=3);
        let target = PhonemeSequence((0..s).map(|_| labels[rng.random_range(0..labels.len())]).collect());
        prop_assume!(target.min_frames() <= 8);
        let t = rng.random_range(target.min_frames()..=8);
        let p = random_probs(t, v, &mut rng);
        let expected = enumerate_probability(&p, &target, blank);
        let got = ctc_log_likelihood_value(&ln(&p), &target, blank).unwrap().exp();
        prop_assert!((got - expected).abs() < 1e-9, "{} vs {}", got, expected);
    }

    #[test]
    fn greedy_output_is_collapsed_argmax_path(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, v) = (rng.random_range(1..20), rng.random_range(2..5));
        let blank = v - 1;
        let logp = ln(&random_probs(t, v, &mut rng));
        let path: Vec<usize> = logp.iter_rows().map(argmax).collect();
        let out = greedy_decode(&logp, blank);
        prop_assert!(!out.ids().contains(&blank));
        prop_assert_eq!(&out, &collapse(&path, blank));
        if out.adjacent_repeats() > 0 {
            prop_assert!(path.contains(&blank));
        }
    }

    #[test]
    fn beam_score_is_exact_probability_of_result(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, v) = (rng.random_range(1..7), rng.random_range(2..4));
        let blank = rng.random_range(0..v);
        let p = random_probs(t, v, &mut rng);
        let dist = collapsed_distribution(&p, blank);
        for width in [1, 2, 4, 8] {
            let (hyp, score) = beam_decode_scored(&ln(&p), blank, width).unwrap();
            prop_assert!((score.exp() - dist[&hyp]).abs() < 1e-12);
        }
    }

    #[test]
    fn per_matches_recursive_oracle(
        r in prop::collection::vec(0usize..4, 1..7),
        h in prop::collection::vec(0usize..4, 0..7),
    ) {
        fn lev(a: &[usize], b: &[usize]) -> usize {
            match (a, b) {
                ([], _) => b.len(),
                (_, []) => a.len(),
                ([x, ra @ ..], [y, rb @ ..]) => {
                    let sub = lev(ra, rb) + usize::from(x != y);
                    sub.min(lev(ra, b) + 1).min(lev(a, rb) + 1)
                }
            }
        }
        let report = phoneme_error_rate(&PhonemeSequence(r.clone()), &PhonemeSequence(h.clone())).unwrap();
        prop_assert_eq!(report.errors(), lev(&r, &h));
        prop_assert_eq!(report.ref_len, r.len());
        // deletions minus insertions is fixed by the lengths
        prop_assert_eq!(report.deletions as i64 - report.insertions as i64, r.len() as i64 - h.len() as i64);
    }

    #[test]
    fn codebook_projection_is_centered(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (rng.random_range(3..12), rng.random_range(2..9));
        let e = Tensor::from_fn(v, d, |_, _| rng.random_range(-3.0..3.0));
        let labels: Vec<String> = (0..v).map(|k| k.to_string()).collect();
        let pts = export_codebook_2d(&e, &labels).unwrap();
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (_, x, y)| (a + x, b + y));
        prop_assert!(sx.abs() < 1e-12 && sy.abs() < 1e-12, "{} {}", sx, sy);
    }
}

#[test]
fn ctc_oracle_fifty_cases_with_repeats() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut with_repeats = 0;
    let mut cases = 0;
    while cases < 50 {
        let v = rng.random_range(2..=4);
        let blank = v - 1;
        let s = rng.random_range(1..=3);
        let mut ids: Vec<usize> = (0..s).map(|_| rng.random_range(0..blank)).collect();
        if cases % 3 == 0 && s >= 2 {
            ids[1] = ids[0];
        }
        let target = PhonemeSequence(ids);
        if target.min_frames() > 8 {
            continue;
        }
        let t = rng.random_range(target.min_frames()..=8);
        let p = random_probs(t, v, &mut rng);
        let expected = enumerate_probability(&p, &target, blank);
        let tape = Tape::new();
        let got = ctc_log_likelihood(tape.leaf(ln(&p)), &target, blank)
            .unwrap()
            .log_likelihood
            .item()
            .exp();
        assert!((got - expected).abs() < 1e-9, "case {cases}: {got} vs {expected}");
        with_repeats += usize::from(target.adjacent_repeats() > 0);
        cases += 1;
    }
    assert!(with_repeats >= 10);
}

#[test]
fn target_probabilities_sum_to_at_most_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (t, v) = (rng.random_range(1..=5), rng.random_range(2..=3));
        let blank = v - 1;
        let p = random_probs(t, v, &mut rng);
        let dist = collapsed_distribution(&p, blank);
        let mut total = 0.0;
        for target in dist.keys().filter(|s| !s.is_empty()) {
            let via_ctc = ctc_log_likelihood_value(&ln(&p), target, blank).unwrap().exp();
            assert!((via_ctc - dist[target]).abs() < 1e-12);
            total += via_ctc;
        }
        assert!(total <= 1.0 + 1e-12);
    }
}

#[test]
fn wide_beam_finds_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let t = rng.random_range(1..=6);
        let v = 3;
        let blank = rng.random_range(0..v);
        let p = random_probs(t, v, &mut rng);
        let dist = collapsed_distribution(&p, blank);
        let best = dist.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (hyp, score) = beam_decode_scored(&ln(&p), blank, 3usize.pow(6)).unwrap();
        assert!((dist[&hyp] - best).abs() < 1e-12, "{hyp:?}: {} vs {best}", dist[&hyp]);
        assert!((score.exp() - best).abs() < 1e-12);
    }
}

#[test]
fn greedy_keeps_repeat_separated_by_blank() {
    let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9], vec![0.9, 0.1]]).unwrap();
    assert_eq!(greedy_decode(&p, 1), PhonemeSequence(vec![0, 0]));
}

/// A wider beam can prune the ancestor of the best prefix that a narrower
/// beam kept.
#[test]
fn wider_beam_can_return_less_probable_sequence() {
    let p = Tensor::from_rows(&[
        vec![0.325025855074911, 0.39353931694143063, 0.2814348279836584],
        vec![0.7643154452850766, 0.14474283679584737, 0.09094171791907613],
        vec![0.526378335837186, 0.312232012522329, 0.1613896516404849],
        vec![0.4130085612901588, 0.0549999619409415, 0.5319914767688998],
        vec![0.32905060790355745, 0.33804225956194317, 0.33290713253449933],
        vec![0.17868027155414953, 0.416017434254102, 0.4053022941917484],
        vec![0.37789576164602284, 0.4912988191981394, 0.1308054191558377],
    ])
    .unwrap();
    let blank = 2;
    let dist = collapsed_distribution(&p, blank);
    let best = dist.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let narrow = beam_decode(&ln(&p), blank, 2).unwrap();
    let wide = beam_decode(&ln(&p), blank, 4).unwrap();
    assert_eq!(narrow, PhonemeSequence(vec![1, 0, 1]));
    assert_eq!(dist[&narrow], best);
    assert_eq!(wide, PhonemeSequence(vec![0, 1]));
    assert!(dist[&wide] < dist[&narrow]);
}

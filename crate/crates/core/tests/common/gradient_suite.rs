//! Finite-difference checks for every differentiable operation, the
//! quantize/segment composition, the CTC loss and the full objective.
//! Each case panics on failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqrq::codebook::{distances, frame_log_posteriors, nearest_indices, quantize};
use seqrq::ctc::{ctc_log_likelihood, PhonemeSequence};
use seqrq::numerics::{check_gradients, GradCheck, Tape, Tensor, Var};
use seqrq::optim::ParamStore;
use seqrq::segmentation::segment;
use seqrq::seqmodel::{Decoder, DecoderConfig, Encoder, EncoderConfig};
use seqrq::training::{Model, ModelConfig, Variant};
use seqrq::Result;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn positive(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(0.2..2.0))
}

/// Away from zero so relu's kink is never straddled.
fn off_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { v } else { -v }
    })
}

/// Random offsets on every parameter so zero-initialized biases do not
/// park activations on relu's kink.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

/// Contracts any output with fixed random weights into a scalar.
fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = out.tape().constant(random(out.rows(), out.cols(), &mut rng));
    out.mul(w)?.sum()
}

fn assert_grads<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let report = check_gradients(GradCheck::default(), inputs, f).unwrap();
    assert!(
        report.passed,
        "{name}: max relative error {:.3e}, worst {:?}",
        report.max_rel_error,
        report.worst
    );
    assert!(report.checked > 0, "{name}: nothing checked");
}

macro_rules! unary_cases {
    ($($name:ident: $gen:ident => |$x:ident| $body:expr;)*) => {
        $(
            pub fn $name() {
                for seed in 0..5u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
                    let input = $gen(r, c, &mut rng);
                    assert_grads(stringify!($name), &[input], |_, v| {
                        let $x = v[0];
                        project($body?, seed + 100)
                    });
                }
            }
        )*
    };
}

unary_cases! {
    transpose: random => |x| x.transpose();
    scale: random => |x| x.scale(-1.7);
    neg: random => |x| x.neg();
    tanh: random => |x| x.tanh();
    sigmoid: random => |x| x.sigmoid();
    relu: off_zero => |x| x.relu();
    ln: positive => |x| x.ln();
    exp: random => |x| x.exp();
    sqrt: positive => |x| x.sqrt();
    softmax: random => |x| x.softmax();
    log_softmax: random => |x| x.log_softmax();
    log_sum_exp: random => |x| x.log_sum_exp();
    sum: random => |x| x.sum();
    mean: random => |x| x.mean();
    mean_rows: random => |x| x.mean_rows();
    reshape: random => |x| { let (r, c) = (x.rows(), x.cols()); x.reshape(c, r) };
    mul_self: random => |x| x.mul(x);
}

pub fn binary_elementwise() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
        let a = random(r, c, &mut rng);
        let b = random(r, c, &mut rng);
        assert_grads("add", &[a.clone(), b.clone()], |_, v| project(v[0].add(v[1])?, seed));
        assert_grads("sub", &[a.clone(), b.clone()], |_, v| project(v[0].sub(v[1])?, seed));
        assert_grads("mul", &[a.clone(), b.clone()], |_, v| project(v[0].mul(v[1])?, seed));
        assert_grads("mse", &[a, b], |_, v| v[0].mse(v[1]));
    }
}

pub fn matmul_and_bias() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k, m) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = random(n, k, &mut rng);
        let b = random(k, m, &mut rng);
        let bias = random(1, m, &mut rng);
        assert_grads("matmul", &[a, b, bias], |_, v| {
            project(v[0].matmul(v[1])?.add_row(v[2])?, seed)
        });
    }
}

pub fn pairwise_distances() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..5);
        let a = random(rng.random_range(1..5), d, &mut rng);
        let b = random(rng.random_range(1..5), d, &mut rng);
        assert_grads("pairwise_sq_dist", &[a.clone(), b.clone()], |_, v| {
            project(v[0].pairwise_sq_dist(v[1])?, seed)
        });
        assert_grads("distances", &[a, b], |_, v| project(distances(v[0], v[1])?, seed));
    }
}

pub fn slicing_gathering_and_concatenation() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(2..6), rng.random_range(2..6));
        let x = random(r, c, &mut rng);
        let y = random(r, c, &mut rng);
        let idx: Vec<usize> = (0..7).map(|_| rng.random_range(0..r)).collect();
        assert_grads("slice_rows", &[x.clone()], |_, v| project(v[0].slice_rows(1, r - 1)?, seed));
        assert_grads("slice_cols", &[x.clone()], |_, v| project(v[0].slice_cols(1, c - 1)?, seed));
        assert_grads("gather_rows", &[x.clone()], |_, v| project(v[0].gather_rows(&idx)?, seed));
        assert_grads("concat_rows", &[x.clone(), y.clone()], |t, v| {
            project(t.concat_rows(&[v[0], v[1], v[0]])?, seed)
        });
        assert_grads("concat_cols", &[x, y], |t, v| project(t.concat_cols(&[v[1], v[0]])?, seed));
    }
}

pub fn convolution() {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, cin, cout) = (rng.random_range(3..8), rng.random_range(1..4), rng.random_range(1..4));
        let width = [1, 3, 5][seed as usize % 3];
        let stride = 1 + seed as usize % 2;
        let x = random(t, cin, &mut rng);
        let w = random(width * cin, cout, &mut rng);
        let b = random(1, cout, &mut rng);
        assert_grads("conv1d", &[x, w, b], |_, v| {
            project(v[0].conv1d(v[1], v[2], width, stride)?, seed)
        });
    }
}

pub fn binary_cross_entropy() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6);
        let logits = Tensor::from_fn(n, 1, |_, _| rng.random_range(-4.0..4.0));
        let targets = Tensor::from_fn(n, 1, |_, _| f64::from(u8::from(rng.random::<bool>())));
        assert_grads("bce_with_logits", &[logits], |_, v| v[0].bce_with_logits(&targets));
    }
}

/// Latent/codebook pairs whose nearest entry wins by a clear margin, so
/// finite-difference steps never flip an assignment.
fn separated_instance(t: usize, v: usize, d: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    loop {
        let h = random(t, d, rng);
        let e = random(v, d, rng);
        let margin_ok = h.iter_rows().all(|row| {
            let mut ds: Vec<f64> = e
                .iter_rows()
                .map(|c| row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            ds.sort_by(f64::total_cmp);
            ds[1] - ds[0] > 1e-2
        });
        if margin_ok {
            return (h, e);
        }
    }
}

pub fn straight_through_composition() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, e) = separated_instance(rng.random_range(1..7), 4, 3, &mut rng);
        assert_grads("quantize", &[h, e], |_, v| project(quantize(v[0], v[1])?.st_vectors, seed));
    }
}

pub fn distance_posteriors() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..5);
        let h = random(rng.random_range(1..6), d, &mut rng);
        let e = random(rng.random_range(2..6), d, &mut rng);
        assert_grads("frame_log_posteriors", &[h, e], |_, v| {
            project(frame_log_posteriors(v[0], v[1])?, seed)
        });
    }
}

pub fn segment_means() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, e) = separated_instance(rng.random_range(2..9), 3, 2, &mut rng);
        let blank = 2;
        let indices = nearest_indices(&h, &e);
        if indices.iter().all(|&i| i == blank) {
            continue;
        }
        assert_grads("segment", &[h, e], |_, v| {
            let q = quantize(v[0], v[1])?;
            let memory = segment(&q, blank)?.memory()?.expect("non-blank frames");
            project(memory, seed)
        });
    }
}

pub fn ctc_loss() {
    let mut checked = 0;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rng.random_range(2..5);
        let blank = v - 1;
        let s = rng.random_range(1..4);
        let target: Vec<usize> = (0..s).map(|_| rng.random_range(0..blank)).collect();
        let target = PhonemeSequence(target);
        let t = target.min_frames() + rng.random_range(0..4);
        let logits = Tensor::from_fn(t, v, |_, _| rng.random_range(-2.0..2.0));
        assert_grads("ctc", &[logits], |_, x| {
            ctc_log_likelihood(x[0].log_softmax()?, &target, blank)?.log_likelihood.neg()
        });
        checked += usize::from(target.adjacent_repeats() > 0);
    }
    assert!(checked > 0, "no target with adjacent repeats was exercised");
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        input_dim: 3,
        conv_channels: 3,
        kernel_width: 3,
        strides: vec![1, 2],
        rnn_layers: 1,
        hidden: 3,
        latent_dim: 2,
    }
}

pub fn encoder() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(small_encoder(), &mut store, &mut rng).unwrap();
        jitter(&mut store, &mut rng);
        let x = random(rng.random_range(3..8), 3, &mut rng);
        let mut inputs = store.values().to_vec();
        inputs.push(x);
        let n = store.len();
        assert_grads("encoder", &inputs, |_, v| {
            let p = store.bind_vars(&v[..n])?;
            project(enc.encode(&p, v[n])?, seed)
        });
    }
}

pub fn decoder() {
    let config = DecoderConfig {
        frame_dim: 2,
        memory_dim: 3,
        hidden: 3,
        reduction: 2,
    };
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(config.clone(), &mut store, &mut rng).unwrap();
        jitter(&mut store, &mut rng);
        let memory = random(rng.random_range(1..4), 3, &mut rng);
        let target = random(rng.random_range(2..6), 2, &mut rng);
        let mut inputs = store.values().to_vec();
        inputs.push(memory);
        let n = store.len();
        assert_grads("decoder", &inputs, |t, v| {
            let p = store.bind_vars(&v[..n])?;
            let x = t.constant(target.clone());
            dec.decode_teacher_forced(&p, Some(v[n]), x)?.reconstruction_loss(x)
        });
        // empty memory: stop decision and frames from the recurrent state alone
        assert_grads("decoder without memory", store.values(), |t, v| {
            let p = store.bind_vars(v)?;
            let x = t.constant(target.clone());
            dec.decode_teacher_forced(&p, None, x)?.reconstruction_loss(x)
        });
    }
}

fn small_model(variant: Variant, seed: u64) -> Model<f64> {
    let mut config = ModelConfig::new(variant, 3, 3);
    config.encoder = small_encoder();
    config.decoder.hidden = 3;
    if variant == Variant::SeqRq {
        config.decoder.memory_dim = 2;
    }
    let mut model = Model::new(config, seed).unwrap();
    jitter(&mut model.store, &mut ChaCha8Rng::seed_from_u64(seed + 1000));
    model
}

/// Encoder latents sit clear of every quantization decision boundary.
fn well_separated(model: &Model<f64>, frames: &Tensor<f64>) -> bool {
    let Some(cb) = model.codebook() else { return true };
    let h = model.infer_latent(frames).unwrap();
    let separated = h.iter_rows().all(|row| {
        let mut ds: Vec<f64> = cb
            .entries
            .iter_rows()
            .map(|c| row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        ds.sort_by(f64::total_cmp);
        ds[1] - ds[0] > 1e-4
    });
    separated
}

pub fn full_objective() {
    for variant in [Variant::SeqRq, Variant::NoCodebook, Variant::BaselineAsr] {
        let mut done = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = small_model(variant, seed);
            let frames = random(8, 3, &mut rng);
            if !well_separated(&model, &frames) {
                continue;
            }
            let units = PhonemeSequence(vec![0, 2, 2]);
            let n = model.store.len();
            assert_grads(variant.name(), model.store.values(), |t, v| {
                let p = model.store.bind_vars(&v[..n])?;
                Ok(model.utterance_loss(t, &p, &frames, Some(&units), 0.5, 0.5)?.total)
            });
            if variant.reconstructs() {
                assert_grads("unpaired", model.store.values(), |t, v| {
                    let p = model.store.bind_vars(&v[..n])?;
                    Ok(model.utterance_loss(t, &p, &frames, None, 0.5, 0.5)?.total)
                });
            }
            done += 1;
            if done == 2 {
                break;
            }
        }
        assert_eq!(done, 2, "{}: too few separated instances", variant.name());
    }
}

pub fn codebook_entry_gradient_on_toy_utterance() {
    let model = small_model(Variant::SeqRq, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let frames = random(6, 3, &mut rng);
    assert!(well_separated(&model, &frames));
    let cb = model.codebook_param().unwrap();
    let idx = model.store.ids().position(|id| id == cb).unwrap();
    let units = PhonemeSequence(vec![1, 0]);
    let values = model.store.values().to_vec();
    assert_grads("codebook entry", &[values[idx].clone()], |t, v| {
        let mut vars: Vec<Var<'_, f64>> = values.iter().map(|x| t.constant(x.clone())).collect();
        vars[idx] = v[0];
        let p = model.store.bind_vars(&vars)?;
        Ok(model.utterance_loss(t, &p, &frames, Some(&units), 0.5, 0.5)?.total)
    });
}

/// Every case with its name.
pub const ALL: &[(&str, fn())] = &[
    ("transpose", transpose),
    ("scale", scale),
    ("neg", neg),
    ("tanh", tanh),
    ("sigmoid", sigmoid),
    ("relu", relu),
    ("ln", ln),
    ("exp", exp),
    ("sqrt", sqrt),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("log_sum_exp", log_sum_exp),
    ("sum", sum),
    ("mean", mean),
    ("mean_rows", mean_rows),
    ("reshape", reshape),
    ("mul_self", mul_self),
    ("binary_elementwise", binary_elementwise),
    ("matmul_and_bias", matmul_and_bias),
    ("pairwise_distances", pairwise_distances),
    ("slicing_gathering_and_concatenation", slicing_gathering_and_concatenation),
    ("convolution", convolution),
    ("binary_cross_entropy", binary_cross_entropy),
    ("straight_through_composition", straight_through_composition),
    ("distance_posteriors", distance_posteriors),
    ("segment_means", segment_means),
    ("ctc_loss", ctc_loss),
    ("encoder", encoder),
    ("decoder", decoder),
    ("full_objective", full_objective),
    ("codebook_entry_gradient_on_toy_utterance", codebook_entry_gradient_on_toy_utterance),
];

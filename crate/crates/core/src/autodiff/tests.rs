//! Central finite differences against reverse mode for every primitive,
//! in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::FourierEncoder;
use crate::tensor::Tensor;

/// Checks d(sum(w * f(inputs)))/d(inputs) for a fixed random weighting w.
fn check<F>(inputs: Vec<Tensor<f64>>, seed: u64, f: F)
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &[Var]) -> Var,
{
    // Offset so the weighting never replays the stream that drew the inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0ff5e7);
    let eval = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tensor<f64>, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let value = g.value(out).clone();
        let mut grads_out = Vec::new();
        let mut total = 0.0;
        if let Some(w) = weights {
            total = value.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let grads = g.backward_with(out, w.clone());
            grads_out = vars
                .iter()
                .zip(inputs)
                .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
        }
        (total, value, grads_out)
    };
    let (_, out, _) = eval(&inputs, None);
    let weights = Tensor::randn(out.shape().to_vec(), 1.0, &mut rng);
    let (_, _, analytic) = eval(&inputs, Some(&weights));
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        // Entries far below the gradient's own scale are compared against
        // that scale, where cancellation noise in the difference quotient
        // would otherwise dominate.
        let scale = analytic[k].data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for idx in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[idx] -= h;
            let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
            let ad = analytic[k].data()[idx];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3 * scale).max(1e-6);
            assert!(rel < 1e-4, "input {k}[{idx}]: fd {fd} vs ad {ad} (rel {rel})");
        }
    }
}

fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

#[test]
fn analytic_square_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax(x, None).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn shape_errors_name_the_operation() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    assert!(err.to_string().contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros([3, 2]));
    assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
}

#[test]
fn gradients_of_primitives() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_t(&[3, 4], &mut rng);
        let b = rand_t(&[4, 2], &mut rng);
        let c = rand_t(&[3, 4], &mut rng);
        check(vec![a.clone(), b.clone()], seed, |g, v| g.matmul(v[0], v[1]).unwrap());
        check(vec![a.clone(), c.clone()], seed, |g, v| g.add(v[0], v[1]).unwrap());
        check(vec![a.clone(), c.clone()], seed, |g, v| g.sub(v[0], v[1]).unwrap());
        check(vec![a.clone(), c.clone()], seed, |g, v| g.mul(v[0], v[1]).unwrap());
        check(vec![a.clone()], seed, |g, v| g.add_scalar(v[0], 1.5));
        check(vec![a.clone()], seed, |g, v| g.scale(v[0], -0.7));
        check(vec![a.clone()], seed, |g, v| g.scale_rows(v[0], vec![0.5, -2.0, 3.0]).unwrap());
        check(vec![a.clone()], seed, |g, v| g.reshape(v[0], [6, 2]).unwrap());
        check(vec![a.clone()], seed, |g, v| g.gelu(v[0]));
        check(vec![a.clone()], seed, |g, v| g.silu(v[0]));
        check(vec![a.clone()], seed, |g, v| g.gather_rows(v[0], vec![2, 0, 2]).unwrap());
        check(vec![a.clone()], seed, |g, v| g.slice_cols(v[0], 1, 2).unwrap());
        check(vec![a.clone(), c.clone()], seed, |g, v| g.concat_cols(&[v[0], v[1]]).unwrap());
        check(vec![a.clone()], seed, |g, v| g.sum(v[0]));
        check(vec![a.clone()], seed, |g, v| g.mean(v[0]));
        let target = rand_t(&[3, 4], &mut rng);
        check(vec![a.clone()], seed, move |g, v| g.square_error(v[0], &target).unwrap());
        check(vec![a.clone()], seed, |g, v| g.softmax(v[0], None).unwrap());
        let mut mask = Tensor::zeros([3, 4]);
        mask.data_mut()[1] = f64::NEG_INFINITY;
        check(vec![a.clone()], seed, move |g, v| g.softmax(v[0], Some(&mask)).unwrap());
        check(vec![a.clone()], seed, |g, v| g.cross_entropy(v[0], &[0, 3, 2], &[1]).unwrap());
        let w = rand_t(&[4], &mut rng);
        check(vec![a.clone(), w], seed, |g, v| g.layer_norm(v[0], Some(v[1])).unwrap());
        check(vec![a.clone()], seed, |g, v| g.layer_norm(v[0], None).unwrap());
    }
}

#[test]
fn gradient_of_fourier_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc: &'static FourierEncoder = Box::leak(Box::new(FourierEncoder::new(8, 2.0, &mut rng)));
    let x = Tensor::randn([2, 3], 0.5, &mut rng);
    check(vec![x], 9, move |g, v| g.fourier(v[0], enc));
}

#[test]
fn gradient_of_attention() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let q = rand_t(&[5, 4], &mut rng);
        let k = rand_t(&[5, 4], &mut rng);
        let v = rand_t(&[5, 4], &mut rng);
        check(vec![q, k, v], seed, |g, x| g.attention(x[0], x[1], x[2], &[0, 0, 0, 1, 1], 2).unwrap());
    }
}

#[test]
fn attention_packed_equals_per_document() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (t, w, h) = (7, 8, 2);
    let q = rand_t(&[t, w], &mut rng);
    let k = rand_t(&[t, w], &mut rng);
    let v = rand_t(&[t, w], &mut rng);
    let docs = [0, 0, 0, 1, 1, 1, 1];
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let packed = g.attention(qv, kv, vv, &docs, h).unwrap();
    let packed = g.value(packed).clone();
    for (start, end) in [(0, 3), (3, 7)] {
        let rows: Vec<usize> = (start..end).collect();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let qs = g.gather_rows(qv, rows.clone()).unwrap();
        let ks = g.gather_rows(kv, rows.clone()).unwrap();
        let vs = g.gather_rows(vv, rows.clone()).unwrap();
        let out = g.attention(qs, ks, vs, &vec![0; rows.len()], h).unwrap();
        for (r, &row) in rows.iter().enumerate() {
            for c in 0..w {
                let a = g.value(out).row(r)[c];
                let b = packed.row(row)[c];
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn perturbing_one_document_leaves_the_other_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t, w) = (6, 4);
    let q = rand_t(&[t, w], &mut rng);
    let run = |q: &Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.constant(q.clone());
        let out = g.attention(x, x, x, &[0, 0, 0, 1, 1, 1], 2).unwrap();
        g.value(out).clone()
    };
    let base = run(&q);
    let mut perturbed = q.clone();
    for c in 0..w {
        perturbed.row_mut(1)[c] += 3.0;
    }
    let after = run(&perturbed);
    for r in 3..6 {
        assert_eq!(base.row(r), after.row(r));
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_t(&[4, 8], &mut rng);
    let b = rand_t(&[8, 8], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let (x, w) = (g.input(a.clone()), g.input(b.clone()));
        let y = g.matmul(x, w).unwrap();
        let y = g.layer_norm(y, None).unwrap();
        let y = g.gelu(y);
        let s = g.sum(y);
        let grads = g.backward(s);
        (g.value(y).clone(), grads.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}


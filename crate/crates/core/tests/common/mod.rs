//! Helpers shared by the integration tests.
#![allow(dead_code)]

use mupar_core::models::{Batch, Model};
use mupar_core::numcore::{kernels, SeededRng, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max(|a_i| + |b_i|, 1e-4)`. Central differences carry
/// roughly 1e-10 of roundoff, so entries below the floor compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

pub fn randn(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Normals pushed away from zero so pointwise kinks sit outside the stencil.
pub fn randn_away_from_zero(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.normal();
            if v.abs() > 1e-2 {
                break v;
            }
        })
        .collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error of each kernel across `shapes` random draws. Every
/// check contracts the kernel output with a random vector to get a scalar.
pub fn kernel_gradcheck(shapes: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = SeededRng::new(seed, 0);
    let mut worst = vec![
        ("matmul", 0.0),
        ("relu", 0.0),
        ("tanh", 0.0),
        ("bias_add", 0.0),
        ("layernorm", 0.0),
        ("embedding_lookup", 0.0),
        ("softmax_cross_entropy", 0.0),
        ("scaled_dot_attention", 0.0),
    ];
    let mut bump = |name: &str, e: f64| {
        let slot = worst.iter_mut().find(|(n, _)| *n == name).unwrap();
        slot.1 = f64::max(slot.1, e);
    };
    for _ in 0..shapes {
        let m = 1 + rng.below(6);
        let k = 1 + rng.below(6);
        let n = 1 + rng.below(6);

        // matmul
        let a = randn(m * k, &mut rng);
        let b = randn(k * n, &mut rng);
        let r = randn(m * n, &mut rng);
        let mut ta = tensor(&[m, k], a.clone());
        let mut tb = tensor(&[k, n], b.clone());
        kernels::matmul_backward(&mut ta, &mut tb, &tensor(&[m, n], r.clone())).unwrap();
        let fa = numeric_grad(&a, FD_STEP, |x| {
            dot(
                kernels::matmul(&tensor(&[m, k], x.to_vec()), &tb)
                    .unwrap()
                    .data(),
                &r,
            )
        });
        let fb = numeric_grad(&b, FD_STEP, |x| {
            dot(
                kernels::matmul(&ta, &tensor(&[k, n], x.to_vec()))
                    .unwrap()
                    .data(),
                &r,
            )
        });
        bump(
            "matmul",
            max_rel_err(ta.grad().unwrap(), &fa).max(max_rel_err(tb.grad().unwrap(), &fb)),
        );

        // relu / tanh
        let x = randn_away_from_zero(m * n, &mut rng);
        let r = randn(m * n, &mut rng);
        for name in ["relu", "tanh"] {
            let mut tx = tensor(&[m, n], x.clone());
            let fwd = |t: &Tensor| {
                if name == "relu" {
                    kernels::relu(t)
                } else {
                    kernels::tanh(t)
                }
            };
            if name == "relu" {
                kernels::relu_backward(&mut tx, &tensor(&[m, n], r.clone())).unwrap();
            } else {
                kernels::tanh_backward(&mut tx, &tensor(&[m, n], r.clone())).unwrap();
            }
            let fd = numeric_grad(&x, FD_STEP, |v| {
                dot(fwd(&tensor(&[m, n], v.to_vec())).data(), &r)
            });
            bump(name, max_rel_err(tx.grad().unwrap(), &fd));
        }

        // bias_add
        let x = randn(m * n, &mut rng);
        let bv = randn(n, &mut rng);
        let r = randn(m * n, &mut rng);
        let mut tx = tensor(&[m, n], x.clone());
        let mut tbv = tensor(&[n], bv.clone());
        kernels::bias_add_backward(&mut tx, &mut tbv, &tensor(&[m, n], r.clone())).unwrap();
        let fx = numeric_grad(&x, FD_STEP, |v| {
            dot(
                kernels::bias_add(&tensor(&[m, n], v.to_vec()), &tbv)
                    .unwrap()
                    .data(),
                &r,
            )
        });
        let fbv = numeric_grad(&bv, FD_STEP, |v| {
            dot(
                kernels::bias_add(&tx, &tensor(&[n], v.to_vec()))
                    .unwrap()
                    .data(),
                &r,
            )
        });
        bump(
            "bias_add",
            max_rel_err(tx.grad().unwrap(), &fx).max(max_rel_err(tbv.grad().unwrap(), &fbv)),
        );

        // layernorm (width at least 2 so the normalization is non-trivial)
        let d = n + 1;
        let x = randn(m * d, &mut rng);
        let g = randn(d, &mut rng);
        let bb = randn(d, &mut rng);
        let r = randn(m * d, &mut rng);
        let mut tx = tensor(&[m, d], x.clone());
        let mut tg = tensor(&[d], g.clone());
        let mut tbb = tensor(&[d], bb.clone());
        let (_, cache) = kernels::layernorm(&tx, &tg, &tbb).unwrap();
        kernels::layernorm_backward(
            &mut tx,
            &mut tg,
            &mut tbb,
            &cache,
            &tensor(&[m, d], r.clone()),
        )
        .unwrap();
        let ln = |x: &[f64], g: &[f64], b: &[f64]| {
            let (o, _) = kernels::layernorm(
                &tensor(&[m, d], x.to_vec()),
                &tensor(&[d], g.to_vec()),
                &tensor(&[d], b.to_vec()),
            )
            .unwrap();
            dot(o.data(), &r)
        };
        let fx = numeric_grad(&x, FD_STEP, |v| ln(v, &g, &bb));
        let fg = numeric_grad(&g, FD_STEP, |v| ln(&x, v, &bb));
        let fbb = numeric_grad(&bb, FD_STEP, |v| ln(&x, &g, v));
        let e = max_rel_err(tx.grad().unwrap(), &fx)
            .max(max_rel_err(tg.grad().unwrap(), &fg))
            .max(max_rel_err(tbb.grad().unwrap(), &fbb));
        bump("layernorm", e);

        // embedding lookup, with repeated ids
        let vocab = 1 + rng.below(5);
        let ids: Vec<usize> = (0..m + 1).map(|_| rng.below(vocab)).collect();
        let table = randn(vocab * n, &mut rng);
        let r = randn(ids.len() * n, &mut rng);
        let mut tt = tensor(&[vocab, n], table.clone());
        kernels::embedding_lookup_backward(&mut tt, &ids, &tensor(&[ids.len(), n], r.clone()))
            .unwrap();
        let ft = numeric_grad(&table, FD_STEP, |v| {
            dot(
                kernels::embedding_lookup(&tensor(&[vocab, n], v.to_vec()), &ids)
                    .unwrap()
                    .data(),
                &r,
            )
        });
        bump("embedding_lookup", max_rel_err(tt.grad().unwrap(), &ft));

        // softmax cross-entropy
        let classes = n + 1;
        let logits = randn(m * classes, &mut rng);
        let targets: Vec<usize> = (0..m).map(|_| rng.below(classes)).collect();
        let mut tl = tensor(&[m, classes], logits.clone());
        let (_, probs) = kernels::softmax_cross_entropy(&tl, &targets).unwrap();
        kernels::softmax_cross_entropy_backward(&mut tl, &probs, &targets).unwrap();
        let fl = numeric_grad(&logits, FD_STEP, |v| {
            kernels::softmax_cross_entropy(&tensor(&[m, classes], v.to_vec()), &targets)
                .unwrap()
                .0
        });
        bump(
            "softmax_cross_entropy",
            max_rel_err(tl.grad().unwrap(), &fl),
        );

        // causal attention
        let t = m;
        let (dk, dv) = (k, n);
        let scale = 0.3 + rng.uniform();
        let q = randn(t * dk, &mut rng);
        let kk = randn(t * dk, &mut rng);
        let v = randn(t * dv, &mut rng);
        let r = randn(t * dv, &mut rng);
        let mut tq = tensor(&[t, dk], q.clone());
        let mut tk = tensor(&[t, dk], kk.clone());
        let mut tv = tensor(&[t, dv], v.clone());
        let (_, cache) = kernels::scaled_dot_attention(&tq, &tk, &tv, scale).unwrap();
        kernels::scaled_dot_attention_backward(
            &mut tq,
            &mut tk,
            &mut tv,
            scale,
            &cache,
            &tensor(&[t, dv], r.clone()),
        )
        .unwrap();
        let att = |q: &[f64], k: &[f64], v: &[f64]| {
            let (o, _) = kernels::scaled_dot_attention(
                &tensor(&[t, dk], q.to_vec()),
                &tensor(&[t, dk], k.to_vec()),
                &tensor(&[t, dv], v.to_vec()),
                scale,
            )
            .unwrap();
            dot(o.data(), &r)
        };
        let fq = numeric_grad(&q, FD_STEP, |x| att(x, &kk, &v));
        let fk = numeric_grad(&kk, FD_STEP, |x| att(&q, x, &v));
        let fv = numeric_grad(&v, FD_STEP, |x| att(&q, &kk, x));
        let e = max_rel_err(tq.grad().unwrap(), &fq)
            .max(max_rel_err(tk.grad().unwrap(), &fk))
            .max(max_rel_err(tv.grad().unwrap(), &fv));
        bump("scaled_dot_attention", e);
    }
    worst
}

/// Worst relative error between backprop and central differences of the
/// loss, over up to `per_param` coordinates of every parameter.
pub fn model_gradcheck(model: &mut Model, batch: &Batch, per_param: usize, seed: u64) -> f64 {
    model.loss_and_grad(batch).unwrap();
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.value.grad().unwrap().to_vec())
        .collect();
    let mut rng = SeededRng::new(seed, 1);
    let mut worst: f64 = 0.0;
    for pi in 0..model.params().len() {
        let n = model.params()[pi].numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        };
        for c in coords {
            let orig = model.params()[pi].value.data()[c];
            let scale = FD_STEP * orig.abs().max(1.0);
            let mut eval = |v: f64| {
                model.params_mut()[pi].value.data_mut()[c] = v;
                model.forward_loss(batch).unwrap().loss
            };
            let fd = (eval(orig + scale) - eval(orig - scale)) / (2.0 * scale);
            model.params_mut()[pi].value.data_mut()[c] = orig;
            worst = worst.max(max_rel_err(&[analytic[pi][c]], &[fd]));
        }
    }
    worst
}

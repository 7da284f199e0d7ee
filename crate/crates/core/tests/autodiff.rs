//! Gradient correctness for every differentiable tape operation.
//!
//! Each operation is checked on ≥20 random instances against central
//! finite differences. To avoid vacuous checks (e.g. the gradient of
//! `sum(softmax(x))` is identically zero because rows sum to one), every
//! loss is a fixed random weighting of the operation's output:
//! `loss = sum(w ⊙ f(inputs))`.
//!
//! Hand-computed forward oracles pin down the conventions (natural-log
//! cross-entropy averaged over rows, temperature-softened KL averaged over
//! rows, biased-variance layer norm with ε inside the square root).

use glyphvqa::gradcheck::{check_against_fd, FD_STEP, OP_TOLERANCE};
use glyphvqa::tensor::{softmax_rows, Graph, Tensor, Var, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const INSTANCES: usize = 20;

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks ∂loss/∂inputs[k] for every k against finite differences.
/// `build` assembles the scalar loss from graph vars bound to `inputs`.
fn fd_check<F>(op: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> glyphvqa::Result<Var>,
{
    // Analytic gradients from one tape.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap_or_else(|e| panic!("{op}: forward failed: {e}"));
    let grads = g.backward(loss).unwrap_or_else(|e| panic!("{op}: backward failed: {e}"));

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .unwrap_or_else(|| panic!("{op}: no gradient for input {k}"))
            .data()
            .to_vec();
        let f = |probe: &[f64]| -> f64 {
            let mut g2 = Graph::new();
            let vars2: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        g2.constant(Tensor::new(t.shape().to_vec(), probe.to_vec()).unwrap())
                    } else {
                        g2.constant(t.clone())
                    }
                })
                .collect();
            let l = build(&mut g2, &vars2).unwrap();
            g2.value(l).scalar_value().unwrap()
        };
        let check = check_against_fd(f, input.data(), &analytic, FD_STEP);
        assert!(
            check.passes(OP_TOLERANCE),
            "{op}: input {k} worst rel err {:.3e} at coordinate {} exceeds {:.0e}",
            check.max_rel_err,
            check.worst_index,
            OP_TOLERANCE
        );
    }
}

/// loss = sum(w ⊙ y) with a fixed random weighting, so no output
/// coordinate's gradient can cancel against another's.
fn weighted_sum(g: &mut Graph, y: Var, rng: &mut ChaCha20Rng) -> glyphvqa::Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(rand_tensor(rng, &shape, 1.0));
    let wy = g.mul(y, w)?;
    g.sum(wy)
}

// ─── Elementwise and structural ops ─────────────────────────────────────

#[test]
fn grad_add_sub_mul_scale() {
    let mut rng = ChaCha20Rng::seed_from_u64(100);
    for i in 0..INSTANCES {
        let shape = [2 + i % 3, 3 + i % 4];
        let a = rand_tensor(&mut rng, &shape, 2.0);
        let b = rand_tensor(&mut rng, &shape, 2.0);
        let wrng = ChaCha20Rng::seed_from_u64(1000 + i as u64);
        fd_check("add", &[a.clone(), b.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
        fd_check("sub", &[a.clone(), b.clone()], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
        fd_check("mul", &[a.clone(), b.clone()], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
        fd_check("scale", &[a.clone()], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            weighted_sum(g, y, &mut wrng.clone())
        });
    }
}

#[test]
fn grad_add_row_broadcast() {
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    for i in 0..INSTANCES {
        let rows = 2 + i % 4;
        let cols = 3 + i % 3;
        let a = rand_tensor(&mut rng, &[rows, cols], 2.0);
        let bias = rand_tensor(&mut rng, &[cols], 2.0);
        let wrng = ChaCha20Rng::seed_from_u64(1100 + i as u64);
        fd_check("add_row", &[a, bias], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
    }
}

#[test]
fn grad_matmul_transpose_reshape() {
    let mut rng = ChaCha20Rng::seed_from_u64(102);
    for i in 0..INSTANCES {
        let (m, k, n) = (2 + i % 3, 3 + i % 4, 2 + i % 5);
        let a = rand_tensor(&mut rng, &[m, k], 1.5);
        let b = rand_tensor(&mut rng, &[k, n], 1.5);
        let wrng = ChaCha20Rng::seed_from_u64(1200 + i as u64);
        fd_check("matmul", &[a.clone(), b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
        fd_check("transpose", &[a.clone()], |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
        fd_check("reshape", &[a.clone()], |g, v| {
            let y = g.reshape(v[0], &[k, m])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
    }
}

#[test]
fn grad_concat_and_slice() {
    let mut rng = ChaCha20Rng::seed_from_u64(103);
    for i in 0..INSTANCES {
        let rows = 2 + i % 3;
        let a = rand_tensor(&mut rng, &[rows, 2 + i % 2], 1.5);
        let b = rand_tensor(&mut rng, &[rows, 3], 1.5);
        let c = rand_tensor(&mut rng, &[rows, 1 + i % 3], 1.5);
        let wrng = ChaCha20Rng::seed_from_u64(1300 + i as u64);
        fd_check("concat_cols", &[a.clone(), b, c], |g, v| {
            let y = g.concat_cols(v)?;
            weighted_sum(g, y, &mut wrng.clone())
        });
        let wide = rand_tensor(&mut rng, &[rows, 6], 1.5);
        let lo = i % 3;
        fd_check("slice_cols", &[wide], |g, v| {
            let y = g.slice_cols(v[0], lo, lo + 3)?;
            weighted_sum(g, y, &mut wrng.clone())
        });
        let top = rand_tensor(&mut rng, &[1 + i % 3, 4], 1.5);
        let bottom = rand_tensor(&mut rng, &[2, 4], 1.5);
        fd_check("concat_rows", &[top, bottom], |g, v| {
            let y = g.concat_rows(v)?;
            weighted_sum(g, y, &mut wrng.clone())
        });
    }
}

#[test]
fn grad_gather_rows_accumulates_duplicates() {
    let mut rng = ChaCha20Rng::seed_from_u64(104);
    for i in 0..INSTANCES {
        let table = rand_tensor(&mut rng, &[5, 3], 1.5);
        // Duplicate indices exercise scatter-add in the backward pass.
        let indices = vec![0, 2, 2, 4, 1 + i % 3, 0];
        let wrng = ChaCha20Rng::seed_from_u64(1400 + i as u64);
        fd_check("gather_rows", &[table], |g, v| {
            let y = g.gather_rows(v[0], &indices)?;
            weighted_sum(g, y, &mut wrng.clone())
        });
    }
}

// ─── Nonlinearities ─────────────────────────────────────────────────────

#[test]
fn grad_softmax() {
    let mut rng = ChaCha20Rng::seed_from_u64(105);
    for i in 0..INSTANCES {
        let x = rand_tensor(&mut rng, &[2 + i % 3, 3 + i % 4], 3.0);
        let wrng = ChaCha20Rng::seed_from_u64(1500 + i as u64);
        fd_check("softmax", &[x], |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
    }
}

#[test]
fn grad_gelu() {
    let mut rng = ChaCha20Rng::seed_from_u64(106);
    for i in 0..INSTANCES {
        let x = rand_tensor(&mut rng, &[3, 4], 3.0);
        let wrng = ChaCha20Rng::seed_from_u64(1600 + i as u64);
        fd_check("gelu", &[x], |g, v| {
            let y = g.gelu(v[0])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
    }
}

#[test]
fn grad_layer_norm_all_three_inputs() {
    let mut rng = ChaCha20Rng::seed_from_u64(107);
    for i in 0..INSTANCES {
        let cols = 4 + i % 4;
        let x = rand_tensor(&mut rng, &[2 + i % 3, cols], 2.0);
        let gain = rand_tensor(&mut rng, &[cols], 1.0);
        let bias = rand_tensor(&mut rng, &[cols], 1.0);
        let wrng = ChaCha20Rng::seed_from_u64(1700 + i as u64);
        fd_check("layer_norm", &[x, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, &mut wrng.clone())
        });
    }
}

// ─── Losses ─────────────────────────────────────────────────────────────

#[test]
fn grad_cross_entropy() {
    let mut rng = ChaCha20Rng::seed_from_u64(108);
    for i in 0..INSTANCES {
        let rows = 2 + i % 4;
        let cols = 4 + i % 5;
        let logits = rand_tensor(&mut rng, &[rows, cols], 3.0);
        let targets: Vec<usize> = (0..rows).map(|r| (r + i) % cols).collect();
        fd_check("cross_entropy", &[logits], |g, v| g.cross_entropy(v[0], &targets));
    }
}

#[test]
fn grad_kl_divergence_both_sides() {
    let mut rng = ChaCha20Rng::seed_from_u64(109);
    for i in 0..INSTANCES {
        let rows = 2 + i % 3;
        let cols = 4 + i % 4;
        let p = rand_tensor(&mut rng, &[rows, cols], 3.0);
        let q = rand_tensor(&mut rng, &[rows, cols], 3.0);
        let temperature = [1.0, 2.0, 4.0][i % 3];
        fd_check("kl_divergence", &[p, q], |g, v| {
            g.kl_divergence(v[0], v[1], temperature)
        });
    }
}

#[test]
fn grad_sum_and_mean() {
    let mut rng = ChaCha20Rng::seed_from_u64(110);
    for i in 0..INSTANCES {
        let x = rand_tensor(&mut rng, &[2 + i % 3, 3], 2.0);
        fd_check("sum", &[x.clone()], |g, v| g.sum(v[0]));
        fd_check("mean", &[x], |g, v| g.mean(v[0]));
    }
}

#[test]
fn grad_composed_attention_block() {
    // A softmax(QKᵀ/√d)·V composition: the shape every sub-layer uses.
    let mut rng = ChaCha20Rng::seed_from_u64(111);
    for i in 0..INSTANCES {
        let (t, s, d) = (3, 4, 2 + i % 3);
        let q = rand_tensor(&mut rng, &[t, d], 1.0);
        let k = rand_tensor(&mut rng, &[s, d], 1.0);
        let v = rand_tensor(&mut rng, &[s, d], 1.0);
        let wrng = ChaCha20Rng::seed_from_u64(1900 + i as u64);
        fd_check("attention", &[q, k, v], |g, vars| {
            let kt = g.transpose(vars[1])?;
            let scores = g.matmul(vars[0], kt)?;
            let scaled = g.scale(scores, 1.0 / (2.0f64).sqrt())?;
            let map = g.softmax(scaled)?;
            let av = g.matmul(map, vars[2])?;
            weighted_sum(g, av, &mut wrng.clone())
        });
    }
}

// ─── Frozen forward oracles ─────────────────────────────────────────────

/// softmax([1,2,3]) computed independently (exp/sum by hand).
#[test]
fn oracle_softmax_row() {
    let probs = softmax_rows(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748218];
    for (got, want) in probs.data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-15, "softmax oracle: {got} vs {want}");
    }
}

/// Mean NLL over rows [[1,2,3]→2, [0.5,−1,2]→0], natural log.
#[test]
fn oracle_cross_entropy_mean_nll() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, -1.0, 2.0]).unwrap());
    let loss = g.cross_entropy(logits, &[2, 0]).unwrap();
    let got = g.value(loss).scalar_value().unwrap();
    assert!((got - 1.0744586305507688).abs() < 1e-14, "cross-entropy oracle: {got}");
}

/// KL(softmax([1,2,3]/2) ‖ softmax([3,2,1]/2)) in nats.
#[test]
fn oracle_kl_divergence_softened() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let q = g.constant(Tensor::new(vec![1, 3], vec![3.0, 2.0, 1.0]).unwrap());
    let kl = g.kl_divergence(p, q, 2.0).unwrap();
    let got = g.value(kl).scalar_value().unwrap();
    assert!((got - 0.32015666782980645).abs() < 1e-14, "KL oracle: {got}");

    // KL of a distribution with itself is zero.
    let mut g2 = Graph::new();
    let p2 = g2.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let p3 = g2.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let zero = g2.kl_divergence(p2, p3, 2.0).unwrap();
    assert!(g2.value(zero).scalar_value().unwrap().abs() < 1e-15);
}

/// Layer norm of [1,2,3,4] with unit gain, zero bias, ε = 1e-5.
#[test]
fn oracle_layer_norm_row() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let expected = [
        -1.3416354199689269,
        -0.447211806656309,
        0.447211806656309,
        1.3416354199689269,
    ];
    for (got, want) in g.value(y).data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-14, "layer_norm oracle: {got} vs {want}");
    }
    assert!(LAYER_NORM_EPS == 1e-5);
}

/// Tanh-form GELU at ±known points.
#[test]
fn oracle_gelu_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap());
    let y = g.gelu(x).unwrap();
    let got = g.value(y).data();
    assert!((got[0] - 0.8411919906082768).abs() < 1e-15, "gelu(1): {}", got[0]);
    assert!((got[1] - -0.15428599017485606).abs() < 1e-15, "gelu(-0.5): {}", got[1]);
}

// ─── Tape bookkeeping ───────────────────────────────────────────────────

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let err = g.backward(x);
    assert!(err.is_err(), "backward on a non-scalar must be rejected");
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let c = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
    let y = g.mul(x, c).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).is_some(), "parameter must receive a gradient");
    assert!(grads.get(c).is_none(), "constant must not receive a gradient");
}

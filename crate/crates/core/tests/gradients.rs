//! Analytic gradients against central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use tabulatime::autodiff::{ParamStore, Scope, Tape, Tensor, Var};
use tabulatime::fusion::ForecastHead;
use tabulatime::nn::{Linear, ModelRng};
use tabulatime::rwkv::{EncoderConfig, RwkvEncoder};
use tabulatime::tabular::TabularEmbedder;
use tabulatime::Result;

const STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ModelRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in [−2, 2] kept away from the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ModelRng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Builds `build(inputs)` once with tracked leaves and once per perturbed
/// scalar, returning the worst relative error over every input element.
fn tape_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out)[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * STEP;
            let down = eval(&xs);
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Relative error per parameter scalar of `loss` over a store.
fn param_errors(store: &ParamStore, loss: impl Fn(&mut Scope) -> Result<Var>) -> Vec<f64> {
    let mut scope = Scope::new(store, true);
    let l = loss(&mut scope).unwrap();
    let grads = scope.backward(l).unwrap();
    let value = |s: &ParamStore| {
        let mut scope = Scope::new(s, false);
        let l = loss(&mut scope).unwrap();
        scope.tape.value(l)[0]
    };
    let mut errs = Vec::new();
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        let analytic = grads.0[id.0].clone().unwrap_or_else(|| vec![0.0; n]);
        for j in 0..n {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + STEP;
            let up = value(&probe);
            probe.get_mut(id).data_mut()[j] = orig - STEP;
            let down = value(&probe);
            probe.get_mut(id).data_mut()[j] = orig;
            errs.push(rel_err(analytic[j], (up - down) / (2.0 * STEP)));
        }
    }
    errs
}

/// Weighted sum so that every output element gets a distinct cotangent.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ModelRng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product();
    let w = tape.constant(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ModelRng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

#[test]
fn sum_of_matmul_gradient_is_ones_times_b_transposed() {
    let mut rng = ModelRng::seed_from_u64(1);
    let a = random(&[3, 4], -2.0, 2.0, &mut rng);
    let b = random(&[4, 2], -2.0, 2.0, &mut rng);
    let mut tape = Tape::new();
    let va = tape.leaf(&a.clone().with_grad()).unwrap();
    let vb = tape.leaf(&b).unwrap();
    let y = tape.matmul(va, vb).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    let ga = g.get(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want: f64 = (0..2).map(|j| b.data()[k * 2 + j]).sum();
            assert!((ga[i * 4 + k] - want).abs() < 1e-12);
        }
    }
    assert!(tape_check(&[a, b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.sum(y)
    }) < 1e-4);
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One case per differentiable op: input shapes, whether inputs must avoid
/// the ReLU kink, and the op under a weighted-sum readout.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, bool, Build)> {
    vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], false, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
        ("add_broadcast", vec![vec![3, 4], vec![4]], false, |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], false, |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
        ("mul_broadcast", vec![vec![2, 3, 4], vec![4]], false, |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
        ("scale", vec![vec![5]], false, |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, 9)
        }),
        ("sigmoid", vec![vec![6]], false, |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, 9)
        }),
        ("relu", vec![vec![6]], true, |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 9)
        }),
        ("relu_squared", vec![vec![6]], true, |t, v| {
            let y = t.relu_squared(v[0])?;
            weighted_sum(t, y, 9)
        }),
        ("exp", vec![vec![6]], false, |t, v| {
            let y = t.exp(v[0])?;
            weighted_sum(t, y, 9)
        }),
        ("lerp", vec![vec![4], vec![3, 4], vec![3, 4]], false, |t, v| {
            let y = t.lerp(v[0], v[1], v[2])?;
            weighted_sum(t, y, 9)
        }),
        ("mean", vec![vec![3, 4]], false, |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        }),
        ("mean_last", vec![vec![2, 3, 4]], false, |t, v| {
            let y = t.mean_last(v[0])?;
            weighted_sum(t, y, 9)
        }),
        ("reshape", vec![vec![2, 6]], false, |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted_sum(t, y, 9)
        }),
        ("time_shift", vec![vec![2, 4, 3]], false, |t, v| {
            let y = t.time_shift(v[0])?;
            weighted_sum(t, y, 9)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], false, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 9)
        }),
        ("concat_last", vec![vec![2, 3], vec![2, 4]], false, |t, v| {
            let y = t.concat_last(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
        ("cross_entropy", vec![vec![4, 3]], false, |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
        ("mse", vec![vec![2, 3]], false, |t, v| t.mse(v[0], &[0.5, -1.0, 0.0, 2.0, 1.5, -0.3])),
        ("dropout", vec![vec![8]], false, |t, v| {
            let mut rng = ModelRng::seed_from_u64(4);
            let y = t.dropout(v[0], 0.5, &mut rng)?;
            weighted_sum(t, y, 9)
        }),
    ]
}

fn random_inputs(shapes: &[Vec<usize>], kink: bool, seed: u64) -> Vec<Tensor> {
    let mut rng = ModelRng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| if kink { off_kink(s, &mut rng) } else { random(s, -2.0, 2.0, &mut rng) })
        .collect()
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, shapes, kink, build) in op_cases() {
        let err = tape_check(&random_inputs(&shapes, kink, 3), build);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn fused_wkv_matches_finite_differences() {
    let mut rng = ModelRng::seed_from_u64(5);
    let (seqs, steps, heads, d) = (2, 5, 2, 3);
    let c = heads * d;
    let inputs = vec![
        random(&[seqs, steps, c], -2.0, 2.0, &mut rng),
        random(&[seqs, steps, c], -2.0, 2.0, &mut rng),
        random(&[seqs, steps, c], -2.0, 2.0, &mut rng),
        random(&[heads, d], 0.05, 0.95, &mut rng),
        random(&[heads, d], -2.0, 2.0, &mut rng),
    ];
    let err = tape_check(&inputs, |t, v| {
        let y = t.wkv_gated(v[0], v[1], v[2], v[3], v[4])?;
        weighted_sum(t, y, 11)
    });
    assert!(err < 1e-4, "relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ops_match_finite_differences_on_random_inputs(seed in any::<u64>(), which in 0usize..19) {
        let cases = op_cases();
        let (name, shapes, kink, build) = &cases[which % cases.len()];
        let err = tape_check(&random_inputs(shapes, *kink, seed), *build);
        prop_assert!(err < 1e-4, "{}: relative error {}", name, err);
    }
}

#[test]
fn three_layer_mlp_parameters() {
    let mut rng = ModelRng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let layers = [
        Linear::new(&mut store, "l0", 4, 6, true, &mut rng).unwrap(),
        Linear::new(&mut store, "l1", 6, 5, true, &mut rng).unwrap(),
        Linear::new(&mut store, "l2", 5, 3, true, &mut rng).unwrap(),
    ];
    perturb(&mut store, 0.1, 8);
    let x = random(&[5, 4], -2.0, 2.0, &mut rng);
    let errs = param_errors(&store, |scope| {
        let mut h = scope.tape.leaf(&x)?;
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(scope, h)?;
            if i + 1 < layers.len() {
                h = scope.tape.relu(h)?;
            }
        }
        scope.tape.cross_entropy(h, &[0, 1, 2, 1, 0])
    });
    let worst = errs.iter().copied().fold(0.0, f64::max);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn tabular_embedder_first_layer() {
    let mut rng = ModelRng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let emb = TabularEmbedder::new(&mut store, "tab", 7, 4, &mut rng).unwrap();
    perturb(&mut store, 0.1, 13);
    let x = random(&[6, 7], -2.0, 2.0, &mut rng);
    let errs = param_errors(&store, |scope| {
        let xv = scope.tape.leaf(&x)?;
        let y = emb.forward(scope, xv)?;
        weighted_sum(&mut scope.tape, y, 14)
    });
    let first = store.get(emb.mlp.hidden.weight).len();
    let worst = errs[..first].iter().copied().fold(0.0, f64::max);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn forecast_head_parameters() {
    let mut rng = ModelRng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let head = ForecastHead::new(&mut store, "fc", 3, 4, 5, &mut rng).unwrap();
    perturb(&mut store, 0.1, 16);
    let feats = random(&[2, 2, 3, 4], -2.0, 2.0, &mut rng);
    let target: Vec<f64> = (0..2 * 2 * 5).map(|i| (i as f64 * 0.3).sin()).collect();
    let errs = param_errors(&store, |scope| {
        let f = scope.tape.leaf(&feats)?;
        let y = head.forward(scope, f)?;
        scope.tape.mse(y, &target)
    });
    let worst = errs.iter().copied().fold(0.0, f64::max);
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn tiny_encoder_parameters() {
    let mut rng = ModelRng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        layers: 1,
        embed_dim: 8,
        heads: 2,
        dropout: 0.0,
    };
    let enc = RwkvEncoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
    // move off the zero-output initialization so every parameter matters
    perturb(&mut store, 0.3, 18);
    let tokens = random(&[2, 4, 8], -2.0, 2.0, &mut rng);
    let errs = param_errors(&store, |scope| {
        let x = scope.tape.leaf(&tokens)?;
        let y = enc.encode(scope, x, None)?;
        weighted_sum(&mut scope.tape, y, 19)
    });
    let worst = errs.iter().copied().fold(0.0, f64::max);
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn backward_of_two_independent_graphs_adds() {
    let mut rng = ModelRng::seed_from_u64(20);
    let x = random(&[3, 4], -2.0, 2.0, &mut rng);
    let w1 = random(&[4, 2], -2.0, 2.0, &mut rng);
    let w2 = random(&[4, 3], -2.0, 2.0, &mut rng);
    let f = |t: &mut Tape, xv: Var, w: &Tensor| -> Var {
        let wv = t.leaf(w).unwrap();
        let y = t.matmul(xv, wv).unwrap();
        let y = t.sigmoid(y).unwrap();
        t.sum(y).unwrap()
    };
    let grad_of = |ws: &[&Tensor]| -> Vec<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(&x.clone().with_grad()).unwrap();
        let losses: Vec<Var> = ws.iter().map(|w| f(&mut t, xv, w)).collect();
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = t.add(total, l).unwrap();
        }
        t.backward(total).unwrap().get(xv).unwrap().to_vec()
    };
    let joint = grad_of(&[&w1, &w2]);
    let a = grad_of(&[&w1]);
    let b = grad_of(&[&w2]);
    for i in 0..joint.len() {
        assert!((joint[i] - (a[i] + b[i])).abs() < 1e-12);
    }
}

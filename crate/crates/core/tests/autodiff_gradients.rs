//! Every tape primitive against central finite differences.

use proptest::prelude::*;
use qgen_core::autodiff::{check_gradients, ParamId, ParamStore, Tape, Var};
use qgen_core::tensor::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Projects an op output onto a fixed random weighting so the loss is a
/// generic linear functional of every output entry.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
fn rand_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    rand_tensor(shape, seed).map(|x| if x >= 0.0 { x + 0.05 } else { x - 0.05 })
}

fn check_all(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var> + Copy,
) -> f64 {
    ids.iter()
        .map(|&id| check_gradients(f, store, id, STEP).unwrap())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grad(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_tensor(&[m, k], seed)).unwrap();
        let b = s.add("b", rand_tensor(&[k, n], seed.wrapping_add(1))).unwrap();
        let err = check_all(&mut s, &[a, b], |t, s| {
            let (av, bv) = (t.param(s, a), t.param(s, b));
            let o = t.matmul(av, bv)?;
            weighted_sum(t, o, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn matmul_t_grad(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_tensor(&[m, k], seed)).unwrap();
        let b = s.add("b", rand_tensor(&[n, k], seed.wrapping_add(1))).unwrap();
        let err = check_all(&mut s, &[a, b], |t, s| {
            let (av, bv) = (t.param(s, a), t.param(s, b));
            let o = t.matmul_t(av, bv)?;
            weighted_sum(t, o, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn elementwise_grads(r in 1usize..9, c in 1usize..9, seed in any::<u64>()) {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_tensor(&[r, c], seed)).unwrap();
        let b = s.add("b", rand_tensor(&[r, c], seed.wrapping_add(1))).unwrap();
        let bias = s.add("bias", rand_tensor(&[1, c], seed.wrapping_add(2))).unwrap();
        let err = check_all(&mut s, &[a, b, bias], |t, s| {
            let (av, bv, biasv) = (t.param(s, a), t.param(s, b), t.param(s, bias));
            let sum = t.add(av, bv)?;
            let prod = t.mul(sum, av)?;
            let scaled = t.scale(prod, -1.7);
            let o = t.add_row(scaled, biasv)?;
            weighted_sum(t, o, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn relu_grad(r in 1usize..9, c in 1usize..9, seed in any::<u64>()) {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_away_from_zero(&[r, c], seed)).unwrap();
        let err = check_all(&mut s, &[a], |t, s| {
            let av = t.param(s, a);
            let o = t.relu(av);
            weighted_sum(t, o, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_grad(r in 1usize..9, c in 1usize..9, seed in any::<u64>()) {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_tensor(&[r, c], seed).map(|x| 3.0 * x)).unwrap();
        let err = check_all(&mut s, &[a], |t, s| {
            let av = t.param(s, a);
            let o = t.softmax_rows(av)?;
            weighted_sum(t, o, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    // With two columns the normalized output is ±1 up to epsilon and the
    // input gradient vanishes below finite-difference resolution.
    #[test]
    fn layer_norm_grad(r in 1usize..9, c in 3usize..9, seed in any::<u64>()) {
        let mut s = ParamStore::new();
        let x = s.add("x", rand_tensor(&[r, c], seed)).unwrap();
        let g = s.add("g", rand_tensor(&[1, c], seed.wrapping_add(1))).unwrap();
        let b = s.add("b", rand_tensor(&[1, c], seed.wrapping_add(2))).unwrap();
        let err = check_all(&mut s, &[x, g, b], |t, s| {
            let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, b));
            let o = t.layer_norm(xv, gv, bv)?;
            weighted_sum(t, o, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn embedding_grad(v in 1usize..9, d in 1usize..9, ids in proptest::collection::vec(0usize..8, 1..8), seed in any::<u64>()) {
        let ids: Vec<usize> = ids.into_iter().map(|i| i % v).collect();
        let mut s = ParamStore::new();
        let table = s.add("table", rand_tensor(&[v, d], seed)).unwrap();
        let err = check_all(&mut s, &[table], |t, s| {
            let tv = t.param(s, table);
            let o = t.embedding(tv, &ids)?;
            weighted_sum(t, o, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn cross_entropy_grad(
        r in 1usize..9,
        c in 2usize..9,
        raw in proptest::collection::vec(proptest::option::weighted(0.8, 0usize..8), 8),
        smoothing in prop_oneof![Just(0.0), 0.0f64..0.3],
        seed in any::<u64>(),
    ) {
        let mut targets: Vec<Option<usize>> = raw[..r].iter().map(|t| t.map(|x| x % c)).collect();
        if targets.iter().all(Option::is_none) {
            targets[0] = Some(0);
        }
        let mut s = ParamStore::new();
        let l = s.add("logits", rand_tensor(&[r, c], seed).map(|x| 2.0 * x)).unwrap();
        let err = check_all(&mut s, &[l], |t, s| {
            let lv = t.param(s, l);
            t.cross_entropy(lv, &targets, smoothing)
        });
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn concat_and_slice_grads(r in 1usize..9, c1 in 1usize..5, c2 in 1usize..5, seed in any::<u64>()) {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_tensor(&[r, c1], seed)).unwrap();
        let b = s.add("b", rand_tensor(&[r, c2], seed.wrapping_add(1))).unwrap();
        let err = check_all(&mut s, &[a, b], |t, s| {
            let (av, bv) = (t.param(s, a), t.param(s, b));
            let cat = t.concat_cols(&[av, bv, av])?;
            let width = c1 + c2;
            let mid = t.slice_cols(cat, 1, width)?;
            let stacked = t.concat_rows(&[mid, mid])?;
            let rows = t.slice_rows(stacked, r / 2, r)?;
            let sq = t.mul(rows, rows)?;
            weighted_sum(t, sq, seed)
        });
        prop_assert!(err < TOL, "{err}");
    }
}

#[test]
fn two_layer_composition_matches_finite_differences() {
    let mut s = ParamStore::new();
    let w1 = s.add("w1", rand_tensor(&[6, 8], 10)).unwrap();
    let b1 = s.add("b1", rand_tensor(&[1, 8], 11)).unwrap();
    let w2 = s.add("w2", rand_tensor(&[8, 5], 12)).unwrap();
    let x = rand_tensor(&[4, 6], 13);
    let targets = [Some(0), Some(4), None, Some(2)];
    let f = |t: &mut Tape, s: &ParamStore| {
        let xv = t.constant(x.clone());
        let (w1v, b1v, w2v) = (t.param(s, w1), t.param(s, b1), t.param(s, w2));
        let h = t.matmul(xv, w1v)?;
        let h = t.add_row(h, b1v)?;
        let h = t.relu(h);
        let logits = t.matmul(h, w2v)?;
        t.cross_entropy(logits, &targets, 0.0)
    };
    for id in [w1, b1, w2] {
        let err = check_gradients(f, &mut s, id, STEP).unwrap();
        assert!(err < TOL, "{} {err}", s.get(id).name());
    }
}

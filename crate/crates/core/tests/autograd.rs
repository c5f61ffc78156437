use bnnkit::autograd::{finite_diff_grad, BnStats, ConvGeometry, Tape, Var};
use bnnkit::normalize::Center;
use bnnkit::{Error, Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Records `f` on fresh leaves and contracts its output with a fixed random
/// tensor so every output element carries a distinct weight.
fn contracted(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    probe_seed: u64,
) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let shape = tape.value(y).shape().to_vec();
    let r = Tensor::uniform(
        &shape,
        -1.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(probe_seed),
    );
    let r = tape.constant(r);
    let yr = tape.mul(y, r)?;
    let loss = tape.sum(yr);
    Ok((tape, vars, loss))
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .data()
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.data().iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error between tape gradients and central differences over
/// every input.
fn check(f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
    let (mut tape, vars, loss) = contracted(f, inputs, 99).unwrap();
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        assert_eq!(analytic.shape(), inputs[i].shape());
        let numeric = finite_diff_grad(
            |probe| {
                let mut ins = inputs.to_vec();
                ins[i] = probe.clone();
                let (tape, _, loss) = contracted(f, &ins, 99)?;
                Ok(tape.value(loss).item())
            },
            &inputs[i],
            H,
        )
        .unwrap();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn conv_then_sum_matches_finite_differences() {
    for (seed, stride, padding, pad_value) in [
        (1, 1, 1, -1.0),
        (2, 2, 1, 0.0),
        (3, 1, 0, 0.5),
        (4, 2, 2, -1.0),
    ] {
        let g = ConvGeometry::new(stride, padding, pad_value);
        let err = check(
            &|t, v| t.conv2d(v[0], v[1], g),
            &[rand(&[2, 3, 6, 5], seed), rand(&[4, 3, 3, 3], seed + 10)],
        );
        assert!(err < TOL, "stride {stride} padding {padding}: {err}");
    }
}

#[test]
fn elementwise_ops() {
    let (a, b) = (rand(&[2, 3, 4], 5), rand(&[2, 3, 4], 6));
    assert!(check(&|t, v| t.add(v[0], v[1]), &[a.clone(), b.clone()]) < TOL);
    assert!(check(&|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()]) < TOL);
    assert!(check(&|t, v| Ok(t.scale(v[0], -2.5)), std::slice::from_ref(&a)) < TOL);
    assert!(check(&|t, v| Ok(t.sum_squares(v[0])), &[a]) < TOL);
}

#[test]
fn channel_ops() {
    let x = rand(&[2, 3, 4, 4], 7);
    assert!(
        check(
            &|t, v| t.mul_channel(v[0], v[1]),
            &[x.clone(), rand(&[3], 8)]
        ) < TOL
    );
    assert!(
        check(
            &|t, v| t.add_channel(v[0], v[1]),
            &[x.clone(), rand(&[3], 9)]
        ) < TOL
    );
    assert!(check(&|t, v| t.global_avg_pool(v[0]), &[x]) < TOL);
}

#[test]
fn batch_norm_in_both_modes() {
    let x = rand(&[4, 3, 3, 3], 10);
    let (g, b) = (positive(&[3], 11), rand(&[3], 12));
    let batch =
        |t: &mut Tape, v: &[Var]| Ok(t.batch_norm(v[0], v[1], v[2], BnStats::Batch, 1e-5)?.0);
    assert!(check(&batch, &[x.clone(), g.clone(), b.clone()]) < TOL);
    let (mean, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.0, 2.0]);
    let running = |t: &mut Tape, v: &[Var]| {
        Ok(t.batch_norm(
            v[0],
            v[1],
            v[2],
            BnStats::Running {
                mean: &mean,
                var: &var,
            },
            1e-5,
        )?
        .0)
    };
    assert!(check(&running, &[x, g, b]) < TOL);
}

#[test]
fn linear_and_cross_entropy() {
    let labels = [2, 0, 1, 2, 1];
    assert!(
        check(
            &|t, v| t.linear(v[0], v[1], v[2]),
            &[rand(&[5, 6], 13), rand(&[3, 6], 14), rand(&[3], 15)]
        ) < TOL
    );
    assert!(
        check(
            &|t, v| t.cross_entropy(v[0], &labels),
            &[rand(&[5, 3], 16).scale(3.0)]
        ) < TOL
    );
}

#[test]
fn max_pool_away_from_ties() {
    let err = check(
        &|t, v| t.max_pool2d(v[0], 3, 2, 1),
        &[rand(&[2, 2, 6, 6], 17)],
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn normalizer_ops() {
    let w = rand(&[4, 3, 3, 3], 18);
    assert!(
        check(
            &|t, v| Ok(t.standardize(v[0], 1.0, Center::Mean)),
            std::slice::from_ref(&w)
        ) < TOL
    );
    assert!(
        check(
            &|t, v| Ok(t.standardize(v[0], std::f64::consts::SQRT_2, Center::Mean)),
            std::slice::from_ref(&w)
        ) < TOL
    );
    assert!(
        check(
            &|t, v| Ok(t.std_normalize_channels(v[0])),
            &[rand(&[3, 2, 4, 4], 19)]
        ) < TOL
    );
    assert!(check(&|t, v| Ok(t.mean_abs_rows(v[0])), &[w]) < TOL);
}

#[test]
fn prelu_family_away_from_the_kink() {
    // slopes of the two branches differ enough that no input lands on a tie
    let x = rand(&[2, 3, 3, 3], 20);
    let a = Tensor::from_vec(vec![0.25, 0.1, -0.2]);
    let b = Tensor::from_vec(vec![1.0, 1.5, 0.8]);
    let g = Tensor::from_vec(vec![0.05, -0.1, 0.0]);
    let z = Tensor::from_vec(vec![0.0, 0.3, -0.4]);
    let err = check(
        &|t, v| t.prelu_family(v[0], v[1], v[2], v[3], v[4]),
        &[x, a, b, g, z],
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn composite_chain() {
    // conv -> bn -> add -> pool -> linear -> cross entropy, differentiated end to end
    let f = |t: &mut Tape, v: &[Var]| {
        let y = t.conv2d(v[0], v[1], ConvGeometry::new(1, 1, 0.0))?;
        let (y, _) = t.batch_norm(y, v[2], v[3], BnStats::Batch, 1e-5)?;
        let y = t.add(y, v[0])?;
        let p = t.global_avg_pool(y)?;
        let l = t.linear(p, v[4], v[5])?;
        t.cross_entropy(l, &[1, 0])
    };
    let inputs = [
        rand(&[2, 3, 4, 4], 21),
        rand(&[3, 3, 3, 3], 22),
        positive(&[3], 23),
        rand(&[3], 24),
        rand(&[2, 3], 25),
        rand(&[2], 26),
    ];
    let err = check(&f, &inputs);
    assert!(err < TOL, "{err}");
}

#[test]
fn reused_leaf_gets_the_sum_of_both_paths() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.5, -2.0]));
    let sq = tape.mul(x, x).unwrap();
    let y = tape.add(sq, x).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    // d/dx (x^2 + x) = 2x + 1
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -3.0]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn conv_shape_mismatch_is_described() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.leaf(Tensor::zeros(&[2, 2, 3, 3]));
    match tape.conv2d(x, w, ConvGeometry::new(1, 0, 0.0)) {
        Err(Error::Shape(msg)) => assert!(msg.contains('3') && msg.contains('2'), "{msg}"),
        other => panic!("expected a shape error, got {:?}", other.map(|_| ())),
    }
}

fn conv_grads(x: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
    let y = tape.conv2d(xv, wv, ConvGeometry::new(2, 1, -1.0)).unwrap();
    let y2 = tape.sum_squares(y);
    tape.backward(y2).unwrap();
    (
        tape.value(y).clone(),
        tape.grad(xv).unwrap().clone(),
        tape.grad(wv).unwrap().clone(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradients_keep_shapes_and_are_deterministic(
        seed in any::<u64>(), n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 3usize..7, w in 3usize..7,
    ) {
        let x = rand(&[n, c, h, w], seed);
        let k = rand(&[o, c, 3, 3], seed.wrapping_add(1));
        let first = conv_grads(&x, &k);
        prop_assert_eq!(first.1.shape(), x.shape());
        prop_assert_eq!(first.2.shape(), k.shape());
        let second = conv_grads(&x, &k);
        prop_assert_eq!(first, second);
    }

    #[test]
    fn random_points_match_finite_differences(seed in any::<u64>()) {
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], ConvGeometry::new(1, 1, -1.0))?;
            Ok(t.batch_norm(y, v[2], v[3], BnStats::Batch, 1e-5)?.0)
        };
        let inputs = [rand(&[2, 2, 4, 4], seed), rand(&[2, 2, 3, 3], seed ^ 1), positive(&[2], seed ^ 2), rand(&[2], seed ^ 3)];
        let err = check(&f, &inputs);
        prop_assert!(err < TOL, "{}", err);
    }
}

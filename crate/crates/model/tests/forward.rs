use proptest::prelude::*;
use pulsebp_model::{forward, forward_graph, predict, Mode, ModelConfig, ModelParams};
use pulsebp_tensorgrad::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * cfg.t * cfg.l_in).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![n, cfg.t, cfg.l_in], data).unwrap()
}

#[test]
fn forward_shape_and_determinism() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 11).unwrap();
    let x = batch(4, &cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = forward(&params, &x, Mode::Eval, &mut rng).unwrap();
    let b = forward(&params, &x, Mode::Eval, &mut rng).unwrap();
    assert_eq!(a.shape(), &[4, 2]);
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| *v >= 0.0));

    let chunked = predict(&params, &x, 3).unwrap();
    let flat: Vec<f64> = chunked.iter().flatten().copied().collect();
    assert_eq!(flat, a.data());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let x = Tensor::zeros(vec![2, 47, 12]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(forward(&params, &x, Mode::Eval, &mut rng).is_err());
}

#[test]
fn train_mode_dropout_changes_output_but_is_seeded() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 3).unwrap();
    let x = batch(2, &cfg, 2);
    let run = |seed| forward(&params, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let eval = forward(&params, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), eval);
}

#[test]
fn zero_dropout_train_equals_eval_bit_exactly() {
    let cfg = ModelConfig { dropout_p: 0.0, ..ModelConfig::default() };
    let params = ModelParams::init(&cfg, 4).unwrap();
    let x = batch(3, &cfg, 3);
    let train = forward(&params, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let eval = forward(&params, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(train.data(), eval.data());
}

fn small_config() -> ModelConfig {
    ModelConfig { d_model: 16, t: 8, n_heads: 3, d_head: 4, d_ff: 24, pool_factor: 2, ..ModelConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_are_non_negative(seed in any::<u64>(), bias in -10.0f64..10.0, scale in 0.1f64..50.0) {
        let cfg = small_config();
        let mut params = ModelParams::init(&cfg, seed).unwrap();
        params.get_mut("head_bias").unwrap().data_mut().fill(bias);
        params.set_output_calibration([bias * 3.0, -bias], [scale, scale]).unwrap();
        let x = batch(5, &cfg, seed ^ 1);
        let y = forward(&params, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(y.data().iter().all(|v| *v >= 0.0));
        let y = forward(&params, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(y.data().iter().all(|v| *v >= 0.0));
    }
}

/// Loss for the gradient check. Train mode with a re-seeded dropout RNG so
/// every evaluation draws the same masks.
fn loss(params: &ModelParams, x: &Tensor, target: &[f64]) -> f64 {
    let mut g = Graph::new();
    let f = forward_graph(&mut g, params, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let t = g.constant(vec![x.shape()[0], 2], target.to_vec()).unwrap();
    let l = g.mse_loss(f.output, t).unwrap();
    g.value(l).unwrap()[0]
}

fn analytic(params: &mut ModelParams, x: &Tensor, target: &[f64]) {
    params.zero_grad();
    let mut g = Graph::new();
    let f = forward_graph(&mut g, params, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let t = g.constant(vec![x.shape()[0], 2], target.to_vec()).unwrap();
    let l = g.mse_loss(f.output, t).unwrap();
    g.backward(l).unwrap();
    f.bound.accumulate_grads(&g, params).unwrap();
}

#[test]
fn end_to_end_gradient_check_on_two_samples() {
    let cfg = ModelConfig { n_heads: 3, ..ModelConfig::default() };
    let mut params = ModelParams::init(&cfg, 21).unwrap();
    params.set_output_calibration([110.0, 75.0], [10.0, 6.0]).unwrap();
    let x = batch(2, &cfg, 22);
    let y = forward(&params, &x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    // Targets a little off the prediction keep the loss O(1).
    let target: Vec<f64> = y.data().iter().enumerate().map(|(i, v)| v + [1.5, -0.8, 0.6, -1.1][i]).collect();
    analytic(&mut params, &x, &target);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let names: Vec<String> = params.names().to_vec();
    for name in &names {
        let t = params.get(name).unwrap();
        if !t.requires_grad() {
            assert!(t.grad().is_none_or(|g| g.iter().all(|v| *v == 0.0)));
            continue;
        }
        let grads = t.grad().expect("trainable parameter received a gradient").to_vec();
        for _ in 0..3 {
            let i = rng.random_range(0..grads.len());
            let orig = params.get(name).unwrap().data()[i];
            let h = 1e-5 * orig.abs().max(1.0);
            params.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&params, &x, &target);
            params.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&params, &x, &target);
            params.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {} vs numeric {fd} (rel {rel})", grads[i]);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4);
}

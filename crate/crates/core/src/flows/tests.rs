use super::*;
use crate::tensor::log_abs_det;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn perturb(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    store.perturb(scale, rng);
}

fn mark_all(stack: &mut FlowStack) {
    for l in stack.layers_mut() {
        if let FlowLayer::ActNorm(a) = l {
            a.mark_initialized();
        }
    }
}

fn spec(dim: usize, cond_dim: usize, blocks: usize, recipe: BlockRecipe) -> StackSpec {
    StackSpec {
        dim,
        cond_dim,
        blocks,
        recipe,
        hidden: 16,
        hidden_layers: 2,
        clamp: 3.0,
    }
}

fn random_stack(s: &StackSpec, seed: u64, noise: f64) -> (ParamStore, FlowStack) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut stack = FlowStack::build(&mut store, "f", s, &mut r).unwrap();
    perturb(&mut store, noise, &mut r);
    mark_all(&mut stack);
    (store, stack)
}

/// log|det| of the central-difference Jacobian of `f` at `x`.
fn numerical_logdet(f: impl Fn(&Tensor) -> Tensor, x: &Tensor) -> f64 {
    let d = x.cols();
    let h = 1e-5;
    let mut jac = Tensor::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.set(0, j, x.get(0, j) + h);
        xm.set(0, j, x.get(0, j) - h);
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..d {
            jac.set(i, j, (fp.get(0, i) - fm.get(0, i)) / (2.0 * h));
        }
    }
    log_abs_det(&jac)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn single_layer_stack(layer: FlowLayer, cond_dim: usize) -> FlowStack {
    let mut s = FlowStack::new(layer.dim(), cond_dim);
    s.push(layer).unwrap();
    s
}

fn check_logdet_against_jacobian(stack: &FlowStack, store: &ParamStore, seed: u64) {
    let mut r = rng(seed);
    for _ in 0..5 {
        let x = Tensor::randn(1, stack.dim(), &mut r);
        let c = (stack.cond_dim() > 0).then(|| Tensor::randn(1, stack.cond_dim(), &mut r));
        let (_, ld) = stack.forward_tensor(store, &x, c.as_ref()).unwrap();
        let num = numerical_logdet(|v| stack.forward_tensor(store, v, c.as_ref()).unwrap().0, &x);
        // Both directions: the inverse log-det at z = f(x) is the negation.
        let (z, _) = stack.forward_tensor(store, &x, c.as_ref()).unwrap();
        let (_, ild) = stack.inverse_tensor(store, &z, c.as_ref()).unwrap();
        let num_inv = numerical_logdet(|v| stack.inverse_tensor(store, v, c.as_ref()).unwrap().0, &z);
        assert!(rel(ld.item(), num) < 1e-4, "forward {} vs numerical {}", ld.item(), num);
        assert!(rel(ild.item(), num_inv) < 1e-4, "inverse {} vs numerical {}", ild.item(), num_inv);
    }
}

#[test]
fn zero_init_coupling_is_identity() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let layer = CouplingLayer::new(&mut store, "c", &half_mask(4), 2, 16, 2, 3.0, &mut r).unwrap();
    let stack = single_layer_stack(FlowLayer::Coupling(layer), 2);
    let x = Tensor::randn(7, 4, &mut r);
    let c = Tensor::randn(7, 2, &mut r);
    let (y, ld) = stack.forward_tensor(&store, &x, Some(&c)).unwrap();
    assert_eq!(y, x);
    assert!(ld.data().iter().all(|&v| v == 0.0));
}

#[test]
fn coupling_rejects_degenerate_mask() {
    let mut store = ParamStore::new();
    let err = CouplingLayer::new(&mut store, "c", &[true, true], 0, 4, 1, 3.0, &mut rng(0));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn constant_scale_coupling_doubles_transformed_dims() {
    let mut store = ParamStore::new();
    let layer = CouplingLayer::new(&mut store, "c", &half_mask(4), 0, 8, 2, 3.0, &mut rng(2)).unwrap();
    // Last scale layer is zero, so the raw scale is its bias.
    let raw = 3.0 * (2f64.ln() / 3.0).atanh();
    store
        .set(layer.scale_net.last().bias, Tensor::filled(1, 2, raw))
        .unwrap();
    let stack = single_layer_stack(FlowLayer::Coupling(layer), 0);
    let x = Tensor::row(&[0.3, -1.2, 0.7, 2.5]);
    let (y, ld) = stack.forward_tensor(&store, &x, None).unwrap();
    let want = Tensor::row(&[0.3, -1.2, 1.4, 5.0]);
    assert!(y.max_abs_diff(&want) < 1e-12);
    assert!((ld.item() - 1.386_294).abs() < 1e-6);
}

#[test]
fn coupling_scale_respects_clamp() {
    let mut store = ParamStore::new();
    let layer = CouplingLayer::new(&mut store, "c", &half_mask(2), 0, 8, 2, 3.0, &mut rng(3)).unwrap();
    store
        .set(layer.scale_net.last().bias, Tensor::filled(1, 1, 1e4))
        .unwrap();
    let stack = single_layer_stack(FlowLayer::Coupling(layer), 0);
    let (_, ld) = stack.forward_tensor(&store, &Tensor::row(&[0.1, 0.2]), None).unwrap();
    assert!(ld.item() <= 3.0 && ld.item() > 2.99);
}

#[test]
fn coupling_logdet_matches_numerical_jacobian() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let layer = CouplingLayer::new(&mut store, "c", &half_mask(4), 2, 16, 2, 3.0, &mut r).unwrap();
    perturb(&mut store, 0.5, &mut r);
    let stack = single_layer_stack(FlowLayer::Coupling(layer), 2);
    check_logdet_against_jacobian(&stack, &store, 40);
}

#[test]
fn actnorm_logdet_matches_numerical_jacobian() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let mut layer = ActNormLayer::new(&mut store, "a", 5, 2);
    layer.mark_initialized();
    perturb(&mut store, 0.5, &mut r);
    let stack = single_layer_stack(FlowLayer::ActNorm(layer), 2);
    check_logdet_against_jacobian(&stack, &store, 50);
}

#[test]
fn invertible_linear_logdet_matches_numerical_jacobian() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let layer = InvertibleLinear::new(&mut store, "l", 6, &mut r);
    perturb(&mut store, 0.3, &mut r);
    let stack = single_layer_stack(FlowLayer::Linear(layer), 0);
    check_logdet_against_jacobian(&stack, &store, 60);
}

#[test]
fn switch_logdet_matches_numerical_jacobian() {
    for dim in [2, 3, 5, 6] {
        let stack = single_layer_stack(FlowLayer::Switch(SwitchLayer::halves(dim)), 0);
        check_logdet_against_jacobian(&stack, &ParamStore::new(), 70 + dim as u64);
    }
}

#[test]
fn stack_logdet_matches_numerical_jacobian() {
    for (dim, cond, recipe) in [
        (3, 6, BlockRecipe::Glow),
        (4, 6, BlockRecipe::CouplingSwitch),
        (6, 0, BlockRecipe::CouplingSwitch),
    ] {
        let (store, stack) = random_stack(&spec(dim, cond, 3, recipe), 80 + dim as u64, 0.2);
        check_logdet_against_jacobian(&stack, &store, 90);
    }
}

#[test]
fn switch_twice_is_identity() {
    let mut r = rng(7);
    let x = Tensor::randn(5, 6, &mut r);
    let sw = SwitchLayer::halves(6);
    let g = Graph::no_grad();
    let (once, _) = sw.forward(&g, g.constant(x.clone())).unwrap();
    let (twice, ld) = sw.forward(&g, once).unwrap();
    assert_eq!(twice.value(), x);
    assert_ne!(once.value(), x);
    assert!(ld.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn odd_switch_inverse_undoes_forward() {
    let mut r = rng(8);
    let x = Tensor::randn(5, 3, &mut r);
    let sw = SwitchLayer::halves(3);
    let g = Graph::no_grad();
    let (y, _) = sw.forward(&g, g.constant(x.clone())).unwrap();
    let (back, _) = sw.inverse(&g, y).unwrap();
    assert_eq!(back.value(), x);
}

#[test]
fn every_layer_round_trips() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let mut an = ActNormLayer::new(&mut store, "a", 4, 3);
    an.mark_initialized();
    let layers = vec![
        FlowLayer::Coupling(CouplingLayer::new(&mut store, "c", &half_mask(4), 3, 16, 2, 3.0, &mut r).unwrap()),
        FlowLayer::ActNorm(an),
        FlowLayer::Linear(InvertibleLinear::new(&mut store, "l", 4, &mut r)),
        FlowLayer::Switch(SwitchLayer::halves(4)),
    ];
    perturb(&mut store, 0.4, &mut r);
    for layer in layers {
        let stack = single_layer_stack(layer, 3);
        let x = Tensor::randn(100, 4, &mut r);
        let c = Tensor::randn(100, 3, &mut r);
        let (y, ld) = stack.forward_tensor(&store, &x, Some(&c)).unwrap();
        let (back, ild) = stack.inverse_tensor(&store, &y, Some(&c)).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9, "{}", stack.layers()[0].kind());
        let mut sum = ld.clone();
        sum.add_assign(&ild);
        assert!(sum.data().iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn eight_layer_conditional_stack_round_trips() {
    let (store, stack) = random_stack(&spec(4, 3, 2, BlockRecipe::Glow), 10, 0.3);
    assert_eq!(stack.len(), 8);
    let mut r = rng(11);
    let z = Tensor::randn(100, 4, &mut r);
    let c = Tensor::randn(100, 3, &mut r);
    let (eps, ild) = stack.inverse_tensor(&store, &z, Some(&c)).unwrap();
    let (back, ld) = stack.forward_tensor(&store, &eps, Some(&c)).unwrap();
    assert!(back.max_abs_diff(&z) < 1e-8);
    for i in 0..100 {
        assert!((ld.get(i, 0) + ild.get(i, 0)).abs() < 1e-10);
    }
}

#[test]
fn prior_sized_stacks_round_trip() {
    for (dim, recipe) in [(4, BlockRecipe::CouplingSwitch), (3, BlockRecipe::Glow)] {
        let mut s = spec(dim, 6, 8, recipe);
        s.hidden = 64;
        let (store, stack) = random_stack(&s, 12, 0.05);
        let mut r = rng(13);
        let x = Tensor::randn(100, dim, &mut r);
        let c = Tensor::randn(100, 6, &mut r);
        let (y, _) = stack.forward_tensor(&store, &x, Some(&c)).unwrap();
        let (back, _) = stack.inverse_tensor(&store, &y, Some(&c)).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-8);
    }
}

#[test]
fn stack_logdet_is_sum_of_layer_logdets() {
    let (store, stack) = random_stack(&spec(4, 2, 2, BlockRecipe::Glow), 14, 0.3);
    let mut r = rng(15);
    let x = Tensor::randn(6, 4, &mut r);
    let c = Tensor::randn(6, 2, &mut r);
    let g = Graph::no_grad();
    let cv = Some(g.constant(c.clone()));
    let mut h = g.constant(x.clone());
    let mut total: Option<Var> = None;
    for layer in stack.layers() {
        let (y, ld) = layer.forward(&g, &store, h, cv).unwrap();
        total = Some(match total {
            Some(t) => t.add(ld).unwrap(),
            None => ld,
        });
        h = y;
    }
    let (_, ld) = stack.forward_tensor(&store, &x, Some(&c)).unwrap();
    assert_eq!(total.unwrap().value(), ld);
}

#[test]
fn empty_stack_is_identity() {
    let stack = FlowStack::new(3, 0);
    let x = Tensor::randn(4, 3, &mut rng(16));
    let (z, ld) = stack.forward_tensor(&ParamStore::new(), &x, None).unwrap();
    assert_eq!(z, x);
    assert!(ld.data().iter().all(|&v| v == 0.0));
}

#[test]
fn diagonal_linear_has_zero_logdet() {
    let mut store = ParamStore::new();
    let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]).unwrap();
    let layer = InvertibleLinear::from_matrix(&mut store, "l", &w).unwrap();
    let stack = single_layer_stack(FlowLayer::Linear(layer), 0);
    let (z, ld) = stack.forward_tensor(&store, &Tensor::row(&[1.0, 1.0]), None).unwrap();
    assert!(z.max_abs_diff(&Tensor::row(&[2.0, 0.5])) < 1e-12);
    assert!(ld.item().abs() < 1e-12);
}

#[test]
fn log_prob_of_identity_stack_at_origin() {
    let stack = FlowStack::new(2, 0);
    let lp = stack.log_prob_tensor(&ParamStore::new(), &Tensor::zeros(1, 2), None).unwrap();
    assert!((lp.item() + 1.837_877).abs() < 1e-6);
}

#[test]
fn log_prob_under_doubling_stack() {
    let mut store = ParamStore::new();
    let mut an = ActNormLayer::new(&mut store, "a", 2, 0);
    store.set(an.log_scale, Tensor::filled(1, 2, 2f64.ln())).unwrap();
    an.mark_initialized();
    let stack = single_layer_stack(FlowLayer::ActNorm(an), 0);
    let lp = stack.log_prob_tensor(&store, &Tensor::zeros(1, 2), None).unwrap();
    assert!((lp.item() + 3.224_171).abs() < 1e-6);
}

#[test]
fn conditional_density_integrates_to_one() {
    // Small enough weights that essentially no mass leaves the grid window.
    let (store, stack) = random_stack(&spec(2, 1, 2, BlockRecipe::Glow), 17, 0.1);
    let c = Tensor::row(&[0.7]);
    let n = 400;
    let step = 12.0 / n as f64;
    let mut mass = 0.0;
    for i in 0..n {
        let x = -6.0 + (i as f64 + 0.5) * step;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|j| vec![x, -6.0 + (j as f64 + 0.5) * step])
            .collect();
        let z = Tensor::from_rows(&rows).unwrap();
        let cs = c.repeat_rows(n);
        let lp = stack.log_prob_tensor(&store, &z, Some(&cs)).unwrap();
        mass += lp.data().iter().map(|v| v.exp()).sum::<f64>() * step * step;
    }
    assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
}

#[test]
fn log_prob_is_finite_on_own_samples() {
    let (store, stack) = random_stack(&spec(3, 2, 4, BlockRecipe::Glow), 18, 0.2);
    for seed in 0..10 {
        let mut r = rng(seed);
        let c = Tensor::randn(20, 2, &mut r);
        let z = stack.sample(&store, 20, Some(&c), &mut r).unwrap();
        let lp = stack.log_prob_tensor(&store, &z, Some(&c)).unwrap();
        assert!(lp.all_finite());
    }
}

#[test]
fn identity_stack_sample_is_base_draw() {
    let stack = FlowStack::new(3, 0);
    let z = stack.sample(&ParamStore::new(), 4, None, &mut rng(19)).unwrap();
    assert_eq!(z, Tensor::randn(4, 3, &mut rng(19)));
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let (store, stack) = random_stack(&spec(4, 2, 2, BlockRecipe::Glow), 20, 0.2);
    let c = Tensor::randn(8, 2, &mut rng(21));
    let a = stack.sample(&store, 8, Some(&c), &mut rng(22)).unwrap();
    let b = stack.sample(&store, 8, Some(&c), &mut rng(22)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn identity_stack_samples_are_standard_normal() {
    let stack = FlowStack::new(3, 0);
    let z = stack.sample(&ParamStore::new(), 10_000, None, &mut rng(23)).unwrap();
    for j in 0..3 {
        let col: Vec<f64> = (0..z.rows()).map(|i| z.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 0.05);
        assert!((0.9..=1.1).contains(&var));
    }
}

#[test]
fn actnorm_init_standardizes_batch() {
    let mut r = rng(24);
    let mut s = spec(3, 2, 2, BlockRecipe::Glow);
    s.hidden = 8;
    let mut store = ParamStore::new();
    let mut stack = FlowStack::build(&mut store, "f", &s, &mut r).unwrap();
    let mut z = Tensor::randn(256, 3, &mut r);
    for i in 0..256 {
        z.set(i, 0, 3.0 * z.get(i, 0) + 5.0);
        z.set(i, 2, 0.1 * z.get(i, 2) - 2.0);
    }
    let c = Tensor::randn(256, 2, &mut r);
    stack.initialize(&mut store, &z, Some(&c)).unwrap();
    assert!(!stack.needs_init());
    // The first actnorm in normalizing order sits at the end of the list.
    let last = stack.layers().len() - 1;
    let first_actnorm = single_layer_stack(stack.layers()[last].clone(), 2);
    let (out, _) = first_actnorm.inverse_tensor(&store, &z, Some(&c)).unwrap();
    for j in 0..3 {
        let col: Vec<f64> = (0..256).map(|i| out.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / 256.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 256.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn training_mode_requires_actnorm_init() {
    let mut store = ParamStore::new();
    let mut stack = FlowStack::build(&mut store, "f", &spec(3, 0, 1, BlockRecipe::Glow), &mut rng(25)).unwrap();
    let x = Tensor::zeros(2, 3);
    stack.set_training(true);
    let err = stack.forward_tensor(&store, &x, None).unwrap_err();
    assert!(matches!(err, Error::InitRequired { .. }));
    stack.set_training(false);
    assert!(stack.forward_tensor(&store, &x, None).is_ok());
}

#[test]
fn non_finite_output_names_layer() {
    let mut store = ParamStore::new();
    let mut an = ActNormLayer::new(&mut store, "a", 2, 0);
    store.set(an.log_scale, Tensor::filled(1, 2, 800.0)).unwrap();
    an.mark_initialized();
    let mut stack = FlowStack::new(2, 0);
    stack.push(FlowLayer::Switch(SwitchLayer::halves(2))).unwrap();
    stack.push(FlowLayer::ActNorm(an)).unwrap();
    let err = stack.forward_tensor(&store, &Tensor::row(&[1.0, 1.0]), None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteFlow { layer: 1 }));
}

#[test]
fn mismatched_conditioning_is_rejected() {
    let (store, stack) = random_stack(&spec(4, 3, 1, BlockRecipe::CouplingSwitch), 26, 0.1);
    let x = Tensor::zeros(2, 4);
    assert!(matches!(
        stack.forward_tensor(&store, &x, Some(&Tensor::zeros(2, 2))),
        Err(Error::Dim(_))
    ));
    assert!(matches!(stack.forward_tensor(&store, &x, None), Err(Error::Dim(_))));
    assert!(matches!(
        stack.forward_tensor(&store, &Tensor::zeros(2, 5), Some(&Tensor::zeros(2, 3))),
        Err(Error::Dim(_))
    ));
}

#[test]
fn coupling_logdet_gradients_match_finite_differences() {
    use crate::gradcheck::finite_diff_check;
    let mut r = rng(27);
    let mut store = ParamStore::new();
    let layer = CouplingLayer::new(&mut store, "c", &half_mask(4), 2, 8, 2, 3.0, &mut r).unwrap();
    perturb(&mut store, 0.5, &mut r);
    let x = Tensor::randn(3, 4, &mut r);
    let c = Tensor::randn(3, 2, &mut r);
    let ids: Vec<_> = store.ids().collect();
    let report = finite_diff_check(&mut store, &ids, 4, 1e-5, &mut r, |g, ps| {
        let (y, ld) = layer.forward(g, ps, g.constant(x.clone()), Some(g.constant(c.clone())))?;
        y.square().sum().add(ld.sum())
    })
    .unwrap();
    assert!(report.checked >= 20);
    assert!(report.passed(1e-4), "{report:?}");
}

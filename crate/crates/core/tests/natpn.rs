mod oracles;

use dum_core::natpn::*;
use dum_core::nn::Bound;
use dum_core::rng;
use numcore::{gradcheck, Graph, Tensor};
use rand::Rng;

#[test]
fn dirichlet_entropy_matches_monte_carlo() {
    let mut r = rng::stream(11, "dirichlet");
    for case in 0..20 {
        let c = 2 + case % 4;
        let alpha: Vec<f64> = (0..c).map(|_| r.random_range(0.5..10.0)).collect();
        let g = Graph::new();
        let h = dirichlet_entropy(g.constant(Tensor::from_rows(&[alpha.clone()]))).unwrap().value().item();
        let (mc, se) = oracles::dirichlet_entropy_mc(&alpha, 100_000, &mut r);
        assert!((h - mc).abs() < 3.0 * se, "alpha {alpha:?}: closed form {h}, mc {mc} ± {se}");
    }
}

#[test]
fn zero_evidence_returns_the_prior() {
    let mut r = rng::stream(2, "prior");
    let prior = PriorConfig { n_prior: 7.0, chi_prior: vec![0.2, 0.3, 0.5], entropy_lambda: 0.0 };
    let g = Graph::new();
    let chi = Tensor::from_rows(&[vec![0.1, 0.1, 0.8], vec![0.6, 0.3, 0.1]]);
    let post = bayesian_update(g.constant(chi), g.constant(Tensor::zeros(&[2])), &prior).unwrap().values().unwrap();
    for i in 0..2 {
        assert_eq!(post.alpha.row(i), &[7.0 * 0.2, 7.0 * 0.3, 7.0 * 0.5]);
        assert_eq!(post.n_post[i], 7.0);
    }

    for _ in 0..50 {
        let logits = Tensor::randn(&[4, 3], &mut r);
        let n: Vec<f64> = (0..4).map(|_| r.random_range(0.0..1e4)).collect();
        let g = Graph::new();
        let chi = g.constant(logits).softmax(1).unwrap();
        let post = bayesian_update(chi, g.constant(Tensor::from_vec(n)), &prior).unwrap().values().unwrap();
        for i in 0..4 {
            let total: f64 = post.alpha.row(i).iter().sum();
            assert!((total - post.n_post[i]).abs() < 1e-9 * post.n_post[i].max(1.0));
        }
    }
}

fn single_row_loss(log_n: f64, lambda: f64) -> f64 {
    let prior = PriorConfig::uniform(2, lambda);
    let g = Graph::new();
    let chi = g.constant(Tensor::from_rows(&[vec![0.7, 0.3]]));
    let post = bayesian_update(chi, g.constant(Tensor::from_vec(vec![log_n.exp()])), &prior).unwrap();
    bayesian_loss(post.alpha, &[0], lambda).unwrap().value().item()
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-6 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn entropy_weight_lowers_the_optimal_evidence() {
    let (lo, hi) = (-5.0, 25.0);
    let free = golden_min(|x| single_row_loss(x, 0.0), lo, hi);
    assert!(free > hi - 0.1, "without the entropy term evidence should run to the bracket edge, got {free}");
    let mut last = free;
    for lambda in [1e-3, 1e-2, 1e-1] {
        let opt = golden_min(|x| single_row_loss(x, lambda), lo, hi);
        assert!(opt < last - 0.1, "lambda {lambda}: optimum {opt} not below {last}");
        last = opt;
    }
}

#[test]
fn constant_budget_rescaling_keeps_epistemic_order() {
    let mut r = rng::stream(4, "budget");
    let prior = PriorConfig::uniform(3, 0.0);
    let small = NatPnHead::new(2, 3, 4, prior, BudgetConfig::constant(10.0), &mut r).unwrap();
    let mut large = small.clone();
    large.budget = BudgetConfig::constant(1e4);
    let z = Tensor::randn(&[200, 2], &mut r).scale(2.0);
    let order = |h: &NatPnHead| {
        let e = h.predict(&z).unwrap().epistemic.unwrap();
        let mut idx: Vec<usize> = (0..e.len()).collect();
        idx.sort_by(|&a, &b| e[a].total_cmp(&e[b]));
        idx
    };
    assert_eq!(order(&small), order(&large));
    let (_, lp) = small.posterior(&z).unwrap();
    let by_density: Vec<usize> = {
        let mut idx: Vec<usize> = (0..lp.len()).collect();
        idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
        idx
    };
    assert_eq!(order(&small), by_density);
}

#[test]
fn head_loss_gradients_match_finite_differences() {
    let mut r = rng::stream(8, "head grad");
    for lambda in [0.0, 1e-2] {
        let head = NatPnHead::new(3, 4, 2, PriorConfig::uniform(4, lambda), BudgetConfig::default(), &mut r).unwrap();
        let z = Tensor::randn(&[5, 3], &mut r);
        let labels = [0, 3, 1, 2, 3];
        let mut inputs = vec![z];
        inputs.extend(dum_core::nn::Parameterized::params(&head).into_iter().cloned());
        let check = gradcheck::check(&inputs, |_, vars| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            let out = head.forward(vars[0], &mut bound.cursor()).unwrap();
            Ok(head.loss(&out, &labels).unwrap())
        })
        .unwrap();
        assert!(check.rel_error < 1e-6, "lambda {lambda}: {}", check.rel_error);
    }
}

mod oracles;

use dum_core::data::{make_collapse_toy, ToySpec};
use dum_core::gp::*;
use dum_core::nn::{Bound, Parameterized};
use dum_core::optim::{schedule_lr, Optimizer, OptimizerKind, Schedule};
use dum_core::rng;
use nalgebra::DMatrix;
use numcore::{Graph, Tensor};

fn column(xs: &[f64]) -> Tensor {
    Tensor::new(vec![xs.len(), 1], xs.to_vec()).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn kernels_match_closed_forms_and_are_psd() {
    let mut r = rng::stream(1, "kernels");
    let x = Tensor::randn(&[12, 3], &mut r);
    let y = Tensor::randn(&[7, 3], &mut r);
    let d2_xy = oracles::sq_dists(&rows(&x), &rows(&y));
    for family in KernelFamily::ALL {
        let cfg = KernelConfig { family, lengthscale: 1.3, outputscale: 0.7, rq_alpha: 2.5 };
        let k = kernel_eval(&cfg, &x, &y).unwrap();
        for i in 0..12 {
            for j in 0..7 {
                let want = oracles::kernel_oracle(&cfg, d2_xy[(i, j)]);
                assert!((k.get2(i, j) - want).abs() < 1e-12, "{family:?}");
            }
        }
        let kxx = oracles::to_matrix(&kernel_eval(&cfg, &x, &x).unwrap());
        assert_eq!(kxx, kxx.transpose(), "{family:?} not symmetric");
        let min_eig = kxx.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig > -1e-10, "{family:?} min eigenvalue {min_eig}");
        for i in 0..12 {
            assert_eq!(kxx[(i, i)], 0.7);
        }
    }
}

#[test]
fn rational_quadratic_tends_to_rbf() {
    let mut r = rng::stream(2, "rq");
    let x = Tensor::randn(&[10, 2], &mut r);
    let rbf = kernel_eval(&KernelConfig::new(KernelFamily::Rbf), &x, &x).unwrap();
    let rq = kernel_eval(&KernelConfig { rq_alpha: 1e8, ..KernelConfig::new(KernelFamily::Rq) }, &x, &x).unwrap();
    for (a, b) in rbf.data().iter().zip(rq.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn initial_posterior_is_the_prior() {
    let mut r = rng::stream(3, "prior");
    for family in KernelFamily::ALL {
        let cfg = KernelConfig { outputscale: 2.0, ..KernelConfig::new(family) };
        let mut head = GpHead::new(2, 3, 10, &cfg, &mut r).unwrap();
        head.set_inducing(Tensor::randn(&[10, 2], &mut r)).unwrap();
        assert_eq!(head.kl().unwrap(), 0.0, "{family:?}");
        let p = head.predict(&Tensor::randn(&[25, 2], &mut r)).unwrap();
        assert!(p.mu.data().iter().all(|&m| m == 0.0));
        for &v in p.var.data() {
            assert!((v - 2.0).abs() < 1e-9, "{family:?}: latent variance {v}");
        }
    }
}

#[test]
fn inducing_at_the_data_recovers_exact_regression() {
    let n = 20;
    let noise = 0.01;
    let xs: Vec<f64> = (0..n).map(|i| -6.0 + 12.0 * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (0.8 * x).sin() + 0.1 * x).collect();
    let x = column(&xs);
    let tests: Vec<f64> = (0..41).map(|i| -7.0 + 14.0 * i as f64 / 40.0).collect();
    let xt = column(&tests);

    let cfg = KernelConfig::new(KernelFamily::Rbf);
    let mut head = GpHead::new(1, 1, n, &cfg, &mut rng::stream(0, "exact")).unwrap();
    head.set_inducing(x.clone()).unwrap();

    // only m and the Cholesky factor move; kernel and inducing stay fixed
    let trainable = 1..2 + head.num_classes;
    let mut opt = Optimizer::new(OptimizerKind::Adamw, &head.params()[trainable.clone()]);
    let steps = 4000;
    for step in 0..steps {
        let g = Graph::new();
        let bound = Bound::new(&g, &head, true);
        let mom = head.moments(g.constant(x.clone()), &mut bound.cursor()).unwrap();
        let loss = GpHead::gaussian_elbo_loss(&mom, &ys, noise, n).unwrap();
        let grads = bound.grads(&g.backward(loss).unwrap());
        let lr = schedule_lr(&Schedule::Cosine { eta_min: 1e-4 }, 2e-2, step, steps);
        let params: Vec<&mut Tensor> = head.params_mut().into_iter().skip(1).take(trainable.len()).collect();
        opt.step(params, &grads[trainable.clone()], lr, 0.0).unwrap();
    }

    let d = |a: &[f64], b: &[f64]| {
        oracles::sq_dists(
            &a.iter().map(|v| vec![*v]).collect::<Vec<_>>(),
            &b.iter().map(|v| vec![*v]).collect::<Vec<_>>(),
        )
    };
    let k_train = d(&xs, &xs).map(|v| oracles::kernel_oracle(&cfg, v));
    let k_cross: DMatrix<f64> = d(&tests, &xs).map(|v| oracles::kernel_oracle(&cfg, v));
    let (mean, var) = oracles::exact_gp(&k_train, &k_cross, &vec![1.0; tests.len()], &ys, noise);

    let pred = head.predict(&xt).unwrap();
    let rmse =
        |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
    let mean_rmse = rmse(pred.mu.data(), &mean);
    let var_rmse = rmse(pred.var.data(), &var);
    assert!(mean_rmse < 1e-3, "mean rmse {mean_rmse}");
    assert!(var_rmse < 1e-3, "variance rmse {var_rmse}");
}

#[test]
fn elbo_improves_on_the_toy() {
    let (toy, _) = make_collapse_toy(&ToySpec::default(), 0).unwrap();
    let mut r = rng::stream(4, "toy elbo");
    let mut head = GpHead::new(2, 2, TOY_INDUCING, &KernelConfig::new(KernelFamily::Rbf), &mut r).unwrap();
    head.set_inducing(init_inducing(&toy.inputs, TOY_INDUCING, 0).unwrap()).unwrap();
    let eps = head.sample_noise(TRAIN_SAMPLES, toy.len(), &mut r);
    let loss_of = |h: &GpHead| -> (f64, Vec<Tensor>) {
        let g = Graph::new();
        let bound = Bound::new(&g, h, true);
        let mom = h.moments(g.constant(toy.inputs.clone()), &mut bound.cursor()).unwrap();
        let loss = h.elbo_loss(&mom, &toy.labels, &eps, toy.len()).unwrap();
        (loss.value().item(), bound.grads(&g.backward(loss).unwrap()))
    };
    let initial = loss_of(&head).0;
    let mut opt = Optimizer::new(OptimizerKind::Adamw, &head.params());
    for _ in 0..200 {
        let (_, grads) = loss_of(&head);
        opt.step(head.params_mut(), &grads, 1e-2, 0.0).unwrap();
    }
    let last = loss_of(&head).0;
    assert!(last < initial - 0.1, "negative ELBO {initial} -> {last}");
    assert!(head.kl().unwrap() > 0.0);
}
